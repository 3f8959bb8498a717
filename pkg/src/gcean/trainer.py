"""Training objective, optimisation loop, baselines and diagnostics."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import metrics
from .data import PairedSample, training_guard
from .dvchead import (
    TASK_TERMS,
    HeadConfig,
    hungarian_match,
    normalize_events,
    select_events,
    task_loss,
    to_predictions,
)
from .gccm import attention_consistency_loss, attention_entropy, prototype_consistency_loss
from .model import GCEAN, ModelConfig
from .salm import (
    SALM_TERMS,
    SalmWeights,
    gaze_prediction_loss,
    global_alignment_loss,
    margin_ranking_loss,
    salm_total,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gcean-checkpoint-1"
ABLATIONS = {"salm-f": "salm_frame", "salm-g": "salm_gaze", "gccm-a": "gccm_A", "gccm-p": "gccm_P"}


class NonFiniteLoss(FloatingPointError):
    def __init__(self, breakdown: dict, dump_path: str | None = None):
        super().__init__(f"non-finite loss; breakdown={breakdown}" + (f" (dumped to {dump_path})" if dump_path else ""))
        self.breakdown = breakdown
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    lambda_M: float = 1.0
    lambda_A: float = 0.1
    salm: SalmWeights = field(default_factory=SalmWeights)
    lr_adapt: float = 1e-4
    lr_rest: float = 5e-5
    epochs: int = 30
    decay_milestones: tuple[int, ...] = (15, 25)
    decay_factor: float = 0.5
    patience: int = 5
    # epochs before this one are trained but never selected, and do not count toward patience
    select_after: int = 0
    seed: int = 0
    grad_clip: float = 5.0
    salm_frame: bool = True
    salm_gaze: bool = True
    gccm_A: bool = True
    gccm_P: bool = True
    source_only: bool = False
    L: int = 64
    n_heads: int = 4
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if isinstance(self.salm, dict):
            self.salm = SalmWeights(**self.salm)
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        self.decay_milestones = tuple(int(m) for m in self.decay_milestones)
        if self.lr_adapt <= 0 or self.lr_rest <= 0:
            raise ValueError("learning rates must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.select_after < self.epochs:
            raise ValueError("select_after must lie in [0, epochs)")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_milestones"] = list(self.decay_milestones)
        return d

    def ablate(self, names: Sequence[str]) -> "TrainConfig":
        cfg = copy.deepcopy(self)
        for name in names:
            if name not in ABLATIONS:
                raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
            setattr(cfg, ABLATIONS[name], False)
        return cfg

    def lr_at(self, epoch: int) -> tuple[float, float]:
        """Learning rates in effect during 1-based ``epoch``."""
        k = sum(1 for m in self.decay_milestones if epoch >= m)
        f = self.decay_factor ** k
        return self.lr_adapt * f, self.lr_rest * f


@dataclass
class LossBreakdown:
    L_S: float = 0.0
    L_G: float = 0.0
    L_S_gaze: float = 0.0
    L_G_gaze: float = 0.0
    L_PG_S: float = 0.0
    L_PG_T: float = 0.0
    L_A: float = 0.0
    L_M: float = 0.0
    task: dict = field(default_factory=dict)
    L_task: float = 0.0
    L_SALM: float = 0.0
    L_total: float = 0.0
    objective: float = 0.0

    def recompute_total(self, cfg: TrainConfig) -> float:
        w = cfg.salm
        salm = (
            w.lambda_G * self.L_G - w.lambda_S * self.L_S
            + w.lambda_G_gaze * self.L_G_gaze - w.lambda_S_gaze * self.L_S_gaze
            + w.lambda_PG_S * self.L_PG_S + w.lambda_PG_T * self.L_PG_T
        )
        return salm + cfg.lambda_M * self.L_M + cfg.lambda_A * self.L_A + self.L_task

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def build_model(cfg: TrainConfig, dim: int, vocab_size: int) -> GCEAN:
    torch.manual_seed(cfg.seed)
    return GCEAN(ModelConfig(dim=dim, vocab_size=vocab_size, n_heads=cfg.n_heads, head=cfg.head))


def make_optimizer(model: GCEAN, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        [
            {"params": model.adapt_parameters(), "lr": cfg.lr_adapt, "name": "adapt"},
            {"params": model.rest_parameters(), "lr": cfg.lr_rest, "name": "rest"},
        ],
        betas=(0.9, 0.999),
    )


def _tensor(seq) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(seq.values, dtype=np.float32))


def compute_losses(model: GCEAN, pair: PairedSample, cfg: TrainConfig) -> tuple[torch.Tensor, LossBreakdown]:
    """Forward pass over one pair; returns the differentiable objective and the breakdown.

    Must run inside :func:`training_guard`: target annotations are never read.
    """
    z = torch.zeros(())
    s_frames, s_gaze = _tensor(pair.source_frames), _tensor(pair.source_gaze)
    enc_s = model.encode(s_frames)
    terms = {name: z for name in SALM_TERMS}
    terms["L_PG_S"] = gaze_prediction_loss(enc_s.predicted_gaze, s_gaze)
    L_A = L_M = z
    if not cfg.source_only:
        t_frames, t_gaze = _tensor(pair.target_frames), _tensor(pair.target_gaze)
        enc_t = model.encode(t_frames)
        terms["L_PG_T"] = gaze_prediction_loss(enc_t.predicted_gaze, t_gaze)
        margin = cfg.salm.margin
        if cfg.salm_frame:
            terms["L_S"] = margin_ranking_loss(
                model.salm.score(enc_s.converted, "frame"), model.salm.score(enc_t.converted, "frame"), margin
            )
            terms["L_G"] = global_alignment_loss(enc_s.converted, enc_t.converted)
        if cfg.salm_gaze:
            terms["L_S_gaze"] = margin_ranking_loss(
                model.salm.score(enc_s.converted_gaze, "gaze"), model.salm.score(enc_t.converted_gaze, "gaze"), margin
            )
            terms["L_G_gaze"] = global_alignment_loss(enc_s.converted_gaze, enc_t.converted_gaze)
        if cfg.gccm_A:
            L_A = attention_consistency_loss(enc_s.stack, enc_t.stack)
        if cfg.gccm_P:
            L_M = prototype_consistency_loss(enc_s.stack, enc_t.stack)
    salm_obj, salm_rep, _ = salm_total(terms, cfg.salm)

    out = model.head(enc_s.stack.features)
    duration = pair.source_frames.duration_s
    gt = normalize_events(pair.source_events, duration)
    captions = [list(e.tokens) for e in pair.source_events]
    match = hungarian_match(out, gt, cfg.head)
    L_task, parts = task_loss(out, match, gt, captions, cfg.head, head=model.head)

    objective = salm_obj + cfg.lambda_M * L_M + cfg.lambda_A * L_A + L_task
    reported = salm_rep + cfg.lambda_M * L_M + cfg.lambda_A * L_A + L_task
    f = lambda t: float(t.detach()) if torch.is_tensor(t) else float(t)
    bd = LossBreakdown(
        **{k: f(v) for k, v in terms.items()},
        L_A=f(L_A),
        L_M=f(L_M),
        task={k: f(parts[k]) for k in TASK_TERMS},
        L_task=f(L_task),
        L_SALM=f(salm_rep),
        L_total=f(reported),
        objective=f(objective),
    )
    return objective, bd


def train_step(
    model: GCEAN,
    optimizer: torch.optim.Optimizer,
    pair: PairedSample,
    cfg: TrainConfig,
    dump_dir: str | os.PathLike | None = None,
) -> LossBreakdown:
    model.train()
    with training_guard(allow_target_inputs=not cfg.source_only):
        objective, bd = compute_losses(model, pair, cfg)
    if not math.isfinite(bd.objective):
        path = None
        if dump_dir is not None:
            path = str(Path(dump_dir) / "nonfinite_dump.json")
            Path(path).write_text(json.dumps({"pair": pair.index, "breakdown": bd.to_dict()}, indent=1))
        raise NonFiniteLoss(bd.to_dict(), path)
    optimizer.zero_grad(set_to_none=True)
    objective.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return bd


# ---------------------------------------------------------------------------
# Inference


@torch.no_grad()
def predict_pair(model: GCEAN, pair: PairedSample, view: str = "target") -> list[dict]:
    """Predicted events (seconds) for one view of a pair."""
    model.eval()
    frames = pair.source_frames if view == "source" else pair.target_frames
    enc = model.encode(_tensor(frames))
    out = model.head(enc.stack.features)
    preds = to_predictions(model.head, out)
    chosen = select_events(preds, out.predicted_count, frames.duration_s)
    return [
        {
            "t_start": ev.t_start,
            "t_end": ev.t_end,
            "tokens": list(ev.tokens),
            "confidence": preds[q].confidence,
            "query": q,
        }
        for q, ev in chosen
    ]


def evaluate_view(model: GCEAN, dataset: Sequence[PairedSample], view: str = "target") -> tuple[metrics.EvalReport, list[dict]]:
    preds, refs, keys = [], [], []
    for pair in dataset:
        events = pair.source_events if view == "source" else pair.target_events
        if events is None:
            raise ValueError(f"pair {pair.index} has no {view}-view annotations")
        preds.append(predict_pair(model, pair, view))
        refs.append(events)
        keys.append(pair.index)
    report = metrics.evaluate(preds, refs, keys=keys)
    files = [{"pair_index": k, "events": p} for k, p in zip(keys, preds)]
    return report, files


# ---------------------------------------------------------------------------
# Fitting


@dataclass
class FitResult:
    checkpoint: dict
    history: list[dict]
    model: GCEAN
    steps: list[LossBreakdown] = field(default_factory=list)


def _mean_breakdown(items: Sequence[LossBreakdown]) -> dict:
    out = {}
    for key in ("L_S", "L_G", "L_S_gaze", "L_G_gaze", "L_PG_S", "L_PG_T", "L_A", "L_M", "L_task", "L_SALM", "L_total", "objective"):
        out[key] = float(np.mean([getattr(b, key) for b in items]))
    for key in TASK_TERMS:
        out[f"task_{key}"] = float(np.mean([b.task[key] for b in items]))
    return out


def make_checkpoint(model: GCEAN, cfg: TrainConfig, vocab: Sequence[str] | None, epoch: int, extra: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "blocks": model.block_state(),
        "data": {"L": cfg.L, "C": model.cfg.dim, "vocab": list(vocab) if vocab else None},
        "model_config": model.cfg.to_dict(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "epoch": epoch,
        **(extra or {}),
    }


def save_checkpoint(ckpt: dict, path: str | os.PathLike) -> None:
    torch.save(ckpt, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[GCEAN, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    model = GCEAN(ModelConfig(**ckpt["model_config"]))
    model.load_block_state(ckpt["blocks"])
    model.eval()
    return model, ckpt


def fit(
    cfg: TrainConfig,
    train: Sequence[PairedSample],
    val: Sequence[PairedSample] = (),
    vocab: Sequence[str] | None = None,
    out_dir: str | os.PathLike | None = None,
    keep_steps: bool = False,
    selection_metric=None,
    checkpoint_extra: dict | None = None,
) -> FitResult:
    """Train with per-epoch validation, multi-step decay and early stopping.

    The selection metric is source-view val SODA_tIoU, with lower val
    L_total breaking ties. Writes ``checkpoint.pt`` and ``history.jsonl`` to
    ``out_dir`` when given.
    """
    if not train:
        raise ValueError("empty training set")
    set_determinism(cfg.seed)
    dim = train[0].dim
    vocab_size = len(vocab) if vocab else 1 + max(t for p in train for e in p.source_events for t in e.tokens)
    model = build_model(cfg, dim, vocab_size)
    optimizer = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        hist_fh = open(out / "history.jsonl", "w")
    history, steps = [], []
    best_key, best_state, best_epoch, bad = None, None, 0, 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            lr_a, lr_r = cfg.lr_at(epoch)
            optimizer.param_groups[0]["lr"] = lr_a
            optimizer.param_groups[1]["lr"] = lr_r
            order = rng.permutation(len(train))
            epoch_steps = [train_step(model, optimizer, train[int(i)], cfg, out) for i in order]
            if keep_steps:
                steps.extend(epoch_steps)
            record = {"epoch": epoch, "lr_adapt": lr_a, "lr_rest": lr_r, "train": _mean_breakdown(epoch_steps)}
            if val:
                if selection_metric is not None:
                    key = selection_metric(model, epoch)
                    record["val"] = {"selection": key}
                else:
                    model.eval()
                    with torch.no_grad(), training_guard(allow_target_inputs=not cfg.source_only):
                        val_bd = [compute_losses(model, p, cfg)[1] for p in val]
                        report, _ = evaluate_view(model, val, "source")
                    val_loss = float(np.mean([b.L_total for b in val_bd]))
                    record["val"] = {"source_SODA_tIoU": report.SODA_tIoU, "source_dvc_C": report.dvc_C, "L_total": val_loss}
                    key = (report.SODA_tIoU, -val_loss)
            else:
                key = (0.0, -record["train"]["L_total"])
            if epoch <= cfg.select_after:
                improved = False
            else:
                improved = best_key is None or key > best_key
            if improved:
                best_key, best_epoch, bad = key, epoch, 0
                best_state = model.block_state()
            elif epoch > cfg.select_after:
                bad += 1
            record["best_epoch"] = best_epoch
            history.append(record)
            if out is not None:
                hist_fh.write(json.dumps(record, sort_keys=True) + "\n")
                hist_fh.flush()
            log.info("epoch %d L_total=%.4f val=%s", epoch, record["train"]["L_total"], record.get("val"))
            if bad >= cfg.patience:
                break
    finally:
        if out is not None:
            hist_fh.close()
    model.load_block_state(best_state)
    model.eval()
    ckpt = make_checkpoint(model, cfg, vocab, best_epoch, checkpoint_extra)
    if out is not None:
        save_checkpoint(ckpt, out / "checkpoint.pt")
    return FitResult(ckpt, history, model, steps)


def fit_source_only(cfg: TrainConfig, train, val=(), **kw) -> FitResult:
    """Same pipeline with every adaptation term off and target inputs forbidden."""
    cfg = copy.deepcopy(cfg)
    cfg.source_only = True
    cfg.salm_frame = cfg.salm_gaze = cfg.gccm_A = cfg.gccm_P = False
    return fit(cfg, train, val, **kw)


# ---------------------------------------------------------------------------
# Diagnostics


DISTANCE_COLUMNS = ("pair", "raw", "converted", "calibrated")


@torch.no_grad()
def representation_distances(model: GCEAN, dataset: Sequence[PairedSample]) -> list[dict]:
    """Source/target centroid distances per pair, plus a trailing ``mean`` row.

    raw: input frame features; converted: frame converter output;
    calibrated: last calibration level.
    """
    model.eval()
    rows = []
    for pair in dataset:
        s, t = _tensor(pair.source_frames), _tensor(pair.target_frames)
        es, et = model.encode(s), model.encode(t)
        rows.append({
            "pair": pair.index,
            "raw": float(torch.linalg.norm(s.mean(0) - t.mean(0))),
            "converted": float(torch.linalg.norm(es.converted.mean(0) - et.converted.mean(0))),
            "calibrated": float(torch.linalg.norm(es.stack.levels[-1].prototype - et.stack.levels[-1].prototype)),
        })
    if rows:
        rows.append({"pair": "mean", **{k: float(np.mean([r[k] for r in rows])) for k in DISTANCE_COLUMNS[1:]}})
    return rows


def representation_distance_report(model: GCEAN, dataset: Sequence[PairedSample], path: str | os.PathLike) -> list[dict]:
    rows = representation_distances(model, dataset)
    write_csv(path, rows, DISTANCE_COLUMNS)
    return rows


@torch.no_grad()
def attention_entropy_rows(model: GCEAN, dataset: Sequence[PairedSample], views=("source", "target")) -> list[dict]:
    model.eval()
    rows = []
    for pair in dataset:
        for view in views:
            frames = pair.source_frames if view == "source" else pair.target_frames
            stack = model.encode(_tensor(frames)).stack
            for level, (h, L) in enumerate(zip(attention_entropy(stack), stack.lengths), start=1):
                rows.append({"pair": pair.index, "view": view, "level": level, "length": L,
                             "entropy": h, "max_entropy": math.log(L)})
    return rows


def write_csv(path: str | os.PathLike, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
