"""Parallel segment-and-caption head over the calibrated feature pyramid.

A small set-prediction decoder: learnable event queries cross-attend to the
flattened pyramid, each query emits a (center, half-width) segment, a
confidence and a caption from a one-layer GRU; a count head picks how many
events to keep at inference.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .data import EventAnnotation


@dataclass
class HeadConfig:
    n_queries: int = 10
    n_max: int = 8
    t_cap: int = 12
    n_layers: int = 2
    n_heads: int = 4
    w_iou: float = 2.0
    w_l1: float = 5.0
    w_conf: float = 1.0
    w_cap: float = 1.0
    w_cnt: float = 0.5


@dataclass
class HeadOutput:
    center: torch.Tensor  # N_q
    half_width: torch.Tensor  # N_q
    confidence: torch.Tensor  # N_q
    count_logits: torch.Tensor  # N_max
    query_features: torch.Tensor  # N_q x C

    @property
    def predicted_count(self) -> int:
        return int(self.count_logits.argmax()) + 1


@dataclass
class EventPrediction:
    center: float
    half_width: float
    confidence: float
    caption_logits: np.ndarray | None = None
    decoded_tokens: list[int] = field(default_factory=list)

    @property
    def segment(self) -> tuple[float, float]:
        return max(self.center - self.half_width, 0.0), min(self.center + self.half_width, 1.0)


@dataclass
class MatchResult:
    assignment: list[tuple[int, int]]  # (query, ground truth), sorted by ground truth
    total_cost: float


def _sinusoid(positions: torch.Tensor, dim: int) -> torch.Tensor:
    # positions live in [0, 1]; frequencies run geometrically from 0.5 to 16 cycles
    half = dim // 2
    freqs = 0.5 * torch.exp(math.log(32.0) * torch.arange(half, dtype=positions.dtype) / max(half - 1, 1))
    ang = positions[:, None] * freqs[None, :] * 2 * math.pi
    pe = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if pe.shape[-1] < dim:
        pe = F.pad(pe, (0, dim - pe.shape[-1]))
    return pe


class DVCHead(nn.Module):
    def __init__(self, dim: int, vocab_size: int, cfg: HeadConfig | None = None, n_levels: int = 4):
        super().__init__()
        cfg = cfg or HeadConfig()
        self.cfg = cfg
        self.dim = dim
        self.vocab_size = vocab_size
        self.eos = vocab_size
        self.bos = vocab_size + 1
        self.level_embed = nn.Parameter(torch.randn(n_levels, dim) * 0.02)
        self.query_embed = nn.Parameter(torch.randn(cfg.n_queries, dim) * 0.1)
        # evenly spread reference centres, stored as logits
        ref = (torch.arange(cfg.n_queries, dtype=torch.float32) + 0.5) / cfg.n_queries
        self.query_ref = nn.Parameter(torch.logit(ref))
        self.input_norm = nn.LayerNorm(dim)
        layer = nn.TransformerDecoderLayer(
            dim, cfg.n_heads, dim_feedforward=2 * dim, dropout=0.0, batch_first=True
        )
        self.decoder = nn.TransformerDecoder(layer, cfg.n_layers)
        self.seg_head = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, 2))
        self.conf_head = nn.Linear(dim, 1)
        self.count_head = nn.Linear(dim, cfg.n_max)
        self.tok_embed = nn.Embedding(vocab_size + 2, dim)
        self.cap_ctx = nn.Linear(2 * dim, dim)
        self.cap_init = nn.Linear(dim, dim)
        self.gru = nn.GRU(2 * dim, dim, batch_first=True)
        self.cap_out = nn.Linear(dim, vocab_size + 1)

    def memory(self, levels: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(levels) != self.level_embed.shape[0]:
            raise ValueError(f"expected {self.level_embed.shape[0]} levels, got {len(levels)}")
        parts = []
        for i, feats in enumerate(levels):
            if feats.shape[-1] != self.dim:
                raise ValueError(f"level {i} has {feats.shape[-1]} channels, head expects {self.dim}")
            L = feats.shape[-2]
            pos = (torch.arange(L, dtype=feats.dtype) + 0.5) / L
            parts.append(self.input_norm(feats) + self.level_embed[i] + _sinusoid(pos, self.dim))
        return torch.cat(parts, dim=0)

    def forward(self, levels: Sequence[torch.Tensor]) -> HeadOutput:
        mem = self.memory(levels)
        ref = torch.sigmoid(self.query_ref)
        tgt = self.query_embed + _sinusoid(ref, self.dim)
        q = self.decoder(tgt[None], mem[None])[0]
        seg = self.seg_head(q)
        center = torch.sigmoid(self.query_ref + seg[:, 0])
        half_width = torch.sigmoid(seg[:, 1])
        conf = torch.sigmoid(self.conf_head(q)).squeeze(-1)
        count_logits = self.count_head(q.max(dim=0).values)
        pooled = segment_pool(self.input_norm(levels[0]), center.detach(), half_width.detach())
        ctx = self.cap_ctx(torch.cat([q, pooled], dim=-1))
        return HeadOutput(center, half_width, conf, count_logits, ctx)

    def caption_logits(self, query_features: torch.Tensor, captions: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forced logits; returns (logits n x T x V+1, targets n x T with -100 padding)."""
        n = len(captions)
        T = max(len(c) for c in captions) + 1
        inputs = torch.full((n, T), self.eos, dtype=torch.long)
        targets = torch.full((n, T), -100, dtype=torch.long)
        for i, cap in enumerate(captions):
            inputs[i, 0] = self.bos
            inputs[i, 1:len(cap) + 1] = torch.as_tensor(cap, dtype=torch.long)
            targets[i, :len(cap)] = torch.as_tensor(cap, dtype=torch.long)
            targets[i, len(cap)] = self.eos
        ctx = query_features[:, None, :].expand(n, T, self.dim)
        h0 = torch.tanh(self.cap_init(query_features))[None]
        out, _ = self.gru(torch.cat([self.tok_embed(inputs), ctx], dim=-1), h0)
        return self.cap_out(out), targets

    @torch.no_grad()
    def greedy_decode(self, query_features: torch.Tensor) -> tuple[list[list[int]], torch.Tensor]:
        n = query_features.shape[0]
        h = torch.tanh(self.cap_init(query_features))[None]
        tok = torch.full((n,), self.bos, dtype=torch.long)
        done = torch.zeros(n, dtype=torch.bool)
        seqs: list[list[int]] = [[] for _ in range(n)]
        all_logits = []
        for step in range(self.cfg.t_cap):
            x = torch.cat([self.tok_embed(tok), query_features], dim=-1)[:, None]
            out, h = self.gru(x, h)
            logits = self.cap_out(out[:, 0])
            all_logits.append(logits)
            if step == 0:
                logits = logits.clone()
                logits[:, self.eos] = -float("inf")
            tok = logits.argmax(-1)
            for i in range(n):
                if done[i]:
                    continue
                if int(tok[i]) == self.eos:
                    done[i] = True
                else:
                    seqs[i].append(int(tok[i]))
            if bool(done.all()):
                break
        return seqs, torch.stack(all_logits, dim=1)


def segment_pool(feats: torch.Tensor, center: torch.Tensor, half_width: torch.Tensor) -> torch.Tensor:
    """Soft average of ``feats`` rows over each (center, half-width) window."""
    L = feats.shape[-2]
    pos = (torch.arange(L, dtype=feats.dtype) + 0.5) / L
    scale = half_width[:, None].clamp_min(0.5 / L)
    w = torch.exp(-0.5 * ((pos[None, :] - center[:, None]) / scale) ** 2)
    w = w / w.sum(-1, keepdim=True).clamp_min(1e-12)
    return w @ feats


# ---------------------------------------------------------------------------
# Matching and losses


def normalize_events(events: Sequence[EventAnnotation], duration: float) -> np.ndarray:
    """(start, end) pairs divided by ``duration``, clipped to [0, 1]."""
    seg = np.array([[e.t_start, e.t_end] for e in events], dtype=np.float64).reshape(-1, 2)
    return np.clip(seg / duration, 0.0, 1.0)


def _pred_bounds(center, half_width):
    lib = torch if isinstance(center, torch.Tensor) else np
    return lib.clip(center - half_width, 0.0, 1.0), lib.clip(center + half_width, 0.0, 1.0)


def segment_tiou(center, half_width, gt_start, gt_end):
    """Elementwise tIoU of predicted (center, half-width) segments against ground truth;
    works on numpy arrays and differentiable tensors alike."""
    lib = torch if isinstance(center, torch.Tensor) else np
    p0, p1 = _pred_bounds(center, half_width)
    inter = lib.clip(lib.minimum(p1, gt_end) - lib.maximum(p0, gt_start), 0.0, None)
    union = (p1 - p0) + (gt_end - gt_start) - inter
    return inter / lib.clip(union, 1e-12, None)


def match_cost_matrix(center, half_width, confidence, gt_segments, cfg: HeadConfig) -> np.ndarray:
    center = np.asarray(center, dtype=np.float64)[:, None]
    half = np.asarray(half_width, dtype=np.float64)[:, None]
    conf = np.asarray(confidence, dtype=np.float64)[:, None]
    gt = np.asarray(gt_segments, dtype=np.float64).reshape(-1, 2)
    g0, g1 = gt[None, :, 0], gt[None, :, 1]
    g_center = (g0 + g1) / 2
    g_half = (g1 - g0) / 2
    iou = segment_tiou(center, half, g0, g1)
    return (
        cfg.w_iou * (1 - iou)
        + cfg.w_l1 * (np.abs(center - g_center) + np.abs(half - g_half))
        + cfg.w_conf * (1 - conf)
    )


def hungarian_match(preds, gt_segments, cfg: HeadConfig | None = None) -> MatchResult:
    """Optimal injective assignment of ground truths to queries.

    ``preds`` is a list of :class:`EventPrediction` or a :class:`HeadOutput`.
    """
    cfg = cfg or HeadConfig()
    if isinstance(preds, HeadOutput):
        c = preds.center.detach().double().numpy()
        w = preds.half_width.detach().double().numpy()
        s = preds.confidence.detach().double().numpy()
    else:
        c = np.array([p.center for p in preds], dtype=np.float64)
        w = np.array([p.half_width for p in preds], dtype=np.float64)
        s = np.array([p.confidence for p in preds], dtype=np.float64)
    gt = np.asarray(gt_segments, dtype=np.float64).reshape(-1, 2)
    if len(c) < len(gt):
        raise ValueError(f"{len(c)} queries cannot cover {len(gt)} ground-truth events")
    cost = match_cost_matrix(c, w, s, gt, cfg)
    # keep matching defined so a diverged forward surfaces as a non-finite loss
    cost = np.nan_to_num(cost, nan=1e12, posinf=1e12, neginf=-1e12)
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols)
    assignment = [(int(rows[k]), int(cols[k])) for k in order]
    # summed in ground-truth order so totals are reproducible to the last bit
    total = 0.0
    for q, g in assignment:
        total += float(cost[q, g])
    return MatchResult(assignment, total)


def brute_force_match(cost: np.ndarray) -> float:
    """Minimum total cost over all injective maps ground truth -> query."""
    n_q, n_g = cost.shape
    best = math.inf
    for perm in itertools.permutations(range(n_q), n_g):
        total = 0.0
        for g, q in enumerate(perm):
            total += float(cost[q, g])
        best = min(best, total)
    return best


TASK_TERMS = ("seg_l1", "seg_iou", "conf", "caption", "count")


def task_loss(
    out: HeadOutput,
    match: MatchResult,
    gt_segments,
    captions: Sequence[Sequence[int]],
    cfg: HeadConfig,
    head: DVCHead | None = None,
    caption_logits: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted task loss on matched queries.

    Caption logits come either from ``head`` (teacher forcing on the matched
    query features) or are passed in directly with shape n_gt x T x V+1,
    last column per row being the end token.
    """
    gt = torch.as_tensor(np.asarray(gt_segments, dtype=np.float64).reshape(-1, 2), dtype=out.center.dtype)
    if len(match.assignment) != len(gt) or len(captions) != len(gt):
        raise ValueError("match, segments and captions disagree in length")
    q_idx = torch.tensor([q for q, _ in match.assignment], dtype=torch.long)
    g_idx = torch.tensor([g for _, g in match.assignment], dtype=torch.long)
    gt = gt[g_idx]
    c, w = out.center[q_idx], out.half_width[q_idx]
    g_center = (gt[:, 0] + gt[:, 1]) / 2
    g_half = (gt[:, 1] - gt[:, 0]) / 2
    seg_l1 = ((c - g_center).abs() + (w - g_half).abs()).mean()
    seg_iou = (1 - segment_tiou(c, w, gt[:, 0], gt[:, 1])).mean()

    target = torch.zeros_like(out.confidence)
    target[q_idx] = 1.0
    eps = 1e-7
    conf = out.confidence.clamp(eps, 1 - eps)
    conf_loss = -(target * conf.log() + (1 - target) * (1 - conf).log()).mean()

    caps = [list(captions[int(g)]) for g in g_idx]
    if caption_logits is None:
        if head is None:
            raise ValueError("need either the head or precomputed caption logits")
        logits, targets = head.caption_logits(out.query_features[q_idx], caps)
    else:
        logits = caption_logits[g_idx]
        eos = logits.shape[-1] - 1
        targets = torch.full(logits.shape[:2], -100, dtype=torch.long)
        for i, cap in enumerate(caps):
            targets[i, :len(cap)] = torch.as_tensor(cap, dtype=torch.long)
            if len(cap) < targets.shape[1]:
                targets[i, len(cap)] = eos
    cap_loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)

    n_max = out.count_logits.shape[-1]
    count_target = torch.tensor([min(len(gt), n_max) - 1])
    cnt_loss = F.cross_entropy(out.count_logits[None], count_target)

    parts = {"seg_l1": seg_l1, "seg_iou": seg_iou, "conf": conf_loss, "caption": cap_loss, "count": cnt_loss}
    weights = {"seg_l1": cfg.w_l1, "seg_iou": cfg.w_iou, "conf": cfg.w_conf, "caption": cfg.w_cap, "count": cfg.w_cnt}
    total = sum(weights[k] * v for k, v in parts.items())
    return total, parts


def to_predictions(head: DVCHead, out: HeadOutput) -> list[EventPrediction]:
    tokens, logits = head.greedy_decode(out.query_features)
    return [
        EventPrediction(
            float(out.center[i]), float(out.half_width[i]), float(out.confidence[i]),
            logits[i].numpy(), tokens[i],
        )
        for i in range(out.center.shape[0])
    ]


def select_events(preds: Sequence[EventPrediction], predicted_count: int, duration: float) -> list[tuple[int, EventAnnotation]]:
    """Keep the ``predicted_count`` most confident queries (lower index wins ties).

    Returns (query index, event in seconds) sorted by start time.
    """
    k = max(1, min(int(predicted_count), len(preds)))
    conf = np.array([p.confidence for p in preds])
    order = np.argsort(-conf, kind="stable")[:k]
    chosen = []
    for q in order:
        p = preds[int(q)]
        s, e = p.segment
        s, e = s * duration, e * duration
        if e <= s:
            e = min(duration, s + 1e-6)
            s = e - 1e-6
        tokens = p.decoded_tokens or [0]
        chosen.append((int(q), EventAnnotation(s, e, tokens)))
    chosen.sort(key=lambda item: (item[1].t_start, item[1].t_end, item[0]))
    return chosen
