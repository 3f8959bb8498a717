"""Command-line entry point: ``gcean {gen-data,train,eval,predict,inspect}``.

Exit codes: 0 success, 1 I/O failure, 2 bad flags or configuration (including
a missing checkpoint), 3 training aborted on a non-finite loss, 4 the requested
split/view carries no annotations.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .data import FeatureFileError, ManifestError, MissingStreamError, load_paired_dataset, load_vocab
from .synthgen import GeneratorConfig, generate_benchmark, split_manifest
from .trainer import (
    ABLATIONS,
    DISTANCE_COLUMNS,
    NonFiniteLoss,
    TrainConfig,
    attention_entropy_rows,
    evaluate_view,
    fit,
    fit_source_only,
    load_checkpoint,
    predict_pair,
    representation_distance_report,
    write_csv,
)

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NONFINITE, EXIT_NO_ANNOTATIONS = 0, 1, 2, 3, 4
SEED_ENV = "GCEAN_SEED"
RUN_MANIFEST = "run.json"

log = logging.getLogger("gcean")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Run manifest


def _hash_inputs(paths: Sequence[str | os.PathLike | None]) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        h.update(str(p.name).encode())
        if p.is_file():
            h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_path: str | None
    seed: int | None
    out_dir: str
    input_hash: str
    version: str = __version__
    started: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    finished: str | None = None
    exit_code: int | None = None

    def write(self) -> None:
        path = Path(self.out_dir) / RUN_MANIFEST
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))


def _start_run(args, command: str, seed: int | None, inputs: Sequence) -> RunManifest:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}", EXIT_IO) from exc
    run = RunManifest(command, list(args.argv), getattr(args, "config", None), seed, str(out), _hash_inputs(inputs))
    run.write()
    return run


# ---------------------------------------------------------------------------
# Helpers


def _resolve_seed(flag: int | None, config_value: int | None = None, default: int = 0) -> int:
    """flags > config > GCEAN_SEED > default."""
    if flag is not None:
        return flag
    if config_value is not None:
        return int(config_value)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise CliError(f"{SEED_ENV}={env!r} is not an integer", EXIT_CONFIG) from exc
    return default


def _read_json(path: str, what: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CliError(f"{what} not found: {path}", EXIT_CONFIG) from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} is not valid JSON: {exc}", EXIT_CONFIG) from exc
    if not isinstance(raw, dict):
        raise CliError(f"{what} must be a JSON object", EXIT_CONFIG)
    return raw


def _checkpoint_path(ckpt: str) -> Path:
    p = Path(ckpt)
    if p.is_dir():
        p = p / "checkpoint.pt"
    if not p.is_file():
        raise CliError(f"checkpoint not found: {ckpt}", EXIT_CONFIG)
    return p


def _load_model(ckpt: str):
    path = _checkpoint_path(ckpt)
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, RuntimeError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_CONFIG) from exc


def _dataset_for(args, ckpt: dict, include_target: bool = True):
    manifest = args.data or ckpt.get("data_manifest")
    if manifest is None:
        raise CliError("no --data given and the checkpoint does not record a manifest", EXIT_CONFIG)
    try:
        path = split_manifest(manifest, args.split)
    except KeyError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    except FileNotFoundError as exc:
        raise CliError(f"manifest not found: {manifest}", EXIT_IO) from exc
    return path, load_paired_dataset(path, ckpt["data"]["L"], include_target=include_target)


def _figures(args) -> bool:
    return not getattr(args, "no_figures", False)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    raw = _read_json(args.config, "generator config")
    seed = _resolve_seed(args.seed, raw.pop("seed", None))
    try:
        cfg = GeneratorConfig(**{k: v for k, v in raw.items()})
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid generator config: {exc}", EXIT_CONFIG) from exc
    run = _start_run(args, "gen-data", seed, [args.config])
    manifest = generate_benchmark(cfg, seed, args.out)
    _finish(run)
    print(manifest)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    raw = _read_json(args.config, "train config") if args.config else {}
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    raw["seed"] = _resolve_seed(args.seed, raw.get("seed"))
    try:
        cfg = TrainConfig.from_dict(raw)
        return cfg.ablate(args.ablate or [])
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid train config: {exc}", EXIT_CONFIG) from exc


def cmd_train(args) -> int:
    if args.direction != "src2tgt":
        raise CliError(f"unsupported direction {args.direction!r}", EXIT_CONFIG)
    if args.source_only and args.ablate:
        raise CliError("--source-only already disables every adaptation term; drop --ablate", EXIT_CONFIG)
    cfg = _train_config(args)
    run = _start_run(args, "train", cfg.seed, [args.config, args.data])
    include_target = not args.source_only
    train = load_paired_dataset(args.data, cfg.L, include_target=include_target)
    try:
        val_path = split_manifest(args.data, "val")
        val = load_paired_dataset(val_path, cfg.L, include_target=include_target) if val_path != Path(args.data) else []
    except KeyError:
        val = []
    vocab = load_vocab(args.data)
    extra = {"data_manifest": str(Path(args.data).resolve())}
    runner = fit_source_only if args.source_only else fit
    result = runner(cfg, train, val, vocab=vocab, out_dir=args.out, checkpoint_extra=extra)
    if _figures(args):
        from .plotting import plot_history

        plot_history(result.history, Path(args.out) / "history.png")
    _finish(run)
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; selected epoch {last['best_epoch']}; "
          f"checkpoint {Path(args.out) / 'checkpoint.pt'}")
    return EXIT_OK


def _predict_files(model, dataset, view: str, out: Path, vocab) -> list[dict]:
    pred_dir = out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for pair in dataset:
        events = predict_pair(model, pair, view)
        if vocab:
            for ev in events:
                ev["caption"] = " ".join(vocab[t] for t in ev["tokens"])
        entry = {"pair_index": pair.index, "view": view, "events": events}
        (pred_dir / f"{pair.index:05d}_{view}.json").write_text(json.dumps(entry, indent=1, sort_keys=True))
        files.append(entry)
    return files


def cmd_eval(args) -> int:
    model, ckpt = _load_model(args.ckpt)
    run = _start_run(args, "eval", ckpt.get("seed"), [_checkpoint_path(args.ckpt)])
    path, dataset = _dataset_for(args, ckpt)
    if args.view == "target" and not all(p.has_target_events for p in dataset):
        raise CliError(f"split {args.split!r} has no target-view annotations ({path})", EXIT_NO_ANNOTATIONS)
    if not dataset:
        raise CliError(f"split {args.split!r} is empty", EXIT_NO_ANNOTATIONS)
    out = Path(args.out)
    report, _ = evaluate_view(model, dataset, args.view)
    _predict_files(model, dataset, args.view, out, ckpt["data"].get("vocab"))
    rep = report.to_dict()
    rep.update({"split": args.split, "view": args.view, "manifest": str(path)})
    (out / "report.json").write_text(json.dumps(rep, indent=1, sort_keys=True))
    row = {"split": args.split, "view": args.view, **report.summary_row()}
    write_csv(out / "report.csv", [row], list(row))
    write_csv(out / "report_per_sample.csv", report.per_sample, list(report.per_sample[0]))
    if _figures(args):
        from .plotting import plot_report

        plot_report(rep, out / "report.png")
    _finish(run)
    print(f"{args.split}/{args.view}: B4={report.dvc_B4:.4f} C={report.dvc_C:.4f} "
          f"SODA_C={report.SODA_C:.4f} SODA_tIoU={report.SODA_tIoU:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, ckpt = _load_model(args.ckpt)
    run = _start_run(args, "predict", ckpt.get("seed"), [_checkpoint_path(args.ckpt)])
    _, dataset = _dataset_for(args, ckpt, include_target=args.view == "target")
    files = _predict_files(model, dataset, args.view, Path(args.out), ckpt["data"].get("vocab"))
    _finish(run)
    print(f"wrote {len(files)} prediction files to {Path(args.out) / 'predictions'}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, ckpt = _load_model(args.ckpt)
    run = _start_run(args, "inspect", ckpt.get("seed"), [_checkpoint_path(args.ckpt)])
    out = Path(args.out)
    counts = model.parameter_counts()
    write_csv(out / "parameters.csv", [{"block": k, "parameters": v} for k, v in counts.items()], ["block", "parameters"])
    _, dataset = _dataset_for(args, ckpt)
    distances = representation_distance_report(model, dataset, out / "distances.csv")
    entropy = attention_entropy_rows(model, dataset)
    write_csv(out / "attention_entropy.csv", entropy, ["pair", "view", "level", "length", "entropy", "max_entropy"])
    if _figures(args):
        from .plotting import plot_distances, plot_entropy, plot_parameter_counts

        plot_distances(distances, out / "distances.png")
        plot_entropy(entropy, out / "attention_entropy.png")
        plot_parameter_counts(counts, out / "parameters.png")
    _finish(run)
    for name, n in counts.items():
        print(f"{name:24s} {n}")
    mean = distances[-1]
    print("mean distance " + " ".join(f"{k}={mean[k]:.4f}" for k in DISTANCE_COLUMNS[1:]))
    return EXIT_OK


def _finish(run: RunManifest, code: int = EXIT_OK) -> None:
    run.finished = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    run.exit_code = code
    run.write()


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcean", description="Gaze-guided cross-view dense captioning toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic paired-view benchmark")
    g.add_argument("--config", required=True, help="generator config JSON")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the full model, an ablation, or the source-only baseline")
    t.add_argument("--data", required=True, help="train manifest (manifest.json of a generated benchmark)")
    t.add_argument("--config", help="train config JSON")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--source-only", action="store_true")
    t.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), help="repeatable")
    t.add_argument("--direction", default="src2tgt", choices=["src2tgt"], help="adaptation direction as generated")
    t.add_argument("--no-figures", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "predict and score a split"),
                               ("predict", cmd_predict, "predict without scoring")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--ckpt", required=True, help="checkpoint file or training output directory")
        e.add_argument("--split", default="test")
        e.add_argument("--view", default="target", choices=["source", "target"])
        e.add_argument("--data", help="benchmark manifest; defaults to the one recorded in the checkpoint")
        e.add_argument("--out", required=True)
        if name == "eval":
            e.add_argument("--no-figures", action="store_true")
        e.set_defaults(func=fn)

    i = sub.add_parser("inspect", help="distance, attention-entropy and parameter-count diagnostics")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--split", default="val")
    i.add_argument("--data")
    i.add_argument("--out", required=True)
    i.add_argument("--no-figures", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NonFiniteLoss as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (FeatureFileError, MissingStreamError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ManifestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
