"""Deterministic synthetic paired-view benchmark.

Each pair is one procedural script rendered twice, once per view. Views
differ by a mixing matrix, a constant style offset and independently
jittered step durations. Distractor bursts (irrelevant objects) are added
to the frame stream only; the gaze stream never sees them.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import EventAnnotation, FeatureSequence, write_feature_sequence

DEFAULT_VERBS = [
    "take", "put", "open", "close", "cut", "pour",
    "wash", "stir", "press", "insert", "fold", "place",
]
DEFAULT_OBJECTS = [
    "cup", "knife", "bowl", "lid", "key", "door", "bottle", "box",
    "laptop", "towel", "spoon", "pan", "drawer", "paper", "plate",
]
DEFAULT_PREPS = ["into", "onto", "with", "from", "under", "beside", "inside", "behind"]
FUNCTION_WORDS = ["the", "a", "and"]

VIEW_NAMES = ("source", "target")


@dataclass
class Catalogs:
    verbs: list[str] = field(default_factory=lambda: list(DEFAULT_VERBS))
    objects: list[str] = field(default_factory=lambda: list(DEFAULT_OBJECTS))
    preps: list[str] = field(default_factory=lambda: list(DEFAULT_PREPS))

    def __post_init__(self):
        if not self.verbs or not self.objects or not self.preps:
            raise ValueError("catalogs must be non-empty")

    @property
    def vocab(self) -> list[str]:
        return FUNCTION_WORDS + self.preps + self.verbs + self.objects

    def verb_token(self, v: int) -> int:
        return len(FUNCTION_WORDS) + len(self.preps) + v

    def object_token(self, o: int) -> int:
        return len(FUNCTION_WORDS) + len(self.preps) + len(self.verbs) + o

    def prep_for(self, v: int) -> int:
        return v % len(self.preps)

    def caption_tokens(self, verb: int, obj: int, obj2: int | None) -> list[int]:
        the = FUNCTION_WORDS.index("the")
        tokens = [self.verb_token(verb), the, self.object_token(obj)]
        if obj2 is not None:
            tokens += [len(FUNCTION_WORDS) + self.prep_for(verb), the, self.object_token(obj2)]
        return tokens

    def parse_caption(self, tokens: Sequence[int]) -> tuple[int, int, int | None] | None:
        """Inverse of :meth:`caption_tokens`; None when not a template instance."""
        nf, np_, nv = len(FUNCTION_WORDS), len(self.preps), len(self.verbs)
        the = FUNCTION_WORDS.index("the")
        tokens = list(tokens)
        if len(tokens) not in (3, 6) or tokens[1] != the:
            return None
        v = tokens[0] - nf - np_
        o = tokens[2] - nf - np_ - nv
        if not (0 <= v < nv and 0 <= o < len(self.objects)):
            return None
        if len(tokens) == 3:
            return v, o, None
        if tokens[4] != the or tokens[3] != nf + self.prep_for(v):
            return None
        o2 = tokens[5] - nf - np_ - nv
        if not 0 <= o2 < len(self.objects):
            return None
        return v, o, o2


@dataclass
class GeneratorConfig:
    splits: dict = field(default_factory=lambda: {"train": 64, "val": 32, "test": 64})
    n_steps: tuple[int, int] = (3, 6)
    L: int = 64
    C: int = 32
    C_latent: int = 16
    catalogs: Catalogs = field(default_factory=Catalogs)
    jitter: float = 0.4
    distractor_rate: float = 4.0
    distractor_strength: float = 1.0
    noise_sigma: float = 0.05
    fps: float = 2.0
    step_duration: tuple[float, float] = (3.0, 8.0)
    second_object_prob: float = 0.3
    style_offset: float = 1.0
    mixing_shift: float = 0.3

    def __post_init__(self):
        if isinstance(self.catalogs, dict):
            self.catalogs = Catalogs(**self.catalogs)
        self.n_steps = tuple(int(x) for x in self.n_steps)
        self.step_duration = tuple(float(x) for x in self.step_duration)
        if not 1 <= self.n_steps[0] <= self.n_steps[1]:
            raise ValueError(f"invalid n_steps range {self.n_steps}")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must lie in [0, 1)")
        if self.C_latent > self.C:
            raise ValueError("C_latent must not exceed C")
        if self.noise_sigma < 0 or self.distractor_strength < 0 or self.distractor_rate < 0:
            raise ValueError("noise and distractor parameters must be non-negative")
        for name, n in self.splits.items():
            if int(n) < 0:
                raise ValueError(f"split {name} has negative size")

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "GeneratorConfig":
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator config fields: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_steps"] = list(self.n_steps)
        d["step_duration"] = list(self.step_duration)
        return d


@dataclass
class World:
    """Catalog embeddings shared by every script of a benchmark."""

    verb_emb: np.ndarray
    obj_emb: np.ndarray

    @classmethod
    def create(cls, catalogs: Catalogs, c_latent: int, seed: int) -> "World":
        rng = np.random.default_rng(derive_seed(seed, "world"))
        return cls(
            rng.standard_normal((len(catalogs.verbs), c_latent)),
            rng.standard_normal((len(catalogs.objects), c_latent)),
        )


@dataclass
class ActivityScript:
    steps: list[tuple[int, int, int | None]]
    latents: np.ndarray  # n_steps x C_latent, unit rows
    base_durations: np.ndarray


@dataclass
class ViewParams:
    mixing: np.ndarray  # C x C_latent, orthonormal columns
    offset: np.ndarray
    noise_sigma: float = 0.05
    jitter: float = 0.4
    distractor_rate: float = 4.0
    distractor_strength: float = 1.0

    def __post_init__(self):
        if np.linalg.matrix_rank(self.mixing) < self.mixing.shape[1]:
            raise ValueError("mixing matrix must have full column rank")
        if self.noise_sigma < 0 or not 0 <= self.jitter < 1:
            raise ValueError("invalid noise or jitter")


@dataclass
class RenderedView:
    frames: FeatureSequence
    gaze: FeatureSequence
    events: list[EventAnnotation]
    distractor_mask: np.ndarray  # per-row bool
    distractor: np.ndarray  # additive frame-only component
    step_of_row: np.ndarray


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def random_orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def sample_script(
    seed: int,
    n_steps: int,
    catalogs: Catalogs | None = None,
    world: World | None = None,
    c_latent: int = 16,
    second_object_prob: float = 0.3,
    step_duration: tuple[float, float] = (3.0, 8.0),
) -> ActivityScript:
    catalogs = catalogs or Catalogs()
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    world = world or World.create(catalogs, c_latent, 0)
    rng = np.random.default_rng(derive_seed(seed, "script"))
    steps = []
    latents = []
    for _ in range(n_steps):
        v = int(rng.integers(len(catalogs.verbs)))
        o = int(rng.integers(len(catalogs.objects)))
        o2 = None
        if len(catalogs.objects) > 1 and rng.random() < second_object_prob:
            o2 = int(rng.choice([k for k in range(len(catalogs.objects)) if k != o]))
        z = world.verb_emb[v] + world.obj_emb[o]
        if o2 is not None:
            z = z + 0.5 * world.obj_emb[o2]
        z = z + 0.05 * rng.standard_normal(z.shape)
        steps.append((v, o, o2))
        latents.append(z / np.linalg.norm(z))
    durations = rng.uniform(step_duration[0], step_duration[1], size=n_steps)
    return ActivityScript(steps, np.asarray(latents), durations)


def make_view_params(cfg: GeneratorConfig, seed: int) -> dict[str, ViewParams]:
    rng = np.random.default_rng(derive_seed(seed, "views"))
    base = rng.standard_normal((cfg.C, cfg.C_latent))
    views = {}
    for name in VIEW_NAMES:
        vr = np.random.default_rng(derive_seed(seed, "view", name))
        mixed = base + cfg.mixing_shift * vr.standard_normal(base.shape)
        q, r = np.linalg.qr(mixed)
        mixing = q * np.sign(np.diag(r))
        offset = vr.standard_normal(cfg.C)
        offset *= cfg.style_offset / np.linalg.norm(offset)
        views[name] = ViewParams(
            mixing, offset, cfg.noise_sigma, cfg.jitter, cfg.distractor_rate, cfg.distractor_strength
        )
    return views


def render_view(
    script: ActivityScript,
    vp: ViewParams,
    seed: int,
    fps: float,
    catalogs: Catalogs | None = None,
    world: World | None = None,
) -> RenderedView:
    catalogs = catalogs or Catalogs()
    rng = np.random.default_rng(derive_seed(seed, "render"))
    n = len(script.steps)
    factors = rng.uniform(1 - vp.jitter, 1 + vp.jitter, size=n) if vp.jitter > 0 else np.ones(n)
    durations = script.base_durations * factors
    bounds = np.concatenate([[0.0], np.cumsum(durations)])
    total = float(bounds[-1])
    n_rows = max(int(round(total * fps)), 1)
    t = (np.arange(n_rows) + 0.5) / fps
    step_of_row = np.clip(np.searchsorted(bounds, t, side="right") - 1, 0, n - 1)

    clean = script.latents[step_of_row] @ vp.mixing.T
    C = clean.shape[1]
    distractor = np.zeros_like(clean)
    mask = np.zeros(n_rows, dtype=bool)
    n_bursts = rng.poisson(vp.distractor_rate * total / 60.0) if vp.distractor_rate > 0 else 0
    for _ in range(n_bursts):
        start = rng.uniform(0, total)
        length = rng.uniform(1.0, 3.0)
        if world is not None:
            z = world.obj_emb[int(rng.integers(world.obj_emb.shape[0]))]
        else:
            z = rng.standard_normal(vp.mixing.shape[1])
        direction = vp.mixing @ (z / np.linalg.norm(z))
        rows = (t >= start) & (t < start + length)
        distractor[rows] += vp.distractor_strength * direction
        mask |= rows
    frame_noise = rng.standard_normal((n_rows, C)) * vp.noise_sigma
    gaze_noise = rng.standard_normal((n_rows, C)) * vp.noise_sigma
    frames = clean + vp.offset + distractor + frame_noise
    gaze = clean + gaze_noise

    events = []
    for k, (v, o, o2) in enumerate(script.steps):
        events.append(
            EventAnnotation(float(bounds[k]), float(bounds[k + 1]), catalogs.caption_tokens(v, o, o2))
        )
    return RenderedView(
        FeatureSequence(frames.astype(np.float32), fps, total, "frame"),
        FeatureSequence(gaze.astype(np.float32), fps, total, "gaze"),
        events,
        mask,
        distractor,
        step_of_row,
    )


def _event_json(ev: EventAnnotation) -> dict:
    return {"t_start": ev.t_start, "t_end": ev.t_end, "tokens": list(ev.tokens)}


def generate_benchmark(cfg: GeneratorConfig, seed: int, out_dir: str | os.PathLike) -> Path:
    """Write feature files plus one manifest per split; returns the train manifest.

    Split manifests are ``<split>.json``; ``manifest.json`` is an alias of
    the train split. Target-view events are only written for non-train splits.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "features").mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    catalogs = cfg.catalogs
    world = World.create(catalogs, cfg.C_latent, seed)
    views = make_view_params(cfg, seed)
    vocab = catalogs.vocab
    manifests = {}
    index = 0
    for split in sorted(cfg.splits):
        pairs = []
        for _ in range(int(cfg.splits[split])):
            n_rng = np.random.default_rng(derive_seed(seed, index, "n_steps"))
            n_steps = int(n_rng.integers(cfg.n_steps[0], cfg.n_steps[1] + 1))
            script = sample_script(
                derive_seed(seed, index), n_steps, catalogs, world, cfg.C_latent,
                cfg.second_object_prob, cfg.step_duration,
            )
            entry = {"index": index}
            for view in VIEW_NAMES:
                r = render_view(script, views[view], derive_seed(seed, index, view), cfg.fps, catalogs, world)
                frames_rel = f"features/{index:05d}_{view}_frames.gcf"
                gaze_rel = f"features/{index:05d}_{view}_gaze.gcf"
                write_feature_sequence(out / frames_rel, r.frames)
                write_feature_sequence(out / gaze_rel, r.gaze)
                spec = {"frames": frames_rel, "gaze": gaze_rel}
                if view == "source" or split != "train":
                    spec["events"] = [_event_json(e) for e in r.events]
                if view == "target" and split != "train":
                    spec["evaluation_only"] = True
                entry[view] = spec
            pairs.append(entry)
            index += 1
        manifests[split] = {"version": 1, "split": split, "vocab": vocab, "pairs": pairs}
    for split, m in manifests.items():
        (out / f"{split}.json").write_text(json.dumps(m, indent=1, sort_keys=True))
    main_split = "train" if "train" in manifests else sorted(manifests)[0]
    alias = dict(manifests[main_split])
    alias["splits"] = {s: f"{s}.json" for s in sorted(manifests)}
    (out / "manifest.json").write_text(json.dumps(alias, indent=1, sort_keys=True))
    (out / "generator_config.json").write_text(
        json.dumps({"seed": seed, **cfg.to_dict()}, indent=1, sort_keys=True)
    )
    return out / "manifest.json"


def split_manifest(manifest_path: str | os.PathLike, split: str) -> Path:
    """Locate the manifest of ``split`` next to a benchmark's main manifest."""
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text())
    splits = m.get("splits", {})
    if split in splits:
        return manifest_path.parent / splits[split]
    if m.get("split") == split or split is None:
        return manifest_path
    raise KeyError(f"split {split!r} not found next to {manifest_path}")
