"""Feature files, temporal resampling, gaze-crop geometry and paired datasets.

Feature files are little-endian: ``b"GCF1"``, uint32 L, uint32 C,
float32 fps, float32 duration_s, then L*C float32 values in time-major order.
"""

from __future__ import annotations

import contextlib
import json
import math
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"GCF1"
_HEADER = struct.Struct("<4sIIff")
STREAMS = ("frame", "gaze")


class FeatureFileError(Exception):
    """Base class for feature-file problems."""


class MissingFeatureFile(FeatureFileError, FileNotFoundError):
    pass


class FeatureSizeMismatch(FeatureFileError):
    pass


class NonFiniteFeatures(FeatureFileError):
    pass


class ManifestError(Exception):
    pass


class MissingStreamError(ManifestError):
    def __init__(self, pair_index: int, path: str):
        super().__init__(f"pair {pair_index}: missing stream file {path}")
        self.pair_index = pair_index
        self.path = path


class DimensionMismatch(ManifestError):
    pass


class UnsupervisedContractError(RuntimeError):
    """Raised when training code touches data it must never see."""


@dataclass
class FeatureSequence:
    values: np.ndarray
    fps: float
    duration_s: float
    stream: str = "frame"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError(f"feature values must be L x C with L, C >= 1, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise NonFiniteFeatures("feature values contain NaN or Inf")
        if not self.fps > 0 or not self.duration_s > 0:
            raise ValueError("fps and duration_s must be positive")
        if self.stream not in STREAMS:
            raise ValueError(f"unknown stream {self.stream!r}")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class EventAnnotation:
    t_start: float
    t_end: float
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not (0 <= self.t_start < self.t_end):
            raise ValueError(f"invalid event span [{self.t_start}, {self.t_end}]")
        if len(self.tokens) < 1:
            raise ValueError("event caption must contain at least one token")

    def validate(self, duration: float, vocab_size: int) -> None:
        # durations round-trip through float32 headers
        if self.t_end > duration * (1 + 1e-6) + 1e-6:
            raise ValueError(f"event ends at {self.t_end} beyond duration {duration}")
        if any(t < 0 or t >= vocab_size for t in self.tokens):
            raise ValueError("token index outside vocabulary")


@dataclass(frozen=True)
class Rect:
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


# ---------------------------------------------------------------------------
# Unsupervised-contract guard

_guard = threading.local()


@contextlib.contextmanager
def training_guard(allow_target_inputs: bool = True) -> Iterator[None]:
    """Forbid reads of target annotations (and optionally target inputs).

    Every training code path runs inside this context.
    """
    prev = getattr(_guard, "state", None)
    _guard.state = {"allow_target_inputs": allow_target_inputs}
    try:
        yield
    finally:
        _guard.state = prev


def _guard_state():
    return getattr(_guard, "state", None)


@dataclass
class PairedSample:
    """One weakly-paired source/target video pair.

    Target annotations are evaluation-only; reading them inside
    :func:`training_guard` raises :class:`UnsupervisedContractError`.
    """

    index: int
    source_frames: FeatureSequence
    source_gaze: FeatureSequence
    source_events: list[EventAnnotation]
    _target_frames: FeatureSequence | None = field(default=None, repr=False)
    _target_gaze: FeatureSequence | None = field(default=None, repr=False)
    _target_events: list[EventAnnotation] | None = field(default=None, repr=False)

    def __post_init__(self):
        dims = {self.source_frames.dim, self.source_gaze.dim}
        lengths = {self.source_frames.length, self.source_gaze.length}
        for seq in (self._target_frames, self._target_gaze):
            if seq is not None:
                dims.add(seq.dim)
                lengths.add(seq.length)
        if len(dims) != 1:
            raise DimensionMismatch(f"pair {self.index}: feature dimensions differ {sorted(dims)}")
        if len(lengths) != 1:
            raise DimensionMismatch(f"pair {self.index}: sequence lengths differ {sorted(lengths)}")

    def _check_target_input(self):
        state = _guard_state()
        if state is not None and not state["allow_target_inputs"]:
            raise UnsupervisedContractError(
                f"pair {self.index}: target-view inputs read in a source-only training path"
            )

    @property
    def has_target(self) -> bool:
        return self._target_frames is not None

    @property
    def target_frames(self) -> FeatureSequence:
        self._check_target_input()
        if self._target_frames is None:
            raise ManifestError(f"pair {self.index}: target view not loaded")
        return self._target_frames

    @property
    def target_gaze(self) -> FeatureSequence:
        self._check_target_input()
        if self._target_gaze is None:
            raise ManifestError(f"pair {self.index}: target view not loaded")
        return self._target_gaze

    @property
    def has_target_events(self) -> bool:
        return self._target_events is not None

    @property
    def target_events(self) -> list[EventAnnotation] | None:
        if _guard_state() is not None:
            raise UnsupervisedContractError(
                f"pair {self.index}: target-view annotations are evaluation-only"
            )
        return self._target_events

    @property
    def length(self) -> int:
        return self.source_frames.length

    @property
    def dim(self) -> int:
        return self.source_frames.dim

    def view(self, name: str) -> tuple[FeatureSequence, FeatureSequence, list[EventAnnotation] | None]:
        """Return (frames, gaze, events) for ``"source"`` or ``"target"``."""
        if name == "source":
            return self.source_frames, self.source_gaze, self.source_events
        if name == "target":
            return self.target_frames, self.target_gaze, self.target_events
        raise ValueError(f"unknown view {name!r}")


# ---------------------------------------------------------------------------
# Feature files


def write_feature_sequence(path: str | os.PathLike, seq: FeatureSequence) -> None:
    values = np.ascontiguousarray(seq.values, dtype="<f4")
    L, C = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, L, C, seq.fps, seq.duration_s))
        fh.write(values.tobytes(order="C"))


def load_feature_sequence(path: str | os.PathLike, stream: str = "frame") -> FeatureSequence:
    path = Path(path)
    if not path.is_file():
        raise MissingFeatureFile(f"feature file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureSizeMismatch(f"{path}: truncated header")
    magic, L, C, fps, duration = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * L * C:
        raise FeatureSizeMismatch(
            f"{path}: header says {L}x{C} = {L * C} values, payload holds {len(payload) / 4:g}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(L, C).astype(np.float32)
    if not np.isfinite(values).all():
        raise NonFiniteFeatures(f"{path}: payload contains NaN or Inf")
    return FeatureSequence(values, float(fps), float(duration), stream)


def interpolate_to_length(seq: FeatureSequence, length: int) -> FeatureSequence:
    """Piecewise-linear resampling with endpoints aligned."""
    if length < 1:
        raise ValueError(f"target length must be >= 1, got {length}")
    values = seq.values
    L_in = values.shape[0]
    if L_in == length:
        out = values.copy()
    elif L_in == 1:
        out = np.repeat(values, length, axis=0)
    else:
        pos = np.linspace(0.0, L_in - 1, length) if length > 1 else np.zeros(1)
        lo = np.floor(pos).astype(np.int64)
        lo = np.clip(lo, 0, L_in - 2)
        frac = (pos - lo)[:, None]
        a = values[lo].astype(np.float64)
        b = values[lo + 1].astype(np.float64)
        out = a + frac * (b - a)
        # exact hits keep the input sample verbatim
        exact = frac[:, 0] == 0.0
        out[exact] = a[exact]
        end = frac[:, 0] == 1.0
        out[end] = b[end]
        out = out.astype(np.float32)
        lo_b = values.min(axis=0)
        hi_b = values.max(axis=0)
        out = np.clip(out, lo_b, hi_b)
    fps = seq.fps * length / L_in
    return FeatureSequence(out, fps, seq.duration_s, seq.stream)


def gaze_crop_rect(gaze_x: float, gaze_y: float, width: int, height: int) -> Rect:
    """Square covering a quarter of the frame area, centred on the gaze point.

    At the borders the square is translated back inside the frame, never shrunk.
    """
    if width < 4 or height < 4:
        raise ValueError("frame must be at least 4x4 pixels")
    if not (0 <= gaze_x <= width and 0 <= gaze_y <= height):
        raise ValueError(f"gaze point ({gaze_x}, {gaze_y}) outside {width}x{height} frame")
    side = int(math.floor(0.5 * math.sqrt(width * height) + 0.5))
    if side > min(width, height):
        raise ValueError(f"crop side {side} does not fit a {width}x{height} frame")
    x0 = int(math.floor(gaze_x - side / 2 + 0.5))
    y0 = int(math.floor(gaze_y - side / 2 + 0.5))
    x0 = min(max(x0, 0), width - side)
    y0 = min(max(y0, 0), height - side)
    return Rect(x0, y0, x0 + side, y0 + side)


# ---------------------------------------------------------------------------
# Manifests


def _parse_events(raw, pair_index: int) -> list[EventAnnotation]:
    try:
        return [EventAnnotation(float(e["t_start"]), float(e["t_end"]), e["tokens"]) for e in raw]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"pair {pair_index}: malformed events ({exc})") from exc


def read_manifest(path: str | os.PathLike) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot parse manifest {path}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("version") != 1:
        raise ManifestError(f"{path}: expected a version-1 manifest object")
    if not isinstance(manifest.get("vocab"), list) or not isinstance(manifest.get("pairs"), list):
        raise ManifestError(f"{path}: manifest needs 'vocab' and 'pairs' lists")
    return manifest


def load_paired_dataset(
    manifest_path: str | os.PathLike,
    length: int,
    include_target: bool = True,
) -> list[PairedSample]:
    """Load every pair listed in a manifest, resampled to ``length`` rows.

    ``include_target=False`` never opens the target-view files.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent
    vocab_size = len(manifest["vocab"])
    samples = []
    for entry in manifest["pairs"]:
        try:
            idx = int(entry["index"])
            src = entry["source"]
            tgt = entry["target"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed pair entry: {exc}") from exc

        def load(spec: dict, key: str, stream: str) -> FeatureSequence:
            try:
                rel = spec[key]
            except (KeyError, TypeError) as exc:
                raise ManifestError(f"pair {idx}: no '{key}' path") from exc
            p = root / rel
            if not p.is_file():
                raise MissingStreamError(idx, str(p))
            return interpolate_to_length(load_feature_sequence(p, stream), length)

        s_frames = load(src, "frames", "frame")
        s_gaze = load(src, "gaze", "gaze")
        s_events = _parse_events(src.get("events", []), idx)
        for ev in s_events:
            ev.validate(s_frames.duration_s, vocab_size)
        t_frames = t_gaze = t_events = None
        if include_target:
            t_frames = load(tgt, "frames", "frame")
            t_gaze = load(tgt, "gaze", "gaze")
            if tgt.get("events") is not None:
                t_events = _parse_events(tgt["events"], idx)
                for ev in t_events:
                    ev.validate(t_frames.duration_s, vocab_size)
        samples.append(
            PairedSample(idx, s_frames, s_gaze, s_events, t_frames, t_gaze, t_events)
        )
    return samples


def load_vocab(manifest_path: str | os.PathLike) -> list[str]:
    return list(read_manifest(manifest_path)["vocab"])


def decode_tokens(tokens: Sequence[int], vocab: Sequence[str]) -> str:
    return " ".join(vocab[t] for t in tokens)
