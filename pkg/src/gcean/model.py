"""The full network: SALM converters, the calibration cascade and the head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .dvchead import DVCHead, HeadConfig
from .gccm import GCCM, CalibrationStack
from .salm import SALM


@dataclass
class ModelConfig:
    dim: int = 32
    vocab_size: int = 34
    n_heads: int = 4
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ViewEncoding:
    converted: torch.Tensor
    predicted_gaze: torch.Tensor
    converted_gaze: torch.Tensor
    stack: CalibrationStack


class GCEAN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.salm = SALM(cfg.dim)
        self.gccm = GCCM(cfg.dim, cfg.n_heads)
        self.head = DVCHead(cfg.dim, cfg.vocab_size, cfg.head)

    def encode(self, frames: torch.Tensor) -> ViewEncoding:
        """Frames -> converted frames, predicted gaze, converted gaze, calibration stack.

        The gaze branch always consumes predicted gaze; ground-truth gaze is
        only a regression target.
        """
        converted = self.salm.convert(frames, "frame")
        gaze = self.salm.predict_gaze(frames)
        converted_gaze = self.salm.convert(gaze, "gaze")
        return ViewEncoding(converted, gaze, converted_gaze, self.gccm(converted, converted_gaze))

    def named_blocks(self) -> dict[str, nn.Module]:
        blocks = dict(self.salm.named_blocks())
        blocks.update(self.gccm.named_blocks())
        blocks["dvchead"] = self.head
        return blocks

    def adapt_parameters(self) -> list[nn.Parameter]:
        return list(self.salm.parameters()) + list(self.gccm.parameters())

    def rest_parameters(self) -> list[nn.Parameter]:
        return list(self.head.parameters())

    def block_state(self) -> dict[str, dict[str, torch.Tensor]]:
        return {
            name: {k: v.detach().clone() for k, v in mod.state_dict().items()}
            for name, mod in self.named_blocks().items()
        }

    def load_block_state(self, blocks: dict[str, dict[str, torch.Tensor]]) -> None:
        mine = self.named_blocks()
        missing = set(mine) - set(blocks)
        if missing:
            raise KeyError(f"checkpoint lacks blocks: {sorted(missing)}")
        for name, mod in mine.items():
            mod.load_state_dict(blocks[name])

    def parameter_counts(self) -> dict[str, int]:
        return {name: sum(p.numel() for p in mod.parameters()) for name, mod in self.named_blocks().items()}
