"""Gaze-guided calibration cascade and the cross-view consistency losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

N_LEVELS = 4
KL_EPS = 1e-8


@dataclass
class CalibrationLevel:
    M_V: torch.Tensor  # L_i x C
    M_G: torch.Tensor  # L_i x C
    A: torch.Tensor  # heads x L_i x L_i, rows on the simplex
    A_scaled: torch.Tensor
    prototype: torch.Tensor  # C


@dataclass
class CalibrationStack:
    levels: list[CalibrationLevel]

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(lvl.M_V.shape[-2] for lvl in self.levels)

    @property
    def features(self) -> list[torch.Tensor]:
        return [lvl.M_V for lvl in self.levels]


def downsampled_length(length: int) -> int:
    return -(-length // 2)


class GCMBlock(nn.Module):
    """One calibration level: stride-2 downsampling of both streams, then
    frame queries attend over gaze keys/values with a residual to the
    downsampled frames."""

    def __init__(self, dim: int, n_heads: int = 4, sigma_init: float = 1.0):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"n_heads={n_heads} must divide dim={dim}")
        self.dim = dim
        self.n_heads = n_heads
        self.theta_V = nn.Conv1d(dim, dim, kernel_size=3, stride=2, padding=1)
        self.theta_G = nn.Conv1d(dim, dim, kernel_size=3, stride=2, padding=1)
        self.W_q = nn.Linear(dim, dim, bias=False)
        self.W_k = nn.Linear(dim, dim, bias=False)
        self.W_v = nn.Linear(dim, dim, bias=False)
        self.sigma_S = nn.Parameter(torch.tensor(float(sigma_init)))

    def _down(self, conv: nn.Conv1d, x: torch.Tensor) -> torch.Tensor:
        return F.gelu(conv(x.transpose(-1, -2))).transpose(-1, -2)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        L = x.shape[-2]
        return x.reshape(L, self.n_heads, self.dim // self.n_heads).transpose(0, 1)

    def forward(self, m_v: torch.Tensor, m_g: torch.Tensor):
        if m_v.shape != m_g.shape:
            raise ValueError(f"stream shapes differ: {tuple(m_v.shape)} vs {tuple(m_g.shape)}")
        v_bar = self._down(self.theta_V, m_v)
        g_bar = self._down(self.theta_G, m_g)
        q = self._heads(self.W_q(v_bar))
        k = self._heads(self.W_k(g_bar))
        v = self._heads(self.W_v(g_bar))
        d_head = q.shape[-1]
        a_norm = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d_head), dim=-1)
        a_scaled = a_norm * self.sigma_S
        out = (a_scaled @ v).transpose(0, 1).reshape(v_bar.shape)
        return out + v_bar, g_bar, a_norm, a_scaled


class GCCM(nn.Module):
    def __init__(self, dim: int, n_heads: int = 4, n_levels: int = N_LEVELS):
        super().__init__()
        self.blocks = nn.ModuleList(GCMBlock(dim, n_heads) for _ in range(n_levels))

    def forward(self, conv_frames: torch.Tensor, conv_gaze: torch.Tensor) -> CalibrationStack:
        return cascade(conv_frames, conv_gaze, self.blocks)

    def named_blocks(self) -> dict[str, nn.Module]:
        return {f"gccm.block{i + 1}": b for i, b in enumerate(self.blocks)}


def cascade(conv_frames: torch.Tensor, conv_gaze: torch.Tensor, blocks) -> CalibrationStack:
    length = conv_frames.shape[-2]
    if length < 2 ** len(blocks):
        raise ValueError(f"sequence length {length} too short for {len(blocks)} levels")
    m_v, m_g = conv_frames, conv_gaze
    levels = []
    for block in blocks:
        m_v, m_g, a_norm, a_scaled = block(m_v, m_g)
        levels.append(CalibrationLevel(m_v, m_g, a_norm, a_scaled, m_v.mean(dim=-2)))
    return CalibrationStack(levels)


def symmetric_kl(p: torch.Tensor, q: torch.Tensor, eps: float = KL_EPS) -> torch.Tensor:
    """KL(p||q) + KL(q||p) along the last axis, averaged over all other axes."""
    log_p = torch.log(p + eps)
    log_q = torch.log(q + eps)
    per_row = (p * (log_p - log_q)).sum(-1) + (q * (log_q - log_p)).sum(-1)
    return per_row.mean()


def attention_consistency_loss(stack_s: CalibrationStack, stack_t: CalibrationStack) -> torch.Tensor:
    if stack_s.lengths != stack_t.lengths:
        raise ValueError(f"level shapes differ: {stack_s.lengths} vs {stack_t.lengths}")
    total = 0.0
    for ls, lt in zip(stack_s.levels, stack_t.levels):
        if ls.A.shape != lt.A.shape:
            raise ValueError("attention map shapes differ")
        total = total + symmetric_kl(ls.A, lt.A)
    return torch.as_tensor(total)


def prototype_consistency_loss(stack_s: CalibrationStack, stack_t: CalibrationStack) -> torch.Tensor:
    if len(stack_s.levels) != len(stack_t.levels):
        raise ValueError("stacks have different depths")
    total = 0.0
    for ls, lt in zip(stack_s.levels, stack_t.levels):
        if ls.prototype.shape != lt.prototype.shape:
            raise ValueError("prototype dimensions differ")
        total = total + F.mse_loss(ls.prototype, lt.prototype)
    return torch.as_tensor(total)


def attention_entropy(stack: CalibrationStack) -> list[float]:
    """Mean row entropy (nats) of the normalised attention at each level."""
    out = []
    for lvl in stack.levels:
        a = lvl.A.double()
        out.append(float(-(a * torch.log(a.clamp_min(1e-30))).sum(-1).mean()))
    return out
