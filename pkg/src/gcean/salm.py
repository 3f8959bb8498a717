"""Score-based adversarial alignment of frame and gaze representations."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

BRANCHES = ("frame", "gaze")


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg()


def grad_reverse(x: torch.Tensor) -> torch.Tensor:
    """Identity on the forward pass, exact negation of the gradient on the way back."""
    return _GradReverse.apply(x)


class FeatureConverter(nn.Module):
    """Per-position residual MLP; the last layer starts at zero so the
    converter is the identity at initialisation."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {x.shape[-1]}")
        return x + self.fc2(F.gelu(self.fc1(self.norm(x))))


class ScoringNetwork(nn.Module):
    """Per-position probability that a representation comes from the source view."""

    def __init__(self, dim: int):
        super().__init__()
        hidden = max(dim // 2, 1)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x: torch.Tensor, reverse: bool = True) -> torch.Tensor:
        if reverse:
            x = grad_reverse(x)
        return torch.sigmoid(self.fc2(F.gelu(self.fc1(x)))).squeeze(-1)


class GazePredictor(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(frames)))


class SALM(nn.Module):
    """Frame and gaze branches, each a converter plus a scoring network,
    and the frame-to-gaze predictor."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.converter = nn.ModuleDict({b: FeatureConverter(dim) for b in BRANCHES})
        self.scorer = nn.ModuleDict({b: ScoringNetwork(dim) for b in BRANCHES})
        self.gaze_predictor = GazePredictor(dim)

    def convert(self, features: torch.Tensor, branch: str) -> torch.Tensor:
        return self.converter[branch](features)

    def score(self, converted: torch.Tensor, branch: str, reverse: bool = True) -> torch.Tensor:
        return self.scorer[branch](converted, reverse=reverse)

    def predict_gaze(self, frames: torch.Tensor) -> torch.Tensor:
        return self.gaze_predictor(frames)

    def named_blocks(self) -> dict[str, nn.Module]:
        return {
            "salm.converter.frame": self.converter["frame"],
            "salm.converter.gaze": self.converter["gaze"],
            "salm.scorer.frame": self.scorer["frame"],
            "salm.scorer.gaze": self.scorer["gaze"],
            "salm.gaze_predictor": self.gaze_predictor,
        }


def margin_ranking_loss(scores_s: torch.Tensor, scores_t: torch.Tensor, margin: float = 0.75) -> torch.Tensor:
    """Mean hinge pushing every source score above its target counterpart by ``margin``."""
    if scores_s.shape != scores_t.shape:
        raise ValueError(f"score length mismatch: {tuple(scores_s.shape)} vs {tuple(scores_t.shape)}")
    return torch.clamp(margin - (scores_s - scores_t), min=0).mean()


def global_alignment_loss(conv_s: torch.Tensor, conv_t: torch.Tensor) -> torch.Tensor:
    """MSE between the temporal means of the two views."""
    if conv_s.shape != conv_t.shape:
        raise ValueError(f"shape mismatch: {tuple(conv_s.shape)} vs {tuple(conv_t.shape)}")
    return F.mse_loss(conv_s.mean(dim=-2), conv_t.mean(dim=-2))


def gaze_prediction_loss(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(truth.shape)}")
    return F.mse_loss(pred, truth)


@dataclass
class SalmWeights:
    lambda_G: float = 5.0
    lambda_S: float = 0.25
    lambda_G_gaze: float = 5.0
    lambda_S_gaze: float = 0.25
    lambda_PG_S: float = 1.0
    lambda_PG_T: float = 1.0
    margin: float = 0.75

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        for name in ("lambda_G", "lambda_S", "lambda_G_gaze", "lambda_S_gaze", "lambda_PG_S", "lambda_PG_T"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


SALM_TERMS = ("L_S", "L_G", "L_S_gaze", "L_G_gaze", "L_PG_S", "L_PG_T")
_TERM_WEIGHT = {
    "L_S": "lambda_S",
    "L_G": "lambda_G",
    "L_S_gaze": "lambda_S_gaze",
    "L_G_gaze": "lambda_G_gaze",
    "L_PG_S": "lambda_PG_S",
    "L_PG_T": "lambda_PG_T",
}
_ADVERSARIAL = ("L_S", "L_S_gaze")


def salm_total(terms: dict[str, torch.Tensor], weights: SalmWeights) -> tuple[torch.Tensor, torch.Tensor, dict[str, float]]:
    """Combine the SALM terms.

    Returns ``(objective, reported, breakdown)``. ``objective`` is what gets
    differentiated: the ranking losses enter with a plus sign because the
    reversal layer already flips their gradient for the converters.
    ``reported`` is the bookkeeping value, with the ranking losses
    subtracted.
    """
    missing = [k for k in SALM_TERMS if k not in terms]
    if missing:
        raise KeyError(f"missing SALM terms: {missing}")
    objective = 0.0
    reported = 0.0
    breakdown = {}
    for name in SALM_TERMS:
        w = getattr(weights, _TERM_WEIGHT[name])
        value = terms[name]
        objective = objective + w * value
        reported = reported + (-w if name in _ADVERSARIAL else w) * value
        breakdown[name] = float(value.detach()) if torch.is_tensor(value) else float(value)
        breakdown[f"{name}_weighted"] = w * breakdown[name]
    objective = torch.as_tensor(objective)
    reported = torch.as_tensor(reported)
    breakdown["L_SALM"] = float(reported.detach())
    return objective, reported, breakdown
