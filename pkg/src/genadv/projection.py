"""Norm scaling and range clipping between generator and victim."""

from __future__ import annotations

import torch

from .core import NormBudget, Perturbation, ShapeError

ZERO_NORM = 1e-12


def scale_to_budget(raw: torch.Tensor, budget: NormBudget) -> Perturbation:
    """Multiply each sample by ``min(1, eps / ||raw[i]||_p)``.

    Samples already inside the ball pass through untouched, larger ones are
    shrunk radially onto its surface. Samples with (near) zero norm are
    returned unchanged. The result stays differentiable in ``raw``.
    """
    if raw.dim() < 2:
        raise ShapeError(f"expected a batched tensor, got shape {tuple(raw.shape)}")
    norms = budget.norms(raw)
    safe = torch.where(norms < ZERO_NORM, torch.ones_like(norms), norms)
    factor = torch.clamp(budget.epsilon / safe, max=1.0)
    factor = torch.where(norms < ZERO_NORM, torch.ones_like(factor), factor)
    factor = factor.reshape(-1, *([1] * (raw.dim() - 1)))
    return Perturbation(raw * factor, budget)


def clip_to_valid(perturbed: torch.Tensor) -> torch.Tensor:
    # torch.clamp passes gradient on [0, 1] and zeroes it outside.
    return torch.clamp(perturbed, 0.0, 1.0)


def compose_adversarial(x: torch.Tensor, delta: Perturbation | torch.Tensor) -> torch.Tensor:
    """``clip(x + delta)``; a (1, C, H, W) delta broadcasts over the batch."""
    d = delta.data if isinstance(delta, Perturbation) else delta
    if d.shape[1:] != x.shape[1:] or d.shape[0] not in (1, x.shape[0]):
        raise ShapeError(
            f"perturbation shape {tuple(d.shape)} does not match images {tuple(x.shape)}"
        )
    return clip_to_valid(x + d)
