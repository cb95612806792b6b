"""Domain types and validators shared across the package.

Images live in canonical [0, 1] pixel space everywhere. Budgets quoted in
0-255 units are converted once, at the boundary, by
:func:`budget_from_255_units`.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import torch

INF = math.inf

# Reference resolution for L2 budgets quoted in 0-255 units (224x224x3).
REFERENCE_PIXELS = 224 * 224 * 3


class GenAdvError(Exception):
    """Base class for every error raised by this package."""


class RangeError(GenAdvError, ValueError):
    """Pixel values fell outside [0, 1]; usually an upstream normalization bug."""


class ShapeError(GenAdvError, ValueError):
    pass


class BudgetError(GenAdvError, ValueError):
    pass


class CheckpointError(GenAdvError):
    pass


class MissingCheckpointError(CheckpointError, FileNotFoundError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def parse_norm(p: Union[str, int, float]) -> float:
    """Map user spellings of the norm order onto ``2.0`` or ``math.inf``."""
    if isinstance(p, str):
        key = p.strip().lower()
        if key in {"2", "l2"}:
            return 2.0
        if key in {"inf", "linf", "l_inf", "infinity", "∞"}:
            return INF
        raise BudgetError(f"unsupported norm {p!r}; expected 2 or inf")
    if p == 2:
        return 2.0
    if p == INF:
        return INF
    raise BudgetError(f"unsupported norm {p!r}; expected 2 or inf")


def norm_name(p: float) -> str:
    return "inf" if p == INF else "2"


@dataclass(frozen=True)
class NormBudget:
    """An L_p ball of radius ``epsilon`` in [0, 1] pixel units."""

    p: float
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "p", parse_norm(self.p))
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise BudgetError(f"epsilon must be positive and finite, got {self.epsilon}")

    def epsilon_255(self, n_pixels: int = REFERENCE_PIXELS, n_ref: int = REFERENCE_PIXELS) -> float:
        """Inverse of :func:`budget_from_255_units`."""
        if self.p == INF:
            return self.epsilon * 255.0
        return self.epsilon * 255.0 / math.sqrt(n_pixels / n_ref)

    def norms(self, tensor: torch.Tensor) -> torch.Tensor:
        """Per-sample L_p norm of a (B, ...) tensor."""
        return sample_norms(tensor, self.p)


def sample_norms(tensor: torch.Tensor, p: float) -> torch.Tensor:
    flat = tensor.reshape(tensor.shape[0], -1)
    if p == INF:
        return flat.abs().amax(dim=1)
    return flat.norm(p=2, dim=1)


def budget_from_255_units(
    p: Union[str, float], epsilon_255: float, n_pixels: int, n_ref: int = REFERENCE_PIXELS
) -> NormBudget:
    """Convert a budget quoted for 0-255 images into canonical units.

    L_inf budgets only rescale. L2 budgets are additionally scaled by
    ``sqrt(n_pixels / n_ref)`` so that the per-pixel RMS magnitude of a
    budget-saturating perturbation is the same at both resolutions.
    """
    p = parse_norm(p)
    if not epsilon_255 > 0:
        raise BudgetError(f"epsilon_255 must be positive, got {epsilon_255}")
    if n_pixels <= 0 or n_ref <= 0:
        raise BudgetError("pixel counts must be positive")
    eps = epsilon_255 / 255.0
    if p == 2.0 and n_pixels != n_ref:
        eps *= math.sqrt(n_pixels / n_ref)
    return NormBudget(p, eps)


def validate_image_batch(
    batch: torch.Tensor, expected_shape: Optional[Sequence[int]] = None
) -> torch.Tensor:
    """Return ``batch`` unchanged after checking the ImageBatch invariants.

    ``expected_shape`` is the per-sample ``(C, H, W)`` a victim declares.
    """
    if not isinstance(batch, torch.Tensor):
        raise ShapeError(f"expected a tensor, got {type(batch).__name__}")
    if batch.dim() != 4 or batch.shape[0] < 1:
        raise ShapeError(f"expected a (B, C, H, W) batch with B >= 1, got {tuple(batch.shape)}")
    if expected_shape is not None and tuple(batch.shape[1:]) != tuple(expected_shape):
        raise ShapeError(
            f"batch sample shape {tuple(batch.shape[1:])} != expected {tuple(expected_shape)}"
        )
    if not batch.is_floating_point():
        raise RangeError(f"image batches must be floating point, got {batch.dtype}")
    lo, hi = batch.min().item(), batch.max().item()
    if not (lo >= 0.0 and hi <= 1.0):  # also catches NaN
        raise RangeError(f"pixel values must lie in [0, 1]; found range [{lo}, {hi}]")
    return batch


@dataclass(frozen=True)
class Perturbation:
    """Additive perturbation with the budget it was projected onto."""

    data: torch.Tensor
    budget: NormBudget

    @property
    def universal(self) -> bool:
        return self.data.shape[0] == 1

    def norms(self) -> torch.Tensor:
        return self.budget.norms(self.data)

    def within_budget(self, rtol: float = 1e-6) -> bool:
        return bool((self.norms() <= self.budget.epsilon * (1 + rtol)).all())


@dataclass(frozen=True)
class FixedPattern:
    """The seeded uniform input Z fed to a universal-mode generator."""

    data: torch.Tensor
    seed: int

    @classmethod
    def from_seed(cls, seed: int, shape: Sequence[int]) -> "FixedPattern":
        gen = torch.Generator().manual_seed(int(seed))
        data = torch.rand((1, *shape), generator=gen, dtype=torch.float32)
        return cls(data, int(seed))

    def __post_init__(self):
        if self.data.dim() != 4 or self.data.shape[0] != 1:
            raise ShapeError(f"fixed pattern must have shape (1, C, H, W), got {tuple(self.data.shape)}")
        # Guard against accidental in-place edits during training.
        self.data.requires_grad_(False)


def validate_labels(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Check a ClassLabel vector or LabelMap holds only valid class indices."""
    if labels.dtype not in (torch.int64, torch.int32, torch.int16, torch.uint8):
        raise ShapeError(f"labels must be an integer tensor, got {labels.dtype}")
    if labels.numel() and (labels.min().item() < 0 or labels.max().item() >= num_classes):
        raise RangeError(f"labels must lie in [0, {num_classes})")
    return labels


def validate_distribution(probs: torch.Tensor, atol: float = 1e-5) -> torch.Tensor:
    """Check non-negativity and that class-axis sums equal one."""
    if probs.dim() not in (2, 4):
        raise ShapeError(f"expected (B, C) or (B, C, H, W) probabilities, got {tuple(probs.shape)}")
    if (probs < 0).any():
        raise RangeError("probabilities must be non-negative")
    sums = probs.sum(dim=1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=atol, rtol=0):
        raise RangeError("probabilities must sum to one over the class axis")
    return probs


def load_checkpoint(path: str | Path) -> dict:
    """``torch.load`` with the package's missing/corrupt error mapping."""
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpointError(f"no checkpoint at {path}")
    try:
        data = path.read_bytes()
        return torch.load(io.BytesIO(data), map_location="cpu", weights_only=True)
    except Exception as exc:  # truncated zip, bad pickle, ...
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
