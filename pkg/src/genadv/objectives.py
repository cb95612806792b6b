"""Fooling losses for classification and per-pixel segmentation.

All losses take victim *probabilities* (softmax outputs) except the logit
margin, which takes raw logits. Class indices are a (B,) vector for
classification or a (B, H, W) map for segmentation; the class axis of the
predictions is always dim 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .core import RangeError, ShapeError

CE_FLOOR = 1e-12

KINDS = (
    "nontargeted_ce",
    "least_likely",
    "targeted_ce",
    "logit_margin_nontargeted",
    "logit_margin_targeted",
)
TARGETED_KINDS = {"targeted_ce", "logit_margin_targeted"}


@dataclass(frozen=True, eq=False)
class LossSpec:
    """Which fooling loss to train with.

    ``target`` is a class index, or a (H, W) map for segmentation.
    ``reference`` picks the class a non-targeted loss pushes away from:
    the victim's clean prediction (default) or the dataset label.
    """

    kind: str = "nontargeted_ce"
    target: Optional[int | torch.Tensor] = None
    ce_floor: float = CE_FLOOR
    kappa: float = 0.0
    reference: str = "prediction"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; choose from {KINDS}")
        if self.targeted and self.target is None:
            raise ValueError(f"{self.kind} requires a target")
        if not self.targeted and self.target is not None:
            raise ValueError(f"{self.kind} is non-targeted and takes no target")
        if not self.ce_floor > 0:
            raise ValueError("ce_floor must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.reference not in ("prediction", "label"):
            raise ValueError("reference must be 'prediction' or 'label'")

    @property
    def targeted(self) -> bool:
        return self.kind in TARGETED_KINDS

    @property
    def uses_logits(self) -> bool:
        return self.kind.startswith("logit_margin")


def _expand_index(preds: torch.Tensor, index) -> torch.Tensor:
    index = torch.as_tensor(index, device=preds.device).long()
    if index.dim() == 0:
        index = index.expand(preds.shape[0])
    if preds.dim() == 4 and index.dim() == 2:  # one static (H, W) map for the batch
        index = index.unsqueeze(0).expand(preds.shape[0], -1, -1)
    return index


def _gather(probs: torch.Tensor, index) -> torch.Tensor:
    index = _expand_index(probs, index)
    if index.shape != probs.shape[:1] + probs.shape[2:]:
        raise ShapeError(
            f"index shape {tuple(index.shape)} does not match predictions {tuple(probs.shape)}"
        )
    if index.numel() and (index.min() < 0 or index.max() >= probs.shape[1]):
        raise RangeError(f"class index out of range [0, {probs.shape[1]})")
    return probs.gather(1, index.unsqueeze(1)).squeeze(1)


def cross_entropy(probs: torch.Tensor, onehot_index) -> torch.Tensor:
    """Per-sample ``-ln p[index]``, averaged over pixels for segmentation."""
    p = _gather(probs, onehot_index)
    tiny = torch.finfo(probs.dtype).tiny
    nll = -torch.log(p.clamp_min(tiny))
    return nll.reshape(nll.shape[0], -1).mean(dim=1)


def _log_floored(h: torch.Tensor, floor: float) -> torch.Tensor:
    return torch.log(torch.clamp(h, min=floor))


def loss_nontargeted_ce(probs: torch.Tensor, gt, floor: float = CE_FLOOR) -> torch.Tensor:
    """``-ln(H(k(x_hat), 1_gt))``: decreasing in the cross-entropy to the reference class."""
    return (-_log_floored(cross_entropy(probs, gt), floor)).mean()


def least_likely_class(probs_clean: torch.Tensor) -> torch.Tensor:
    # torch.argmin returns the first minimum, i.e. the lowest class index.
    return probs_clean.argmin(dim=1)


def loss_least_likely(probs_pert: torch.Tensor, k_ll, floor: float = CE_FLOOR) -> torch.Tensor:
    return _log_floored(cross_entropy(probs_pert, k_ll), floor).mean()


def loss_targeted(probs_pert: torch.Tensor, t, floor: float = CE_FLOOR) -> torch.Tensor:
    return _log_floored(cross_entropy(probs_pert, t), floor).mean()


def loss_logit_margin(logits: torch.Tensor, reference, mode: str, kappa: float = 0.0) -> torch.Tensor:
    """Hinge on the gap between the reference logit and the best other logit.

    targeted:     mean(max(max_{i != t} z_i - z_t, -kappa))
    nontargeted:  mean(max(z_gt - max_{i != gt} z_i, -kappa))
    """
    if mode not in ("targeted", "nontargeted"):
        raise ValueError(f"mode must be 'targeted' or 'nontargeted', got {mode!r}")
    z_ref = _gather(logits, reference)
    index = _expand_index(logits, reference)
    mask = torch.nn.functional.one_hot(index, logits.shape[1]).movedim(-1, 1).bool()
    z_other = logits.masked_fill(mask, float("-inf")).amax(dim=1)
    gap = z_other - z_ref if mode == "targeted" else z_ref - z_other
    return torch.clamp(gap, min=-kappa).mean()


def loss_multi_fool(losses: Sequence[torch.Tensor], lambdas: Sequence[float]) -> torch.Tensor:
    """Weighted sum of per-victim losses, accumulated in list order."""
    if len(losses) == 0:
        raise ValueError("need at least one loss")
    if len(losses) != len(lambdas):
        raise ValueError(f"{len(losses)} losses but {len(lambdas)} weights")
    total = lambdas[0] * losses[0]
    for lam, loss in zip(lambdas[1:], losses[1:]):
        total = total + lam * loss
    return total


def fooling_loss(
    spec: LossSpec,
    logits: torch.Tensor,
    probs: torch.Tensor,
    reference: torch.Tensor,
    k_ll: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Dispatch on ``spec.kind``.

    ``reference`` is the non-targeted anchor (clean prediction or label);
    ``k_ll`` the least-likely class computed on the clean images.
    """
    if spec.kind == "nontargeted_ce":
        return loss_nontargeted_ce(probs, reference, spec.ce_floor)
    if spec.kind == "least_likely":
        if k_ll is None:
            raise ValueError("least_likely loss needs k_ll from the clean images")
        return loss_least_likely(probs, k_ll, spec.ce_floor)
    if spec.kind == "targeted_ce":
        return loss_targeted(probs, spec.target, spec.ce_floor)
    if spec.kind == "logit_margin_targeted":
        return loss_logit_margin(logits, spec.target, "targeted", spec.kappa)
    return loss_logit_margin(logits, reference, "nontargeted", spec.kappa)
