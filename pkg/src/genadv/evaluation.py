"""Attack metrics, blur robustness and inference timing.

Label-level functions (``*_from_labels``, :func:`mean_iou`) operate on
predicted class tensors and are what the model-level wrappers reduce to.
All ratios are accumulated in float64.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import GenAdvError, NormBudget, ShapeError
from .victims import VictimModel, predict


class EmptyBatchError(GenAdvError, ValueError):
    pass


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.numel() == 0:
        raise EmptyBatchError("metrics need a non-empty batch")


def fooling_ratio_from_labels(clean_pred: torch.Tensor, adv_pred: torch.Tensor) -> float:
    _check_pair(clean_pred, adv_pred)
    return float((clean_pred != adv_pred).double().mean())


def accuracy_from_labels(pred: torch.Tensor, labels: torch.Tensor) -> float:
    _check_pair(pred, labels)
    return float((pred == labels).double().mean())


def target_success_from_labels(pred: torch.Tensor, target) -> float:
    if target is None:
        raise ValueError("target success needs a target")
    target = torch.as_tensor(target, dtype=pred.dtype).expand_as(pred)
    return accuracy_from_labels(pred, target)


def mean_iou(pred: torch.Tensor, gt: torch.Tensor, num_classes: int) -> float:
    """Mean IoU over classes occurring in ``pred`` or ``gt``."""
    _check_pair(pred, gt)
    p, g = pred.reshape(-1).long(), gt.reshape(-1).long()
    inter = torch.bincount(p[p == g], minlength=num_classes).double()
    union = (torch.bincount(p, minlength=num_classes) + torch.bincount(g, minlength=num_classes)).double() - inter
    # Fixed class-order reduction so results do not depend on kernel summation order.
    ratios = [float(i) / float(u) for i, u in zip(inter.tolist(), union.tolist()) if u > 0]
    return sum(ratios) / len(ratios)


def fooling_ratio(model: VictimModel, x_clean: torch.Tensor, x_adv: torch.Tensor) -> float:
    """Fraction of samples (pixels, for segmentation) whose prediction changes."""
    if x_clean.shape[0] != x_adv.shape[0]:
        raise ShapeError("clean and adversarial batches differ in size")
    if x_clean.shape[0] == 0:
        raise EmptyBatchError("empty batch")
    return fooling_ratio_from_labels(predict(model, x_clean), predict(model, x_adv))


def accuracy(model: VictimModel, x: torch.Tensor, labels: torch.Tensor) -> float:
    if x.shape[0] == 0:
        raise EmptyBatchError("empty batch")
    return accuracy_from_labels(predict(model, x), labels)


def target_success(model: VictimModel, x_adv: torch.Tensor, target) -> float:
    if x_adv.shape[0] == 0:
        raise EmptyBatchError("empty batch")
    return target_success_from_labels(predict(model, x_adv), target)


def _as_perturb_fn(artifact) -> Callable[[torch.Tensor], torch.Tensor]:
    from .attacks import AttackArtifact, perturb

    if isinstance(artifact, AttackArtifact):
        return lambda x: perturb(artifact, x)
    if callable(artifact):
        return artifact
    raise TypeError(f"expected an AttackArtifact or callable, got {type(artifact).__name__}")


def transfer_matrix(artifacts: Sequence, victims: Sequence[VictimModel], x: torch.Tensor) -> np.ndarray:
    """Fooling ratio of each attack (rows) on each victim (columns).

    Rows are attack artifacts, or callables mapping clean to adversarial
    images; ``x`` is the evaluation batch shared by every cell.
    """
    shapes = {tuple(v.input_shape) for v in victims}
    if len(shapes) != 1:
        raise ShapeError(f"victims disagree on input shape: {sorted(shapes)}")
    if x.shape[0] == 0:
        raise EmptyBatchError("empty batch")
    clean = [predict(v, x) for v in victims]
    out = np.zeros((len(artifacts), len(victims)), dtype=np.float64)
    for i, artifact in enumerate(artifacts):
        x_adv = _as_perturb_fn(artifact)(x)
        for j, v in enumerate(victims):
            out[i, j] = fooling_ratio_from_labels(clean[j], predict(v, x_adv))
    return out


# -- Gaussian blur -----------------------------------------------------------

def gaussian_kernel1d(sigma: float) -> torch.Tensor:
    """Normalized taps at offsets ``-r..r`` with ``r = ceil(3 sigma)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return torch.ones(1, dtype=torch.float64)
    r = math.ceil(3 * sigma)
    offsets = torch.arange(-r, r + 1, dtype=torch.float64)
    k = torch.exp(-(offsets**2) / (2 * sigma**2))
    return k / k.sum()


def _blur_last_axis(x: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    # Symmetric taps are summed in mirrored pairs so the result commutes
    # exactly (bitwise) with flipping the axis.
    r = (k.numel() - 1) // 2
    n = x.shape[-1]
    p = F.pad(x.reshape(-1, 1, n), (r, r), mode="reflect").reshape(*x.shape[:-1], n + 2 * r)
    out = k[r] * p[..., r:r + n]
    for j in range(1, r + 1):
        out = out + k[r + j] * (p[..., r - j:r - j + n] + p[..., r + j:r + j + n])
    return out


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable per-channel Gaussian blur with reflect padding."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return x.clone()
    k = gaussian_kernel1d(sigma)
    r = (k.numel() - 1) // 2
    if r >= x.shape[-1] or r >= x.shape[-2]:
        raise ShapeError(f"blur radius {r} too large for {tuple(x.shape[-2:])} images")
    h = _blur_last_axis(x.double(), k)
    v = _blur_last_axis(h.transpose(-1, -2), k).transpose(-1, -2)
    return v.to(x.dtype)


@dataclass(frozen=True)
class DestructionRate:
    """``rate`` is None when no sample qualifies (correct clean, fooled adversarial)."""

    rate: Optional[float]
    recovered: int
    qualifying: int

    @property
    def defined(self) -> bool:
        return self.rate is not None


def destruction_rate_from_labels(clean_pred, adv_pred, blurred_pred, labels) -> DestructionRate:
    _check_pair(clean_pred, labels)
    _check_pair(adv_pred, labels)
    _check_pair(blurred_pred, labels)
    qualifying = (clean_pred == labels) & (adv_pred != labels)
    recovered = qualifying & (blurred_pred == labels)
    q, r = int(qualifying.sum()), int(recovered.sum())
    return DestructionRate(r / q if q else None, r, q)


def destruction_rate(model: VictimModel, x_clean: torch.Tensor, y: torch.Tensor, x_adv: torch.Tensor,
                     sigma: float) -> DestructionRate:
    """Among samples correct when clean but fooled, the fraction blur restores."""
    if x_clean.shape[0] == 0:
        raise EmptyBatchError("empty batch")
    return destruction_rate_from_labels(
        predict(model, x_clean), predict(model, x_adv), predict(model, gaussian_blur(x_adv, sigma)), y
    )


# -- timing ------------------------------------------------------------------

@dataclass
class TimingResult:
    generator_ms: list[float]
    baseline_ms: list[float]
    baseline_steps: int

    @staticmethod
    def _stats(values):
        return {"mean_ms": statistics.fmean(values), "median_ms": statistics.median(values)}

    @property
    def generator(self) -> dict:
        return self._stats(self.generator_ms)

    @property
    def baseline(self) -> dict:
        return self._stats(self.baseline_ms)

    @property
    def speedup(self) -> float:
        """Ratio of median per-image latencies, baseline over generator."""
        return self.baseline["median_ms"] / self.generator["median_ms"]


@dataclass(frozen=True)
class BaselineConfig:
    """Iterative sign-gradient baseline: least-likely (``ll``) or ``bim``."""

    kind: str = "ll"
    steps: int = 100
    step_size: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("ll", "bim"):
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def run(self, model: VictimModel, x: torch.Tensor, budget: NormBudget) -> torch.Tensor:
        from .attacks import baseline_bim, baseline_iterative_ll

        if self.kind == "ll":
            return baseline_iterative_ll(model, x, budget, self.steps, self.step_size)
        return baseline_bim(model, x, predict(model, x), budget, self.steps, self.step_size)


def _time_once(fn, x) -> float:
    start = time.perf_counter_ns()
    fn(x)
    return (time.perf_counter_ns() - start) / 1e6


def timing_study(artifact, model: VictimModel, x: torch.Tensor, baseline: BaselineConfig = BaselineConfig(),
                 repeats: int = 3, warmup: int = 2) -> TimingResult:
    """Per-image latency of the generator path versus an iterative baseline.

    The generator path is one forward pass plus projection and composition.
    Images go through one at a time; each image's latency is the mean over
    ``repeats`` timed calls, after ``warmup`` untimed calls.
    """
    from .attacks import generate_perturbation
    from .projection import compose_adversarial

    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    if x.shape[0] == 0:
        raise EmptyBatchError("empty batch")
    budget = artifact.spec.budget

    def generator_fn(xi):
        return compose_adversarial(xi, generate_perturbation(artifact, xi))

    def baseline_fn(xi):
        return baseline.run(model, xi, budget)

    with torch.no_grad():
        for _ in range(warmup):
            generator_fn(x[:1])
    for _ in range(warmup):
        baseline_fn(x[:1])
    gen_ms, base_ms = [], []
    for i in range(x.shape[0]):
        xi = x[i:i + 1]
        gen_ms.append(statistics.fmean(_time_once(generator_fn, xi) for _ in range(repeats)))
        base_ms.append(statistics.fmean(_time_once(baseline_fn, xi) for _ in range(repeats)))
    return TimingResult(gen_ms, base_ms, baseline.steps)


# -- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    """Named metrics with sample counts, provenance and optional tables."""

    provenance: dict = field(default_factory=dict)
    metrics: dict[str, dict] = field(default_factory=dict)
    tables: dict[str, dict] = field(default_factory=dict)

    def add(self, name: str, value: Optional[float], count: int, ratio: bool = True) -> None:
        if ratio and value is not None and not (0.0 <= value <= 1.0):
            raise ValueError(f"ratio metric {name} = {value} outside [0, 1]")
        self.metrics[name] = {"value": value, "count": int(count)}

    def value(self, name: str) -> Optional[float]:
        return self.metrics[name]["value"]

    def add_table(self, name: str, rows: Sequence[str], cols: Sequence[str], values) -> None:
        values = [[None if v is None else float(v) for v in row] for row in values]
        if len(values) != len(rows) or any(len(r) != len(cols) for r in values):
            raise ShapeError(f"table {name} does not match its {len(rows)}x{len(cols)} labels")
        self.tables[name] = {"rows": list(rows), "cols": list(cols), "values": values}

    def to_dict(self) -> dict:
        return {"provenance": self.provenance, "metrics": self.metrics, "tables": self.tables}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d.get("provenance", {}), d.get("metrics", {}), d.get("tables", {}))
