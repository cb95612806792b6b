"""Generator training pipelines, inference paths and iterative baselines.

Universal mode feeds a fixed seeded pattern through the generator and adds
the projected output to every image; image-dependent mode feeds the images
themselves. Both share one training loop that updates only the generator
and sums per-victim fooling losses with their weights.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    INF,
    BudgetError,
    FixedPattern,
    NormBudget,
    Perturbation,
    ShapeError,
    load_checkpoint,
    norm_name,
)
from .data import DatasetHandle, batch_iterator
from .generator import (
    GeneratorConfig,
    GeneratorHandle,
    build_generator,
    generator_forward,
    generator_from_payload,
    generator_to_payload,
)
from .objectives import LossSpec, fooling_loss, least_likely_class, loss_multi_fool
from .projection import clip_to_valid, compose_adversarial, scale_to_budget
from .victims import VictimModel, victim_forward

log = logging.getLogger(__name__)

MODES = ("universal", "image_dependent")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)


@dataclass
class AttackSpec:
    mode: str
    loss: LossSpec
    budget: NormBudget
    victims: list[tuple[str, Optional[float]]]
    generator: GeneratorConfig = field(default_factory=lambda: GeneratorConfig.default("resnet"))
    optimizer: OptimizerConfig = OptimizerConfig()
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    pattern_seed: Optional[int] = None
    max_steps: Optional[int] = None
    val_limit: Optional[int] = 1000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.victims:
            raise ValueError("an attack needs at least one victim")
        pairs = [(v, None) if isinstance(v, str) else tuple(v) for v in self.victims]
        m = len(pairs)
        # Unspecified weights default to uniform 1/m.
        self.victims = [(vid, 1.0 / m if lam is None else float(lam)) for vid, lam in pairs]
        if self.mode == "universal" and self.pattern_seed is None:
            self.pattern_seed = self.seed
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def victim_ids(self) -> list[str]:
        return [v for v, _ in self.victims]

    @property
    def lambdas(self) -> list[float]:
        return [lam for _, lam in self.victims]

    def to_dict(self) -> dict:
        target = self.loss.target
        if isinstance(target, torch.Tensor):
            target = target.tolist()
        return {
            "mode": self.mode,
            "loss": {"kind": self.loss.kind, "target": target, "ce_floor": self.loss.ce_floor,
                     "kappa": self.loss.kappa, "reference": self.loss.reference},
            "budget": {"p": norm_name(self.budget.p), "epsilon": self.budget.epsilon},
            "victims": [[v, lam] for v, lam in self.victims],
            "generator": dataclasses.asdict(self.generator),
            "optimizer": {"lr": self.optimizer.lr, "betas": list(self.optimizer.betas)},
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "pattern_seed": self.pattern_seed,
            "max_steps": self.max_steps,
            "val_limit": self.val_limit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        loss = dict(d["loss"])
        if isinstance(loss.get("target"), list):
            loss["target"] = torch.tensor(loss["target"], dtype=torch.long)
        opt = d.get("optimizer", {})
        return cls(
            mode=d["mode"],
            loss=LossSpec(**loss),
            budget=NormBudget(d["budget"]["p"], d["budget"]["epsilon"]),
            victims=[tuple(v) for v in d["victims"]],
            generator=GeneratorConfig(**d["generator"]),
            optimizer=OptimizerConfig(opt.get("lr", 2e-4), tuple(opt.get("betas", (0.5, 0.999)))),
            epochs=d["epochs"],
            batch_size=d["batch_size"],
            seed=d["seed"],
            pattern_seed=d.get("pattern_seed"),
            max_steps=d.get("max_steps"),
            val_limit=d.get("val_limit"),
        )


@dataclass
class AttackArtifact:
    spec: AttackSpec
    generator: GeneratorHandle
    pattern: Optional[FixedPattern] = None
    perturbation: Optional[Perturbation] = None
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def universal(self) -> bool:
        return self.spec.mode == "universal"


def _resolve(spec: AttackSpec, victims) -> list[VictimModel]:
    if isinstance(victims, Mapping) or hasattr(victims, "load"):
        getter = victims.__getitem__ if isinstance(victims, Mapping) else victims.load
        models = [getter(vid) for vid in spec.victim_ids]
    else:
        models = list(victims)
        if [m.id for m in models] != spec.victim_ids:
            raise ValueError(f"victims {[m.id for m in models]} do not match spec {spec.victim_ids}")
    for m in models:
        if not m.frozen:
            m.freeze()
    return models


def _check_shapes(spec: AttackSpec, dataset: DatasetHandle, models: Sequence[VictimModel]) -> None:
    for m in models:
        if tuple(m.input_shape) != tuple(dataset.input_shape):
            raise ShapeError(f"victim {m.id} expects {m.input_shape}, dataset provides {dataset.input_shape}")
        if m.task != dataset.task:
            raise ShapeError(f"victim {m.id} is a {m.task} model, dataset is {dataset.task}")
    if spec.generator.in_channels != dataset.input_shape[0] or spec.generator.out_channels != dataset.input_shape[0]:
        raise ShapeError("generator channels must match the image channels")


def perturbation_for(gen: GeneratorHandle, budget: NormBudget, pattern: Optional[FixedPattern],
                     x: Optional[torch.Tensor]) -> Perturbation:
    """Projected generator output for ``x`` (or for ``pattern`` in universal mode)."""
    return scale_to_budget(generator_forward(gen, pattern if pattern is not None else x), budget)


def _success(spec: AttackSpec, m: VictimModel, clean_pred: torch.Tensor, adv_pred: torch.Tensor) -> torch.Tensor:
    """Per-element success indicator: label flip, or hitting the target."""
    if spec.loss.targeted:
        target = torch.as_tensor(spec.loss.target, dtype=torch.long)
        return (adv_pred == target.expand_as(adv_pred)).double()
    return (adv_pred != clean_pred).double()


@torch.no_grad()
def _validate(spec, gen, pattern, models, x_val) -> tuple[float, list[float]]:
    gen.module.eval()
    per_victim_hits = [[] for _ in models]
    for start in range(0, x_val.shape[0], 256):
        x = x_val[start:start + 256]
        x_hat = compose_adversarial(x, perturbation_for(gen, spec.budget, pattern, x))
        for i, m in enumerate(models):
            clean = m.module(x).argmax(dim=1)
            adv = m.module(x_hat).argmax(dim=1)
            per_victim_hits[i].append(_success(spec, m, clean, adv).reshape(-1))
    gen.module.train()
    scores = [float(torch.cat(h).mean()) for h in per_victim_hits]
    return float(np.mean(scores)), scores


def _train(spec: AttackSpec, dataset: DatasetHandle, victims) -> AttackArtifact:
    models = _resolve(spec, victims)
    _check_shapes(spec, dataset, models)
    gen = build_generator(spec.generator)
    gen.module.train()
    opt = torch.optim.Adam(gen.module.parameters(), lr=spec.optimizer.lr, betas=spec.optimizer.betas)
    pattern = FixedPattern.from_seed(spec.pattern_seed, dataset.input_shape) if spec.mode == "universal" else None
    pattern_before = None if pattern is None else pattern.data.clone()
    val_split = "val" if "val" in dataset.splits else "train"
    x_val, _ = dataset.arrays(val_split, spec.val_limit)
    need_clean = spec.loss.kind == "least_likely" or (not spec.loss.targeted and spec.loss.reference == "prediction")

    history: list[dict] = []
    best_metric, best_state, best_epoch = -1.0, None, -1
    done = False
    for epoch in range(spec.epochs):
        total, batches = 0.0, 0
        for x, y in batch_iterator(dataset, "train", spec.batch_size, shuffle_seed=spec.seed * 100_003 + epoch):
            delta = perturbation_for(gen, spec.budget, pattern, x)
            x_hat = compose_adversarial(x, delta)
            losses = []
            for m in models:
                reference, k_ll = y, None
                if need_clean:
                    with torch.no_grad():
                        probs_clean = torch.softmax(m.module(x), dim=1)
                    k_ll = least_likely_class(probs_clean)
                    if spec.loss.reference == "prediction":
                        reference = probs_clean.argmax(dim=1)
                logits, probs = victim_forward(m, x_hat)
                losses.append(fooling_loss(spec.loss, logits, probs, reference, k_ll))
            loss = loss_multi_fool(losses, spec.lambdas)
            opt.zero_grad()
            loss.backward()
            opt.step()
            gen.step_count += 1
            total += loss.item()
            batches += 1
            if spec.max_steps is not None and gen.step_count >= spec.max_steps:
                done = True
                break
        metric, per_victim = _validate(spec, gen, pattern, models, x_val)
        history.append({
            "epoch": epoch,
            "steps": gen.step_count,
            "loss": total / max(batches, 1),
            "metric": metric,
            "metric_name": "target_success" if spec.loss.targeted else "fooling_ratio",
            "per_victim": per_victim,
        })
        log.info("epoch %d loss %.4f val %s %.4f", epoch, history[-1]["loss"], history[-1]["metric_name"], metric)
        if metric >= best_metric:
            best_metric, best_epoch = metric, epoch
            best_state = copy.deepcopy(gen.module.state_dict())
        if done:
            break

    gen.module.load_state_dict(best_state)
    gen.module.eval()
    if pattern is not None:
        assert torch.equal(pattern.data, pattern_before)
    artifact = AttackArtifact(spec, gen, pattern, None, history, best_epoch)
    if pattern is not None:
        with torch.no_grad():
            u = perturbation_for(gen, spec.budget, pattern, None)
        artifact.perturbation = Perturbation(u.data.detach(), spec.budget)
    return artifact


def train_universal(spec: AttackSpec, dataset: DatasetHandle, victims) -> AttackArtifact:
    """Learn one perturbation, generated from a fixed seeded pattern, for all images."""
    if spec.mode != "universal":
        raise ValueError("train_universal needs spec.mode == 'universal'")
    return _train(spec, dataset, victims)


def train_image_dependent(spec: AttackSpec, dataset: DatasetHandle, victims) -> AttackArtifact:
    if spec.mode != "image_dependent":
        raise ValueError("train_image_dependent needs spec.mode == 'image_dependent'")
    return _train(spec, dataset, victims)


def train_multi_fool(spec: AttackSpec, dataset: DatasetHandle, victims) -> AttackArtifact:
    """Either mode against m >= 2 victims with a weighted sum of their losses."""
    if len(spec.victims) < 2:
        raise ValueError("multi-network fooling needs at least two victims")
    shapes = {tuple(m.input_shape) for m in _resolve(spec, victims)}
    if len(shapes) != 1:
        raise ShapeError(f"victims disagree on input shape: {sorted(shapes)}")
    return _train(spec, dataset, victims)


def train_attack(spec: AttackSpec, dataset: DatasetHandle, victims) -> AttackArtifact:
    if len(spec.victims) >= 2:
        return train_multi_fool(spec, dataset, victims)
    if spec.mode == "universal":
        return train_universal(spec, dataset, victims)
    return train_image_dependent(spec, dataset, victims)


# -- inference ---------------------------------------------------------------

def apply_universal(u: Perturbation, x: torch.Tensor) -> torch.Tensor:
    if u.data.shape[0] != 1:
        raise ShapeError("a universal perturbation has batch size 1")
    return compose_adversarial(x, u)


@torch.no_grad()
def generate_perturbation(artifact: AttackArtifact, x: torch.Tensor) -> Perturbation:
    if artifact.universal:
        return artifact.perturbation
    artifact.generator.module.eval()
    return scale_to_budget(generator_forward(artifact.generator, x), artifact.spec.budget)


@torch.no_grad()
def apply_generator(artifact: AttackArtifact, x: torch.Tensor) -> torch.Tensor:
    """Image-dependent inference: generator forward, projection, composition."""
    if artifact.universal:
        raise ValueError("apply_generator needs an image-dependent artifact")
    return compose_adversarial(x, generate_perturbation(artifact, x))


def perturb(artifact: AttackArtifact, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Adversarial versions of ``x`` under either kind of artifact."""
    if artifact.universal:
        return apply_universal(artifact.perturbation, x)
    return torch.cat([apply_generator(artifact, x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)])


def save_artifact(artifact: AttackArtifact, path: str | Path) -> None:
    payload = {
        "format": "genadv-attack/1",
        "spec": artifact.spec.to_dict(),
        "generator": generator_to_payload(artifact.generator),
        "pattern_seed": None if artifact.pattern is None else artifact.pattern.seed,
        "pattern_shape": None if artifact.pattern is None else list(artifact.pattern.data.shape[1:]),
        "perturbation": None if artifact.perturbation is None else artifact.perturbation.data,
        "history": artifact.history,
        "best_epoch": artifact.best_epoch,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_artifact(path: str | Path) -> AttackArtifact:
    p = load_checkpoint(path)
    spec = AttackSpec.from_dict(p["spec"])
    gen = generator_from_payload(p["generator"])
    gen.module.eval()
    pattern = None
    if p["pattern_seed"] is not None:
        pattern = FixedPattern.from_seed(p["pattern_seed"], p["pattern_shape"])
    u = None if p["perturbation"] is None else Perturbation(p["perturbation"], spec.budget)
    return AttackArtifact(spec, gen, pattern, u, p["history"], p["best_epoch"])


# -- iterative baselines -----------------------------------------------------

def _require_linf(budget: NormBudget) -> None:
    if budget.p != INF:
        raise BudgetError("sign-gradient baselines are defined for L_inf budgets only")


def _ce_input_grad(model: VictimModel, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    logits, _ = victim_forward(model, x)
    loss = F.cross_entropy(logits, labels, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    return grad


def sign_step(x: torch.Tensor, grad: torch.Tensor, step: float) -> torch.Tensor:
    """``clip(x + step * sign(grad))``; a negative step descends."""
    return clip_to_valid(x + step * grad.sign())


def baseline_fgsm(model: VictimModel, x: torch.Tensor, gt: torch.Tensor, budget: NormBudget,
                  target: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One sign-gradient step of size eps: away from ``gt``, or toward ``target``."""
    _require_linf(budget)
    if target is not None:
        return sign_step(x, _ce_input_grad(model, x, target), -budget.epsilon).detach()
    return sign_step(x, _ce_input_grad(model, x, gt), budget.epsilon).detach()


def _clip_ball(x_adv: torch.Tensor, x: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.max(torch.min(x_adv, x + eps), x - eps)


def _check_iterative(budget: NormBudget, steps: int) -> None:
    _require_linf(budget)
    if steps < 1:
        raise ValueError("steps must be >= 1")


def _iterate(model, x, labels, budget, steps, step_size, direction):
    _check_iterative(budget, steps)
    x_adv = x.detach().clone()
    for _ in range(steps):
        grad = _ce_input_grad(model, x_adv, labels)
        x_adv = _clip_ball(sign_step(x_adv, grad, direction * step_size), x, budget.epsilon)
    return x_adv.detach()


def baseline_iterative_ll(model: VictimModel, x: torch.Tensor, budget: NormBudget, steps: int = 10,
                          step_size: Optional[float] = None) -> torch.Tensor:
    """Iterative least-likely-class attack; k_ll is fixed from the clean images."""
    _check_iterative(budget, steps)
    with torch.no_grad():
        _, probs = victim_forward(model, x)
    k_ll = least_likely_class(probs)
    step_size = budget.epsilon / steps * 2.5 if step_size is None else step_size
    return _iterate(model, x, k_ll, budget, steps, step_size, -1.0)


def baseline_bim(model: VictimModel, x: torch.Tensor, labels: torch.Tensor, budget: NormBudget,
                 steps: int = 10, step_size: Optional[float] = None) -> torch.Tensor:
    """Basic iterative (I-FGSM) non-targeted attack away from ``labels``."""
    _check_iterative(budget, steps)
    step_size = budget.epsilon / steps * 2.5 if step_size is None else step_size
    return _iterate(model, x, labels, budget, steps, step_size, 1.0)


def sample_target_classes(num_classes: int, k: int = 10, seed: int = 0) -> list[int]:
    rng = np.random.default_rng(seed)
    return sorted(int(c) for c in rng.choice(num_classes, size=min(k, num_classes), replace=False))


def stripe_target(num_classes: int = 5, bands: int = 4, size: tuple[int, int] = (32, 32)) -> torch.Tensor:
    """Static segmentation target: horizontal bands cycling through classes 1, 2, ..."""
    h, w = size
    rows = torch.arange(h) * bands // h
    classes = 1 + rows % (num_classes - 1)
    return classes[:, None].expand(h, w).clone().long()
