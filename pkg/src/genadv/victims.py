"""Desk-scale victim models, their training, and an on-disk registry."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .core import CorruptCheckpointError, ShapeError, load_checkpoint
from .data import DatasetHandle, batch_iterator

log = logging.getLogger(__name__)

# Warn (never fail) when a freshly trained victim is below these.
ACCURACY_FLOOR = {"classification": 0.60, "segmentation": 0.90}


class Normalize(nn.Module):
    """Fixed per-channel affine map applied inside every victim."""

    def __init__(self, channels: int, mean: float = 0.5, std: float = 0.25):
        super().__init__()
        self.register_buffer("mean", torch.full((1, channels, 1, 1), mean))
        self.register_buffer("std", torch.full((1, channels, 1, 1), std))

    def forward(self, x):
        return (x - self.mean) / self.std


def _conv_bn(c_in, c_out, k=3):
    return [nn.Conv2d(c_in, c_out, k, padding=k // 2), nn.BatchNorm2d(c_out), nn.ReLU()]


def cnn_small(in_ch: int, num_classes: int) -> nn.Module:
    return nn.Sequential(
        Normalize(in_ch),
        *_conv_bn(in_ch, 32), nn.MaxPool2d(2),
        *_conv_bn(32, 64), nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(64 * 8 * 8, 128), nn.ReLU(),
        nn.Linear(128, num_classes),
    )


def cnn_deep(in_ch: int, num_classes: int) -> nn.Module:
    return nn.Sequential(
        Normalize(in_ch),
        *_conv_bn(in_ch, 32), *_conv_bn(32, 32), nn.MaxPool2d(2),
        *_conv_bn(32, 64), *_conv_bn(64, 64), nn.MaxPool2d(2),
        *_conv_bn(64, 128), nn.MaxPool2d(2),
        nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        nn.Linear(128, num_classes),
    )


def cnn_wide(in_ch: int, num_classes: int) -> nn.Module:
    return nn.Sequential(
        Normalize(in_ch),
        *_conv_bn(in_ch, 64, 5), nn.MaxPool2d(2),
        *_conv_bn(64, 128, 5), nn.MaxPool2d(4),
        nn.Flatten(),
        nn.Linear(128 * 4 * 4, num_classes),
    )


class TinyFCN(nn.Module):
    """Stride-4 encoder, 1x1 class scores, two 2x transposed-conv upsamplings.

    The stride-2 features contribute a second score map before the last
    upsampling, in the spirit of FCN-16s.
    """

    def __init__(self, in_ch: int, num_classes: int):
        super().__init__()
        self.norm = Normalize(in_ch)
        self.enc1 = nn.Sequential(*_conv_bn(in_ch, 32))
        self.enc2 = nn.Sequential(nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.BatchNorm2d(64), nn.ReLU())
        self.enc3 = nn.Sequential(nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.BatchNorm2d(64), nn.ReLU(),
                                  *_conv_bn(64, 64))
        self.score8 = nn.Conv2d(64, num_classes, 1)
        self.score16 = nn.Conv2d(64, num_classes, 1)
        self.up1 = nn.ConvTranspose2d(num_classes, num_classes, 4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(num_classes, num_classes, 4, stride=2, padding=1)

    def forward(self, x):
        h1 = self.enc1(self.norm(x))
        h2 = self.enc2(h1)
        h3 = self.enc3(h2)
        s = self.up1(self.score8(h3)) + self.score16(h2)
        return self.up2(s)


ARCHITECTURES = {
    "cnn_small": ("classification", cnn_small),
    "cnn_deep": ("classification", cnn_deep),
    "cnn_wide": ("classification", cnn_wide),
    "fcn_tiny": ("segmentation", TinyFCN),
}


@dataclass
class VictimModel:
    id: str
    arch: str
    task: str
    num_classes: int
    input_shape: tuple[int, int, int]
    module: nn.Module
    clean_accuracy: float = float("nan")
    frozen: bool = False
    meta: dict = field(default_factory=dict)

    def freeze(self) -> "VictimModel":
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def parameters(self) -> dict[str, torch.Tensor]:
        return self.module.state_dict()

    def snapshot(self) -> dict[str, torch.Tensor]:
        """Deep copy of every parameter and buffer, for bitwise comparisons."""
        return {k: v.detach().clone() for k, v in self.module.state_dict().items()}


def build_victim(arch: str, num_classes: int, input_shape=(3, 32, 32), victim_id: Optional[str] = None,
                 seed: int = 0) -> VictimModel:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown victim arch {arch!r}; choose from {sorted(ARCHITECTURES)}")
    task, factory = ARCHITECTURES[arch]
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = factory(input_shape[0], num_classes)
    return VictimModel(victim_id or arch, arch, task, num_classes, tuple(input_shape), module)


def _check_input(model: VictimModel, x: torch.Tensor) -> None:
    if x.dim() != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"victim {model.id} expects (B, {model.input_shape}), got {tuple(x.shape)}")


def victim_forward(model: VictimModel, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Logits and softmax probabilities over the class axis (dim 1)."""
    _check_input(model, x)
    logits = model.module(x)
    return logits, torch.softmax(logits, dim=1)


@torch.no_grad()
def predict(model: VictimModel, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    """Argmax labels (first maximum on ties), per sample or per pixel."""
    _check_input(model, x)
    was_training = model.module.training
    model.module.eval()
    out = torch.cat([model.module(x[i:i + batch_size]).argmax(dim=1) for i in range(0, x.shape[0], batch_size)])
    model.module.train(was_training)
    return out


@dataclass(frozen=True)
class VictimTrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.0
    hflip: bool = True


def evaluate_accuracy(model: VictimModel, dataset: DatasetHandle, split: str) -> float:
    x, y = dataset.arrays(split)
    pred = predict(model, x)
    return float((pred == y).double().mean())


def train_victim(
    arch: str,
    dataset: DatasetHandle,
    config: VictimTrainConfig = VictimTrainConfig(),
    seed: int = 0,
    victim_id: Optional[str] = None,
    registry: Optional["Registry"] = None,
) -> VictimModel:
    """Train a victim with Adam and cross-entropy, then freeze it.

    Clean accuracy (top-1 or per-pixel) is measured on the test split, or
    on validation/train when the dataset has no test split.
    """
    task, _ = ARCHITECTURES.get(arch, (None, None))
    if task is None:
        raise ValueError(f"unknown victim arch {arch!r}")
    if task != dataset.task:
        raise ValueError(f"{arch} is a {task} model but the dataset is {dataset.task}")
    if dataset.size("train") == 0:
        raise ValueError("training split is empty")

    model = build_victim(arch, dataset.num_classes, dataset.input_shape, victim_id, seed)
    opt = torch.optim.Adam(model.module.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    flip_gen = torch.Generator().manual_seed(seed + 1)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        for epoch in range(config.epochs):
            model.module.train()
            total, count = 0.0, 0
            for x, y in batch_iterator(dataset, "train", config.batch_size, shuffle_seed=seed * 1000 + epoch):
                if config.hflip:
                    flip = torch.rand(x.shape[0], generator=flip_gen) < 0.5
                    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
                    if task == "segmentation":
                        y = torch.where(flip[:, None, None], y.flip(-1), y)
                loss = F.cross_entropy(model.module(x), y)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * x.shape[0]
                count += x.shape[0]
            log.info("victim %s epoch %d loss %.4f", model.id, epoch, total / max(count, 1))

    model.freeze()
    split = next(s for s in ("test", "val", "train") if s in dataset.splits)
    model.clean_accuracy = evaluate_accuracy(model, dataset, split)
    model.meta = {"dataset": dataset.source, "seed": seed, "accuracy_split": split}
    if model.clean_accuracy < ACCURACY_FLOOR[task]:
        log.warning("victim %s clean accuracy %.3f below floor %.2f", model.id, model.clean_accuracy,
                    ACCURACY_FLOOR[task])
    if registry is not None:
        registry.save(model)
    return model


_ID_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class Registry:
    """Directory of victim checkpoints keyed by id (``<root>/<id>.pt``)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, victim_id: str) -> Path:
        if not _ID_RE.match(victim_id):
            raise ValueError(f"invalid victim id {victim_id!r}")
        return self.root / f"{victim_id}.pt"

    def ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.pt"))

    def __contains__(self, victim_id: str) -> bool:
        return self.path(victim_id).is_file()

    def save(self, model: VictimModel) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.path(model.id)
        torch.save(
            {
                "format": "genadv-victim/1",
                "id": model.id,
                "arch": model.arch,
                "task": model.task,
                "num_classes": model.num_classes,
                "input_shape": list(model.input_shape),
                "clean_accuracy": model.clean_accuracy,
                "meta": model.meta,
                "state_dict": model.module.state_dict(),
            },
            path,
        )
        return path

    def load(self, victim_id: str) -> VictimModel:
        payload = load_checkpoint(self.path(victim_id))
        try:
            model = build_victim(payload["arch"], payload["num_classes"], tuple(payload["input_shape"]),
                                 payload["id"])
            model.module.load_state_dict(payload["state_dict"])
        except (KeyError, TypeError, RuntimeError, ValueError) as exc:
            raise CorruptCheckpointError(f"malformed victim checkpoint {victim_id}: {exc}") from exc
        model.clean_accuracy = payload["clean_accuracy"]
        model.meta = payload.get("meta", {})
        return model.freeze()
