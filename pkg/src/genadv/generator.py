"""Perturbation generators: a U-Net and a ResNet encoder/transformer/decoder.

Both map (B, C_in, H, W) to (B, C_out, H, W) with a linear output; the norm
budget is enforced afterwards by :func:`genadv.projection.scale_to_budget`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from .core import CorruptCheckpointError, FixedPattern, ShapeError, load_checkpoint

ARCHS = ("unet", "resnet")
RESNET_DOWNSAMPLINGS = 2


@dataclass(frozen=True)
class GeneratorConfig:
    arch: str = "resnet"
    base_filters: int = 32
    depth: int = 4
    in_channels: int = 3
    out_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown generator arch {self.arch!r}; choose from {ARCHS}")
        if self.depth < 1 or self.base_filters < 1:
            raise ValueError("depth and base_filters must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @classmethod
    def default(cls, arch: str, **overrides) -> "GeneratorConfig":
        """Desk-scale defaults: U-Net depth 3, ResNet 4 blocks, 32 filters."""
        depth = 3 if arch == "unet" else 4
        return cls(**{"arch": arch, "base_filters": 32, "depth": depth, **overrides})

    @property
    def downsamplings(self) -> int:
        return self.depth if self.arch == "unet" else RESNET_DOWNSAMPLINGS

    def check_input(self, height: int, width: int) -> None:
        k = 2 ** self.downsamplings
        if height % k or width % k:
            raise ShapeError(
                f"{self.arch} generator needs H and W divisible by {k}, got {height}x{width}"
            )


class UNetGenerator(nn.Module):
    """Encoder/decoder with concatenating skips at every resolution."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        f = [cfg.base_filters * 2**i for i in range(cfg.depth + 1)]
        # Batch statistics are used in train and eval alike (no running
        # averages), so training-time and inference-time outputs agree.
        bn = lambda c: nn.BatchNorm2d(c, track_running_stats=False)  # noqa: E731

        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, f[0], 3, padding=1), bn(f[0]), nn.LeakyReLU(0.2)
        )
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv2d(f[i], f[i + 1], 4, stride=2, padding=1), bn(f[i + 1]), nn.LeakyReLU(0.2))
            for i in range(cfg.depth)
        )
        up = []
        for i in reversed(range(cfg.depth)):
            c_in = f[i + 1] if i == cfg.depth - 1 else 2 * f[i + 1]
            up.append(nn.Sequential(nn.ConvTranspose2d(c_in, f[i], 4, stride=2, padding=1), bn(f[i]), nn.ReLU()))
        self.up = nn.ModuleList(up)
        self.head = nn.Conv2d(2 * f[0], cfg.out_channels, 1)
        # Indices (0 = full resolution) of skips to replace by zeros; diagnostics only.
        self.zeroed_skips: set[int] = set()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(skips[-1]))
        h = skips.pop()
        for block in self.up:
            h = block(h)
            level = len(skips) - 1
            s = skips.pop()
            if level in self.zeroed_skips:
                s = torch.zeros_like(s)
            h = torch.cat([h, s], dim=1)
        return self.head(h)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """7x7 stem, two stride-2 convs, ``depth`` residual blocks, two 2x upsamplings."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        f = cfg.base_filters
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(cfg.in_channels, f, 7),
            nn.InstanceNorm2d(f, affine=True),
            nn.ReLU(),
        ]
        for i in range(RESNET_DOWNSAMPLINGS):
            c = f * 2**i
            layers += [nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * c, affine=True), nn.ReLU()]
        width = f * 2**RESNET_DOWNSAMPLINGS
        layers += [ResidualBlock(width) for _ in range(cfg.depth)]
        for i in reversed(range(RESNET_DOWNSAMPLINGS)):
            c = f * 2 ** (i + 1)
            layers += [
                nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(c // 2, affine=True),
                nn.ReLU(),
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(f, cfg.out_channels, 7)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


@dataclass
class GeneratorHandle:
    config: GeneratorConfig
    module: nn.Module
    step_count: int = 0

    def parameters(self) -> dict[str, torch.Tensor]:
        return dict(self.module.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.module.parameters())


def _init_weights(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_generator(config: GeneratorConfig) -> GeneratorHandle:
    module = UNetGenerator(config) if config.arch == "unet" else ResnetGenerator(config)
    _init_weights(module, config.seed)
    return GeneratorHandle(config, module)


def generator_forward(gen: GeneratorHandle, inputs: torch.Tensor | FixedPattern) -> torch.Tensor:
    """Raw (unprojected) generator output for an image batch or fixed pattern."""
    x = inputs.data if isinstance(inputs, FixedPattern) else inputs
    if x.dim() != 4 or x.shape[1] != gen.config.in_channels:
        raise ShapeError(
            f"generator expects (B, {gen.config.in_channels}, H, W), got {tuple(x.shape)}"
        )
    gen.config.check_input(x.shape[2], x.shape[3])
    return gen.module(x)


def save_generator(
    gen: GeneratorHandle, path: str | Path, pattern: Optional[FixedPattern] = None
) -> None:
    payload = {
        "format": "genadv-generator/1",
        "config": dataclasses.asdict(gen.config),
        "state_dict": gen.module.state_dict(),
        "step_count": gen.step_count,
        "pattern_seed": None if pattern is None else pattern.seed,
        "pattern_shape": None if pattern is None else list(pattern.data.shape[1:]),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def generator_to_payload(gen: GeneratorHandle) -> dict:
    return {
        "config": dataclasses.asdict(gen.config),
        "state_dict": {k: v.detach().clone() for k, v in gen.module.state_dict().items()},
        "step_count": gen.step_count,
    }


def generator_from_payload(payload: dict) -> GeneratorHandle:
    cfg = GeneratorConfig(**payload["config"])
    gen = build_generator(cfg)
    gen.module.load_state_dict(payload["state_dict"])
    gen.step_count = int(payload.get("step_count", 0))
    return gen


def load_generator(path: str | Path) -> tuple[GeneratorHandle, Optional[FixedPattern]]:
    payload = load_checkpoint(path)
    try:
        gen = generator_from_payload(payload)
    except (KeyError, TypeError, RuntimeError) as exc:
        raise CorruptCheckpointError(f"malformed generator checkpoint {path}: {exc}") from exc
    pattern = None
    if payload.get("pattern_seed") is not None:
        pattern = FixedPattern.from_seed(payload["pattern_seed"], payload["pattern_shape"])
    return gen, pattern
