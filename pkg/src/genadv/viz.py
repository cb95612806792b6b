"""PNG export of perturbations, clean and adversarial images."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .attacks import AttackArtifact, generate_perturbation
from .core import ShapeError
from .projection import compose_adversarial


def enhance(delta: torch.Tensor) -> torch.Tensor:
    """Per-image min-max stretch to [0, 1]; a constant image maps to 0.5."""
    flat = delta.reshape(delta.shape[0], -1)
    lo = flat.min(dim=1).values.view(-1, *[1] * (delta.dim() - 1))
    hi = flat.max(dim=1).values.view(-1, *[1] * (delta.dim() - 1))
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (delta - lo) / safe, torch.full_like(delta, 0.5))


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(C, H, W) in [0, 1] to an (H, W, C) uint8 array, rounding to nearest."""
    arr = image.detach().clamp(0, 1).mul(255).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def save_png(image: torch.Tensor, path: str | Path) -> Path:
    if image.dim() != 3 or image.shape[0] not in (1, 3):
        raise ShapeError(f"expected a (1|3, H, W) image, got {tuple(image.shape)}")
    arr = to_uint8(image)
    Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr).save(path, format="PNG")
    return Path(path)


def read_png(path: str | Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0


def export_viz(artifact: AttackArtifact, x_sample: torch.Tensor, out_dir: str | Path) -> list[Path]:
    """Write ``<i>_perturbation.png`` (enhanced), ``<i>_clean.png`` and ``<i>_adversarial.png``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write visualizations to {out_dir}: {exc}") from exc
    delta = generate_perturbation(artifact, x_sample)
    x_adv = compose_adversarial(x_sample, delta)
    data = delta.data.expand_as(x_sample)
    shown = enhance(data)
    written = []
    for i in range(x_sample.shape[0]):
        for name, img in (("perturbation", shown[i]), ("clean", x_sample[i]), ("adversarial", x_adv[i])):
            written.append(save_png(img, out_dir / f"{i:03d}_{name}.png"))
    return written
