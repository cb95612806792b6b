"""Deterministic JSON reports and run-directory bookkeeping."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

from .evaluation import EvalReport

RUN_SUBDIRS = ("config", "checkpoints", "reports", "viz")


def _sanitize(obj):
    # JSON has no NaN/inf; encode them as null so documents stay parseable.
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    return obj


def dumps_report(report: EvalReport) -> str:
    return json.dumps(_sanitize(report.to_dict()), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(report: EvalReport, out_path: str | Path) -> Path:
    """Write ``report`` as JSON with sorted keys; floats round-trip exactly."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(dumps_report(report))
    return out_path


def read_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """``config/``, ``checkpoints/``, ``reports/`` and ``viz/`` under one root."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def create(self) -> "RunDir":
        for sub in RUN_SUBDIRS:
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        return self

    @property
    def config(self) -> Path:
        return self.root / "config"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def victims(self) -> Path:
        return self.checkpoints / "victims"

    @property
    def attack(self) -> Path:
        return self.checkpoints / "attack.pt"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def viz(self) -> Path:
        return self.root / "viz"

    def write_json(self, path: Path, data) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_sanitize(data), sort_keys=True, indent=2) + "\n")

    def record_checksums(self) -> dict[str, str]:
        """Hash every checkpoint file into ``checkpoints/checksums.json``."""
        sums = {
            str(p.relative_to(self.checkpoints)): sha256_file(p)
            for p in sorted(self.checkpoints.rglob("*.pt"))
        }
        self.write_json(self.checkpoints / "checksums.json", sums)
        return sums
