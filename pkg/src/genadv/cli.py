"""Command-line entry point: ``genadv <subcommand> --config run.ini [overrides]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .attacks import AttackSpec, OptimizerConfig, load_artifact, perturb, save_artifact, train_attack
from .config import ConfigError, ExperimentConfig, parse_sigmas, budget_units, validate_norm
from .core import GenAdvError, MissingCheckpointError
from .data import (
    DatasetHandle,
    load_cifar10,
    load_dataset,
    synthesize_classification_dataset,
    synthesize_segmentation_dataset,
)
from .evaluation import (
    BaselineConfig,
    EvalReport,
    destruction_rate,
    fooling_ratio,
    mean_iou,
    target_success,
    timing_study,
    transfer_matrix,
)
from .generator import GeneratorConfig
from .objectives import LossSpec
from .report import RunDir, sha256_file, write_report
from .victims import Registry, VictimTrainConfig, predict, train_victim
from .viz import export_viz

log = logging.getLogger("genadv")

TARGETED_COUNTERPART = {"nontargeted_ce": "targeted_ce", "least_likely": "targeted_ce",
                        "logit_margin_nontargeted": "logit_margin_targeted"}

SUBCOMMANDS = ("victim-train", "attack-train", "evaluate", "transfer", "blur-study", "timing", "export-viz")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genadv", description="Generative adversarial perturbations.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="override the run directory")
        if name in ("victim-train", "attack-train", "evaluate", "blur-study", "timing"):
            p.add_argument("--victim", help="victim id (comma separated id[:lambda] list for attack-train)")
        if name in ("attack-train", "blur-study", "timing"):
            p.add_argument("--epsilon", type=float, help="budget in 0-255 units")
            p.add_argument("--norm", choices=["2", "inf"])
        if name == "attack-train":
            p.add_argument("--target", help="target class index, or a .npy label map")
        if name in ("attack-train", "blur-study", "timing"):
            p.add_argument("--steps", type=int,
                           help="attack-train: max generator steps; otherwise iterative baseline steps")
        if name == "blur-study":
            p.add_argument("--sigma", help="comma separated blur sigmas")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if args.out is not None:
        cfg = cfg.with_overrides(out=args.out)
    attack, victim, evaluate = {}, {}, {}
    if getattr(args, "victim", None):
        if args.command == "victim-train":
            victim["id"] = args.victim
        else:
            attack["victims"] = args.victim
    if getattr(args, "epsilon", None) is not None:
        attack["epsilon_255"] = args.epsilon
    if getattr(args, "norm", None) is not None:
        attack["norm"] = validate_norm(args.norm)
    if getattr(args, "target", None) is not None:
        attack["target"] = args.target
        # A target on the command line implies the matching targeted loss.
        attack["loss"] = TARGETED_COUNTERPART.get(cfg.attack.loss, cfg.attack.loss)
    if getattr(args, "steps", None) is not None:
        if args.command == "attack-train":
            attack["max_steps"] = args.steps
        else:
            evaluate["baseline_steps"] = args.steps
    if getattr(args, "sigma", None) is not None:
        parse_sigmas(args.sigma)
        evaluate["sigmas"] = args.sigma
    return cfg.with_overrides(attack=attack, victim=victim, evaluate=evaluate)


def load_data(cfg: ExperimentConfig) -> DatasetHandle:
    ds = cfg.dataset
    seed = cfg.seeds["data"]
    if ds.source == "shapes10":
        return synthesize_classification_dataset(ds.n, seed)
    if ds.source == "segmentation":
        return synthesize_segmentation_dataset(ds.n, seed)
    if ds.source == "cifar10":
        return load_cifar10(ds.path)
    return load_dataset(ds.path)


def parse_target(text: str, dataset: DatasetHandle):
    if not text:
        return None
    if text.endswith(".npy"):
        path = Path(text)
        if not path.is_file():
            raise ConfigError(f"no target map at {path}")
        target = torch.from_numpy(np.load(path)).long()
        if tuple(target.shape) != tuple(dataset.input_shape[1:]):
            raise ConfigError(f"target map shape {tuple(target.shape)} != image size {dataset.input_shape[1:]}")
    else:
        try:
            target = int(text)
        except ValueError as exc:
            raise ConfigError(f"target must be a class index or .npy path, got {text!r}") from exc
        if not 0 <= target < dataset.num_classes:
            raise ConfigError(f"target {target} outside [0, {dataset.num_classes})")
    return target


def attack_spec(cfg: ExperimentConfig, dataset: DatasetHandle) -> AttackSpec:
    a = cfg.attack
    seeds = cfg.seeds
    gen_overrides = {"base_filters": a.base_filters, "in_channels": dataset.input_shape[0],
                     "out_channels": dataset.input_shape[0], "seed": seeds["init"]}
    if a.depth:
        gen_overrides["depth"] = a.depth
    n_pixels = int(np.prod(dataset.input_shape))
    return AttackSpec(
        mode=a.mode,
        loss=LossSpec(a.loss, target=parse_target(a.target, dataset), kappa=a.kappa),
        budget=cfg.budget(n_pixels),
        victims=cfg.victim_weights(),
        generator=GeneratorConfig.default(a.generator, **gen_overrides),
        optimizer=OptimizerConfig(lr=a.lr),
        epochs=a.epochs,
        batch_size=a.batch_size,
        seed=seeds["shuffle"],
        pattern_seed=seeds["pattern"] if a.mode == "universal" else None,
        max_steps=a.max_steps or None,
        val_limit=a.val_limit or None,
    )


def _provenance(cfg: ExperimentConfig, run: RunDir, dataset: DatasetHandle, **extra) -> dict:
    prov = {
        "seed": cfg.seed,
        "seeds": cfg.seeds,
        "dataset": dataset.source,
        "split": cfg.evaluate.split,
        "budget": budget_units(cfg.budget(int(np.prod(dataset.input_shape))), int(np.prod(dataset.input_shape))),
    }
    if run.attack.is_file():
        prov["attack_artifact"] = sha256_file(run.attack)
    prov.update(extra)
    return prov


def _eval_arrays(cfg: ExperimentConfig, dataset: DatasetHandle):
    return dataset.arrays(cfg.evaluate.split, cfg.evaluate.limit or None)


def _load_attack(run: RunDir):
    if not run.attack.is_file():
        raise MissingCheckpointError(f"no attack artifact at {run.attack}; run attack-train first")
    return load_artifact(run.attack)


def cmd_victim_train(cfg, run, dataset):
    v = cfg.victim
    registry = Registry(run.victims)
    model = train_victim(v.arch, dataset, VictimTrainConfig(v.epochs, v.batch_size, v.lr),
                         seed=cfg.seeds["victim"], victim_id=v.id or v.arch, registry=registry)
    report = EvalReport(_provenance(cfg, run, dataset, victim=model.id))
    split = model.meta["accuracy_split"]
    report.add("clean_accuracy", model.clean_accuracy, dataset.size(split))
    return report, f"victim_{model.id}.json"


def cmd_attack_train(cfg, run, dataset):
    spec = attack_spec(cfg, dataset)
    artifact = train_attack(spec, dataset, Registry(run.victims))
    save_artifact(artifact, run.attack)
    report = EvalReport(_provenance(cfg, run, dataset, victims=spec.victim_ids, mode=spec.mode,
                                    loss=spec.loss.kind, best_epoch=artifact.best_epoch))
    for entry in artifact.history:
        report.add(f"val_{entry['metric_name']}_epoch{entry['epoch']}", entry["metric"], spec.val_limit or 0)
    return report, "attack_train.json"


def cmd_evaluate(cfg, run, dataset):
    artifact = _load_attack(run)
    registry = Registry(run.victims)
    x, y = _eval_arrays(cfg, dataset)
    x_adv = perturb(artifact, x)
    report = EvalReport(_provenance(cfg, run, dataset, victims=artifact.spec.victim_ids))
    n = x.shape[0]
    for vid in artifact.spec.victim_ids:
        model = registry.load(vid)
        clean, adv = predict(model, x), predict(model, x_adv)
        report.add(f"{vid}.fooling_ratio", fooling_ratio(model, x, x_adv), n)
        report.add(f"{vid}.clean_accuracy", float((clean == y).double().mean()), n)
        report.add(f"{vid}.adv_accuracy", float((adv == y).double().mean()), n)
        if artifact.spec.loss.targeted:
            report.add(f"{vid}.target_success", target_success(model, x_adv, artifact.spec.loss.target), n)
        if dataset.task == "segmentation":
            report.add(f"{vid}.clean_miou", mean_iou(clean, y, dataset.num_classes), n)
            report.add(f"{vid}.adv_miou", mean_iou(adv, y, dataset.num_classes), n)
    return report, "evaluate.json"


def cmd_transfer(cfg, run, dataset):
    registry = Registry(run.victims)
    cols = [v.strip() for v in cfg.evaluate.transfer_victims.split(",") if v.strip()] or registry.ids()
    paths = [Path(p.strip()) for p in cfg.evaluate.transfer_artifacts.split(",") if p.strip()] or [run.attack]
    artifacts = []
    for p in paths:
        if not p.is_file():
            raise MissingCheckpointError(f"no attack artifact at {p}")
        artifacts.append(load_artifact(p))
    rows = ["+".join(a.spec.victim_ids) for a in artifacts]
    x, _ = _eval_arrays(cfg, dataset)
    matrix = transfer_matrix(artifacts, [registry.load(v) for v in cols], x)
    report = EvalReport(_provenance(cfg, run, dataset, artifacts=[sha256_file(p) for p in paths]))
    report.add_table("transfer_fooling_ratio", rows, cols, matrix)
    return report, "transfer.json"


def cmd_blur_study(cfg, run, dataset):
    if dataset.task != "classification":
        raise ConfigError("blur-study measures destruction rate of classifiers")
    artifact = _load_attack(run)
    model = Registry(run.victims).load(artifact.spec.victim_ids[0])
    x, y = _eval_arrays(cfg, dataset)
    baseline = BaselineConfig(cfg.evaluate.baseline, cfg.evaluate.baseline_steps)
    candidates = {
        "generative": perturb(artifact, x),
        f"iterative_{baseline.kind}": baseline.run(model, x, artifact.spec.budget),
    }
    sigmas = cfg.sigmas()
    report = EvalReport(_provenance(cfg, run, dataset, victim=model.id, baseline_steps=baseline.steps))
    values = []
    for s in sigmas:
        row = []
        for name, x_adv in candidates.items():
            d = destruction_rate(model, x, y, x_adv, s)
            report.add(f"destruction_rate.{name}.sigma{s:g}", d.rate, d.qualifying)
            row.append(d.rate)
        values.append(row)
    report.add_table("destruction_rate", [f"{s:g}" for s in sigmas], list(candidates), values)
    return report, "blur_study.json"


def cmd_timing(cfg, run, dataset):
    artifact = _load_attack(run)
    model = Registry(run.victims).load(artifact.spec.victim_ids[0])
    x, _ = dataset.arrays(cfg.evaluate.split, cfg.evaluate.timing_images)
    result = timing_study(artifact, model, x, BaselineConfig(cfg.evaluate.baseline, cfg.evaluate.baseline_steps),
                          repeats=cfg.evaluate.timing_repeats)
    report = EvalReport(_provenance(cfg, run, dataset, victim=model.id, baseline_steps=result.baseline_steps))
    n = x.shape[0]
    for name, stats in (("generator", result.generator), ("baseline", result.baseline)):
        for key, value in stats.items():
            report.add(f"{name}.{key}", value, n, ratio=False)
    report.add("speedup", result.speedup, n, ratio=False)
    return report, "timing.json"


def cmd_export_viz(cfg, run, dataset):
    artifact = _load_attack(run)
    x, _ = dataset.arrays(cfg.evaluate.split, cfg.evaluate.viz_samples)
    files = export_viz(artifact, x, run.viz)
    report = EvalReport(_provenance(cfg, run, dataset, files=[f.name for f in files]))
    return report, "export_viz.json"


COMMANDS = {
    "victim-train": cmd_victim_train,
    "attack-train": cmd_attack_train,
    "evaluate": cmd_evaluate,
    "transfer": cmd_transfer,
    "blur-study": cmd_blur_study,
    "timing": cmd_timing,
    "export-viz": cmd_export_viz,
}


def run_command(args) -> Path:
    cfg = _apply_overrides(ExperimentConfig.load(args.config), args)
    run = RunDir(cfg.out).create()
    cfg.save(run.config / "experiment.ini")
    run.write_json(run.config / "seeds.json", {"global": cfg.seed, **cfg.seeds})
    torch.manual_seed(cfg.seed)
    dataset = load_data(cfg)
    report, name = COMMANDS[args.command](cfg, run, dataset)
    run.record_checksums()
    return write_report(report, run.reports / name)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the diagnostic
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        path = run_command(args)
    except (GenAdvError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"genadv {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
