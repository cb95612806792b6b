"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Environment variables:
  GENADV_CIFAR10_DIR        directory with the CIFAR-10 binary batches; the
                            CIFAR-10 criteria fail without it and report the
                            values measured on the procedural stand-in.
  GENADV_ACCEPTANCE_CACHE   directory in which trained victims and attack
                            artifacts are kept between sessions.
"""

import math
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from genadv.attacks import (
    AttackSpec,
    baseline_bim,
    baseline_fgsm,
    baseline_iterative_ll,
    generate_perturbation,
    load_artifact,
    perturb,
    sample_target_classes,
    save_artifact,
    train_attack,
)
from genadv.core import MissingCheckpointError, NormBudget
from genadv.data import (
    CIFAR_RECORD,
    DatasetHandle,
    encode_cifar10_batch,
    load_cifar10,
    parse_cifar10_batch,
    synthesize_classification_dataset,
    synthesize_segmentation_dataset,
)
from genadv.evaluation import (
    BaselineConfig,
    EvalReport,
    destruction_rate,
    fooling_ratio,
    gaussian_blur,
    mean_iou,
    target_success,
    timing_study,
    transfer_matrix,
)
from genadv.generator import GeneratorConfig
from genadv.objectives import (
    LossSpec,
    cross_entropy,
    loss_least_likely,
    loss_logit_margin,
    loss_multi_fool,
    loss_nontargeted_ce,
    loss_targeted,
)
from genadv.projection import scale_to_budget
from genadv.report import read_report, write_report
from genadv.victims import Registry, VictimTrainConfig, predict, train_victim, victim_forward

pytestmark = pytest.mark.experiment

DATA_SEED = 1
SEG_TARGET = Path(__file__).parent / "fixtures" / "stripe_target.npy"


# shared experiment state -----------------------------------------------------------

@pytest.fixture(scope="session")
def cache(tmp_path_factory):
    root = os.environ.get("GENADV_ACCEPTANCE_CACHE")
    path = Path(root) if root else tmp_path_factory.mktemp("acceptance")
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def cls_data():
    root = os.environ.get("GENADV_CIFAR10_DIR")
    if root:
        return load_cifar10(root)
    return synthesize_classification_dataset(12000, seed=DATA_SEED)


@pytest.fixture(scope="session")
def registry(cache, cls_data):
    return Registry(cache / f"victims_{data_key(cls_data)}")


def cached_victim(registry, arch, dataset, epochs, seed=0):
    if arch in registry:
        return registry.load(arch)
    return train_victim(arch, dataset, VictimTrainConfig(epochs=epochs, batch_size=128), seed=seed,
                        victim_id=arch, registry=registry)


def cached_attack(cache, name, spec, dataset, victims):
    path = cache / f"attack_{data_key(dataset)}_{name}.pt"
    try:
        art = load_artifact(path)
        if art.spec.to_dict() == spec.to_dict():
            return art
    except MissingCheckpointError:
        pass
    art = train_attack(spec, dataset, victims)
    save_artifact(art, path)
    return art


@pytest.fixture(scope="session")
def victim_a(registry, cls_data):
    return cached_victim(registry, "cnn_small", cls_data, epochs=8)


@pytest.fixture(scope="session")
def victim_b(registry, cls_data):
    return cached_victim(registry, "cnn_deep", cls_data, epochs=4, seed=1)


@pytest.fixture(scope="session")
def victim_c(registry, cls_data):
    return cached_victim(registry, "cnn_wide", cls_data, epochs=4, seed=2)


@pytest.fixture(scope="session")
def test_split(cls_data):
    return cls_data.arrays("test")


def linf(e255):
    return NormBudget("inf", e255 / 255)


def classification_spec(mode, loss, budget, victims, epochs, seed=0):
    return AttackSpec(mode, loss, budget, victims, GeneratorConfig.default("resnet"), epochs=epochs,
                      batch_size=32, seed=seed, val_limit=1000)


@pytest.fixture(scope="session")
def image_dependent_attack(cache, cls_data, victim_a):
    spec = classification_spec("image_dependent", LossSpec(), linf(8), ["cnn_small"], epochs=5)
    return cached_attack(cache, "imgdep_nt_8", spec, cls_data, [victim_a])


def is_cifar(dataset):
    return dataset.source.startswith("cifar10")


def data_key(dataset):
    return "cifar10" if is_cifar(dataset) else dataset.source.split(":")[0]


def source_note(dataset):
    return "" if is_cifar(dataset) else f" [measured on stand-in {data_key(dataset)!r}; CIFAR-10 not available]"


def small_attack_runs(victims, dataset):
    """Short runs of every training op, for the invariant criteria."""
    x, y = dataset.arrays("train", 64)
    xv, yv = dataset.arrays("val", 32)
    small = DatasetHandle("classification", dataset.num_classes, dataset.input_shape,
                          {"train": (x, y), "val": (xv, yv)}, "small")
    gen = GeneratorConfig.default("resnet", base_filters=8, depth=1)
    runs = []
    for mode in ("universal", "image_dependent"):
        for ids, budget in (([victims[0].id], linf(10)), ([victims[0].id], NormBudget("2", 0.8)),
                            ([v.id for v in victims], linf(10))):
            spec = AttackSpec(mode, LossSpec(), budget, ids, gen, epochs=1, batch_size=16, max_steps=4)
            models = [v for v in victims if v.id in ids]
            runs.append((spec, models, small))
    return runs


# 1 -------------------------------------------------------------------------------------

def test_criterion_01_budget_invariant(record_criterion, victim_a, victim_b, cls_data, test_split):
    x = test_split[0][:64]
    y = test_split[1][:64]
    checked = violations = 0
    for spec, models, data in small_attack_runs([victim_a, victim_b], cls_data):
        delta = generate_perturbation(train_attack(spec, data, models), x)
        norms = delta.norms()
        checked += norms.numel()
        violations += int((norms > spec.budget.epsilon * (1 + 1e-6)).sum())
    b = linf(8)
    for x_adv in (baseline_fgsm(victim_a, x, y, b), baseline_iterative_ll(victim_a, x, b, steps=10),
                  baseline_bim(victim_a, x, y, b, steps=10)):
        dist = (x_adv - x).flatten(1).abs().amax(1)
        checked += dist.numel()
        violations += int((dist > b.epsilon * (1 + 1e-6)).sum())
    gen = torch.Generator().manual_seed(0)
    idem = 0.0
    for p, eps in (("inf", 10 / 255), ("2", 1.12)):
        budget = NormBudget(p, eps)
        raw = torch.randn(32, 3, 32, 32, generator=gen) * torch.logspace(-4, 1, 32).view(-1, 1, 1, 1)
        once = scale_to_budget(raw, budget)
        idem = max(idem, float((scale_to_budget(once.data, budget).data - once.data).abs().max()))
    ok = violations == 0 and idem <= 1e-6
    record_criterion(1, ok, "budget invariant",
                     f"{violations} violations in {checked} perturbations; idempotence error {idem:.2e}")
    assert ok


# 2 -------------------------------------------------------------------------------------

def test_criterion_02_frozen_victims(record_criterion, victim_a, victim_b, cls_data):
    changed = []
    pipelines = set()
    for spec, models, data in small_attack_runs([victim_a, victim_b], cls_data):
        before = [m.snapshot() for m in models]
        train_attack(spec, data, models)
        pipelines.add("multi_fool" if len(models) > 1 else spec.mode)
        for m, snap in zip(models, before):
            after = m.snapshot()
            changed += [f"{m.id}.{k}" for k in snap if not torch.equal(snap[k], after[k])]
    ok = not changed and pipelines == {"universal", "image_dependent", "multi_fool"}
    record_criterion(2, ok, "frozen victims", f"pipelines {sorted(pipelines)}; changed tensors: {changed or 'none'}")
    assert ok


# 3 -------------------------------------------------------------------------------------

def _fd_error(kind, c):
    gen = torch.Generator().manual_seed(c)
    logits = torch.randn(4, c, generator=gen, dtype=torch.float64)
    index = torch.randint(0, c, (4,), generator=gen)

    def f(z):
        probs = torch.softmax(z, dim=1)
        return {
            "nontargeted_ce": lambda: loss_nontargeted_ce(probs, index),
            "least_likely": lambda: loss_least_likely(probs, index),
            "targeted_ce": lambda: loss_targeted(probs, index),
            "logit_margin_targeted": lambda: loss_logit_margin(z, index, "targeted", kappa=100.0),
            "logit_margin_nontargeted": lambda: loss_logit_margin(z, index, "nontargeted", kappa=100.0),
        }[kind]()

    z = logits.clone().requires_grad_(True)
    f(z).backward()
    fd = torch.zeros_like(logits)
    h = 1e-6
    for i in range(logits.numel()):
        e = torch.zeros(logits.numel(), dtype=torch.float64)
        e[i] = h
        e = e.view_as(logits)
        fd.view(-1)[i] = (f(logits + e) - f(logits - e)) / (2 * h)
    return float((z.grad - fd).norm() / fd.norm())


def test_criterion_03_loss_correctness(record_criterion):
    uniform = torch.full((1, 10), 0.1, dtype=torch.float64)
    e_inv = torch.full((1, 3), (1 - math.exp(-1)) / 2, dtype=torch.float64)
    e_inv[0, 0] = math.exp(-1)
    one_hot = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    ln10 = math.log(10)
    checks = [
        (cross_entropy(uniform, 3).item(), ln10),
        (cross_entropy(e_inv, 0).item(), 1.0),
        (cross_entropy(one_hot, 0).item(), 0.0),
        (loss_nontargeted_ce(uniform, 0).item(), -math.log(ln10)),
        (loss_nontargeted_ce(e_inv, 0).item(), 0.0),
        (loss_nontargeted_ce(one_hot, 0).item(), -math.log(1e-12)),
        (loss_least_likely(uniform, 4).item(), math.log(ln10)),
        (loss_least_likely(e_inv, 0).item(), 0.0),
        (loss_least_likely(one_hot, 0).item(), math.log(1e-12)),
        (loss_targeted(uniform, 4).item(), math.log(ln10)),
        (loss_targeted(e_inv, 0).item(), 0.0),
        (loss_targeted(one_hot, 0).item(), math.log(1e-12)),
    ]
    closed = max(abs(a - b) for a, b in checks)
    kinds = ["nontargeted_ce", "least_likely", "targeted_ce", "logit_margin_targeted", "logit_margin_nontargeted"]
    fd = max(_fd_error(k, c) for k in kinds for c in (3, 10))
    values = [0.37, -2.5, 1e5]
    reduction_exact = loss_multi_fool([torch.tensor(v, dtype=torch.float64) for v in values],
                                      [1.0, 0.0, 0.0]).item() == values[0]
    ok = closed <= 1e-6 and fd < 1e-3 and reduction_exact
    record_criterion(3, ok, "loss correctness",
                     f"closed-form max error {closed:.2e}; FD max rel error {fd:.2e}; "
                     f"lambda reduction exact: {reduction_exact}")
    assert ok


# 4 -------------------------------------------------------------------------------------

def _brute_rate(pairs):
    hits = total = 0
    for hit in pairs:
        total += 1
        hits += 1 if hit else 0
    return hits / total


def _brute_miou(pred, gt, c):
    ratios = []
    p, g = pred.flatten().tolist(), gt.flatten().tolist()
    for k in range(c):
        inter = sum(1 for a, b in zip(p, g) if a == k and b == k)
        union = sum(1 for a, b in zip(p, g) if a == k or b == k)
        if union:
            ratios.append(inter / union)
    total = 0.0
    for r in ratios:
        total += r
    return total / len(ratios)


def test_criterion_04_metric_oracles(record_criterion, victim_a, test_split):
    mismatches = []
    x_all, y_all = test_split
    for seed in range(5):
        gen = torch.Generator().manual_seed(seed)
        idx = torch.randperm(x_all.shape[0], generator=gen)[:16]
        x, y = x_all[idx], y_all[idx]
        x_adv = (x + 0.15 * torch.randn(x.shape, generator=gen)).clamp(0, 1)
        clean, adv = predict(victim_a, x).tolist(), predict(victim_a, x_adv).tolist()
        if fooling_ratio(victim_a, x, x_adv) != _brute_rate(a != b for a, b in zip(clean, adv)):
            mismatches.append(f"fooling_ratio/{seed}")
        if target_success(victim_a, x_adv, 3) != _brute_rate(b == 3 for b in adv):
            mismatches.append(f"target_success/{seed}")
        d = destruction_rate(victim_a, x, y, x_adv, 1.0)
        blurred = predict(victim_a, gaussian_blur(x_adv, 1.0)).tolist()
        q = [i for i in range(16) if clean[i] == y[i] and adv[i] != y[i]]
        expect = (sum(1 for i in q if blurred[i] == y[i]) / len(q)) if q else None
        if d.rate != expect:
            mismatches.append(f"destruction_rate/{seed}")
        gt = torch.randint(0, 5, (16, 32, 32), generator=gen)
        pred = torch.where(torch.rand(16, 32, 32, generator=gen) < 0.5, gt, torch.randint(0, 5, (16, 32, 32), generator=gen))
        if mean_iou(pred, gt, 5) != _brute_miou(pred, gt, 5):
            mismatches.append(f"mean_iou/{seed}")
    ok = not mismatches
    record_criterion(4, ok, "metric oracles", f"20 exact comparisons on 16-sample fixtures; mismatches: {mismatches or 'none'}")
    assert ok


# 5 -------------------------------------------------------------------------------------

def test_criterion_05_round_trips(record_criterion, tmp_path, victim_a, image_dependent_attack, test_split):
    rng = np.random.default_rng(0)
    records = rng.integers(0, 256, size=(10000, CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] %= 10
    raw = records.tobytes()
    cifar_ok = encode_cifar10_batch(*parse_cifar10_batch(raw)) == raw

    x = test_split[0][:64]
    reg = Registry(tmp_path / "reg")
    reg.save(victim_a)
    victim_ok = torch.equal(victim_forward(reg.load(victim_a.id), x)[0], victim_forward(victim_a, x)[0])
    save_artifact(image_dependent_attack, tmp_path / "attack.pt")
    attack_ok = torch.equal(perturb(load_artifact(tmp_path / "attack.pt"), x), perturb(image_dependent_attack, x))

    rep = EvalReport({"seed": 0})
    rep.add("fooling_ratio", 1 / 3, 3)
    rep.add("destruction_rate", None, 0)
    rep.add_table("t", ["a"], ["b", "c"], [[0.1, 0.7]])
    report_ok = read_report(write_report(rep, tmp_path / "r.json")).to_dict() == rep.to_dict()

    ok = cifar_ok and victim_ok and attack_ok and report_ok
    record_criterion(5, ok, "format round-trips",
                     f"cifar10 byte-exact {cifar_ok}; victim {victim_ok}; generator {attack_ok}; report {report_ok}")
    assert ok


# 6 -------------------------------------------------------------------------------------

def test_criterion_06_overfit_sanity(record_criterion, desk_victims, batch8):
    # Same victim, batch and budget as the pinned oracle runs of the attack tests.
    victim = desk_victims[0]
    x = batch8.splits["train"][0]
    results = {}
    for mode in ("universal", "image_dependent"):
        for loss in (LossSpec(), LossSpec("targeted_ce", target=3)):
            spec = AttackSpec(mode, loss, linf(48), [victim.id], GeneratorConfig.default("resnet"),
                              epochs=500, batch_size=8, max_steps=500)
            x_adv = perturb(train_attack(spec, batch8, [victim]), x)
            key = f"{mode}/{'targeted' if loss.targeted else 'nontargeted'}"
            results[key] = target_success(victim, x_adv, 3) if loss.targeted else fooling_ratio(victim, x, x_adv)
    ok = all(v == 1.0 for v in results.values())
    record_criterion(6, ok, "overfit sanity (8 images, 500 steps, Linf 48/255)",
                     ", ".join(f"{k} {v:.3f}" for k, v in results.items()))
    assert ok


# 7-9: CIFAR-10 classifier ----------------------------------------------------------------

def test_criterion_07_image_dependent_nontargeted(record_criterion, cls_data, victim_a, image_dependent_attack,
                                                  test_split):
    x, _ = test_split
    fr = fooling_ratio(victim_a, x, perturb(image_dependent_attack, x))
    ok = is_cifar(cls_data) and victim_a.clean_accuracy >= 0.60 and fr >= 0.70
    record_criterion(7, ok, "image-dependent non-targeted, Linf 8/255",
                     f"clean acc {victim_a.clean_accuracy:.3f} (>= 0.60), fooling ratio {fr:.3f} (>= 0.70) "
                     f"on {x.shape[0]} test images{source_note(cls_data)}")
    assert ok


def test_criterion_08_universal_nontargeted(record_criterion, cache, cls_data, victim_a, test_split):
    spec = classification_spec("universal", LossSpec(), linf(10), ["cnn_small"], epochs=5)
    art = cached_attack(cache, "univ_nt_10", spec, cls_data, [victim_a])
    x, _ = test_split
    fr = fooling_ratio(victim_a, x, perturb(art, x))
    ok = is_cifar(cls_data) and victim_a.clean_accuracy >= 0.60 and fr >= 0.50
    record_criterion(8, ok, "universal non-targeted, Linf 10/255",
                     f"fooling ratio {fr:.3f} (>= 0.50){source_note(cls_data)}")
    assert ok


def test_criterion_09_universal_targeted(record_criterion, cache, cls_data, victim_a, test_split):
    x, _ = test_split
    classes = sample_target_classes(cls_data.num_classes, 10, seed=0)
    success = {}
    for c in classes:
        spec = classification_spec("universal", LossSpec("targeted_ce", target=c), linf(10), ["cnn_small"], epochs=3)
        art = cached_attack(cache, f"univ_t{c}_10", spec, cls_data, [victim_a])
        success[c] = target_success(victim_a, perturb(art, x), c)
    fixed = classes[0]
    mean = float(np.mean(list(success.values())))
    ok = is_cifar(cls_data) and success[fixed] >= 0.30 and mean >= 0.25
    record_criterion(9, ok, "universal targeted, Linf 10/255",
                     f"class {fixed} success {success[fixed]:.3f} (>= 0.30), mean over {classes} {mean:.3f} (>= 0.25)"
                     f"{source_note(cls_data)}")
    assert ok


# 10: segmentation --------------------------------------------------------------------------

def test_criterion_10_segmentation(record_criterion, cache):
    seg = synthesize_segmentation_dataset(3000, seed=DATA_SEED)
    reg = Registry(cache / "victims_segmentation")
    fcn = cached_victim(reg, "fcn_tiny", seg, epochs=40)
    x, y = seg.arrays("test")
    target = torch.from_numpy(np.load(SEG_TARGET)).long()
    gen = GeneratorConfig.default("resnet")
    targeted = cached_attack(cache, "seg_univ_stripe_20",
                             AttackSpec("universal", LossSpec("targeted_ce", target=target), linf(20), ["fcn_tiny"],
                                        gen, epochs=5, batch_size=32), seg, [fcn])
    nontargeted = cached_attack(cache, "seg_imgdep_nt_20",
                                AttackSpec("image_dependent", LossSpec(), linf(20), ["fcn_tiny"], gen, epochs=5,
                                           batch_size=32), seg, [fcn])
    ts = target_success(fcn, perturb(targeted, x), target)
    clean_miou = mean_iou(predict(fcn, x), y, seg.num_classes)
    adv_miou = mean_iou(predict(fcn, perturb(nontargeted, x)), y, seg.num_classes)
    ok = ts >= 0.70 and clean_miou >= 0.70 and adv_miou < 0.30
    record_criterion(10, ok, "segmentation, Linf 20/255",
                     f"stripe target success {ts:.3f} (>= 0.70); mIoU clean {clean_miou:.3f} (>= 0.70) -> "
                     f"adversarial {adv_miou:.3f} (< 0.30)")
    assert ok


# 11: multi-network fooling ---------------------------------------------------------------------

def test_criterion_11_multi_fool_transfer(record_criterion, cache, cls_data, victim_a, victim_b, victim_c,
                                          test_split):
    x, _ = test_split
    arts = {}
    for name, victims in (("A", [victim_a]), ("B", [victim_b]), ("AB", [victim_a, victim_b])):
        spec = classification_spec("universal", LossSpec(), linf(10), [v.id for v in victims], epochs=3)
        arts[name] = cached_attack(cache, f"univ_nt_10_{name}", spec, cls_data, victims)
    matrix = transfer_matrix([arts["A"], arts["B"], arts["AB"]], [victim_c], x)
    single = max(matrix[0, 0], matrix[1, 0])
    joint = matrix[2, 0]
    ok = joint >= single - 0.05
    record_criterion(11, ok, f"multi-fool transfer to held-out {victim_c.id}",
                     f"joint {joint:.3f} vs singles {matrix[0, 0]:.3f}/{matrix[1, 0]:.3f} (needs >= {single - 0.05:.3f})")
    assert ok


# 12: timing ------------------------------------------------------------------------------------

def test_criterion_12_timing(record_criterion, victim_a, image_dependent_attack, test_split):
    x = test_split[0][:100]
    result = timing_study(image_dependent_attack, victim_a, x, BaselineConfig("ll", steps=100), repeats=3)
    ok = x.shape[0] >= 100 and result.speedup >= 10
    record_criterion(12, ok, "timing, generator vs 100-step iterative baseline",
                     f"median {result.generator['median_ms']:.2f} ms vs {result.baseline['median_ms']:.2f} ms "
                     f"over {x.shape[0]} images, speedup {result.speedup:.1f}x (>= 10)")
    assert ok


# 13: blur ------------------------------------------------------------------------------------------

def test_criterion_13_blur_study(record_criterion, victim_a, image_dependent_attack, test_split):
    x, y = test_split
    x = x[:1000]
    y = y[:1000]
    budget = image_dependent_attack.spec.budget
    candidates = {"generative": perturb(image_dependent_attack, x),
                  "iterative_ll": baseline_iterative_ll(victim_a, x, budget, steps=10)}
    grid = {}
    for sigma in (0.5, 0.75, 1.0, 1.25):
        for name, x_adv in candidates.items():
            grid[(sigma, name)] = destruction_rate(victim_a, x, y, x_adv, sigma).rate
    defined = [v for v in grid.values() if v is not None]
    ok = len(grid) == 8 and all(0 <= v <= 1 for v in defined)

    def fmt(v):
        return "undefined" if v is None else f"{v:.3f}"

    record_criterion(13, ok, "blur destruction-rate grid",
                     f"{len(defined)}/8 entries defined, all in [0,1]: {ok}; sigma 1.25 generative "
                     f"{fmt(grid[(1.25, 'generative')])} vs iterative_ll {fmt(grid[(1.25, 'iterative_ll')])}")
    assert ok
