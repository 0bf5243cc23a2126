"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the "acceptance criteria" section of the terminal summary. Criterion 8 needs
the public IEEE13 adversarial-attack CSV; point FAULTGUARD_IEEE13_CSV at it.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import record_criterion, synth, trained
from faultguard.ads import AdsConfig, evaluate_ads, legitimate_mask, train_ads
from faultguard.attacks import (
    AttackSpec,
    asr_from_predictions,
    craft_tensor,
    fgsm_tensor,
    generate_graybox,
    graybox_asr,
    run_attack,
    train_graybox_generator,
)
from faultguard.dataset import N_FEATURES, WINDOW_LEN, ingest, make_windows, split
from faultguard.harness import ExperimentConfig, combinatorial_accuracy, run_full_pipeline
from faultguard.predictor import PredictorConfig, evaluate_accuracy, init_model, predict, train_standard

SEEDS = (0, 1, 2)


def _finish(number, checks: dict, seconds: float, limit: float):
    checks[f"runtime<{limit:g}s"] = seconds < limit
    failed = [k for k, ok in checks.items() if not ok]
    detail = "all checks hold" if not failed else "failed: " + "; ".join(failed)
    record_criterion(number, not failed, detail, seconds)
    assert not failed, detail


def test_criterion_1_combinatorial_accuracy():
    t0 = time.perf_counter()
    checks = {
        "(0.604,2)~0.8432": abs(combinatorial_accuracy(0.604, 2) - 0.8432) <= 1e-4,
        "(0.958,2)~0.99824": abs(combinatorial_accuracy(0.958, 2) - 0.99824) <= 1e-4,
    }
    from fractions import Fraction
    from math import comb

    rng = np.random.default_rng(2024)
    worst = 0.0
    for a, k in zip(rng.random(1000), rng.integers(1, 21, 1000)):
        p, k = Fraction(float(a)), int(k)
        exact = float(sum(comb(k, j) * p**j * (1 - p) ** (k - j) for j in range(1, k + 1)))
        worst = max(worst, abs(combinatorial_accuracy(float(a), k) - exact))
    checks[f"1000-case oracle (worst {worst:.1e})"] = worst <= 1e-12
    _finish(1, checks, time.perf_counter() - t0, 1.0)


def test_criterion_2_attack_invariants():
    t0 = time.perf_counter()
    model = init_model(PredictorConfig(hidden_size=64, n_classes=4, seed=0))
    rng = np.random.default_rng(7)
    x = torch.tensor(rng.random((1000, WINDOW_LEN, N_FEATURES)), dtype=torch.float32)
    y = torch.tensor(rng.integers(0, 4, 1000))
    checks = {}
    for kind in ("FGSM", "BIM", "RFGSM", "PGD"):
        steps = 10 if kind in ("BIM", "PGD") else 1
        for eps in (0.05, 0.2, 0.5):
            adv = craft_tensor(model, x, y, AttackSpec(kind, eps, steps, seed=1))
            linf = (adv - x).abs().amax().item()
            checks[f"{kind} eps={eps} Linf"] = linf <= eps + 1e-6
            checks[f"{kind} eps={eps} box"] = bool(adv.min() >= 0 and adv.max() <= 1)
        zero = craft_tensor(model, x, y, AttackSpec(kind, 0.0, steps, seed=1))
        checks[f"{kind} eps=0 identity"] = (zero - x).abs().max().item() <= 1e-9
    for eps in (0.05, 0.2, 0.5):
        fgsm = craft_tensor(model, x, y, AttackSpec("FGSM", eps))
        bim1 = craft_tensor(model, x, y, AttackSpec("BIM", eps, steps=1, alpha=eps))
        bim = craft_tensor(model, x, y, AttackSpec("BIM", eps, steps=10))
        pgd = craft_tensor(model, x, y, AttackSpec("PGD", eps, steps=10, random_start=False))
        checks[f"BIM(1 step)==FGSM eps={eps}"] = torch.equal(bim1, fgsm)
        checks[f"PGD(no start)==BIM eps={eps}"] = torch.equal(pgd, bim)
    _finish(2, checks, time.perf_counter() - t0, 120.0)


def test_criterion_3_gradient_correctness():
    t0 = time.perf_counter()
    cfg = PredictorConfig(hidden_size=8, n_classes=3, n_features=4, window_len=4, seed=11)
    model = init_model(cfg).double()
    rng = np.random.default_rng(3)
    x = torch.tensor(rng.uniform(0.2, 0.8, (32, 4, 4)))
    y = torch.tensor(rng.integers(0, 3, 32))
    delta = fgsm_tensor(model, x, y, 0.01) - x

    def loss(z):
        return torch.nn.functional.cross_entropy(model(z), y, reduction="sum").item()

    agree = total = 0
    h = 1e-5
    for idx in np.ndindex(*x.shape):
        xp, xm = x.clone(), x.clone()
        xp[idx] += h
        xm[idx] -= h
        g = (loss(xp) - loss(xm)) / (2 * h)
        if abs(g) > 1e-6:
            total += 1
            agree += int(np.sign(g) == np.sign(delta[idx].item()))
    frac = agree / max(total, 1)
    _finish(3, {f"sign agreement {frac:.4f} over {total} coords": total > 0 and frac >= 0.99},
            time.perf_counter() - t0, 60.0)


@pytest.mark.slow
def test_criterion_4_synthetic_robustness():
    t0 = time.perf_counter()
    checks = {}
    for seed in SEEDS:
        s = synth(seed)
        x, y = s.test.data, s.test.fault_type
        std, oat = trained(seed), trained(seed, oat=True)
        clean = evaluate_accuracy(std, s.test)
        spec = AttackSpec("FGSM", 0.2)
        under = float((predict(std, run_attack(std, x, y, spec).perturbed) == y).mean())
        robust = float((predict(oat, run_attack(oat, x, y, spec).perturbed) == y).mean())
        checks[f"seed {seed} clean {clean:.3f}>=0.95"] = clean >= 0.95
        checks[f"seed {seed} attacked {under:.3f}<=0.5*clean"] = under <= 0.5 * clean
        checks[f"seed {seed} OAT {robust:.3f}>=attacked+0.20"] = robust >= under + 0.20
    _finish(4, checks, time.perf_counter() - t0, 600.0)


@pytest.mark.slow
def test_criterion_5_ads_adversarial_learning():
    t0 = time.perf_counter()
    checks = {}
    for seed in SEEDS:
        s = synth(seed)
        model = trained(seed)
        x, y = s.test.data, s.test.fault_type
        sets = {f"{k}{e}": run_attack(model, x, y, AttackSpec(k, e)).perturbed
                for k in ("FGSM", "BIM") for e in (0.1, 0.2)}
        with_al = train_ads(s.train, model, AdsConfig(seed=seed))
        without = train_ads(s.train, model, AdsConfig(seed=seed, adversarial_learning=False))
        acc_al = evaluate_ads(with_al.discriminator, x, sets)
        acc_plain = evaluate_ads(without.discriminator, x, sets)
        for name in sets:
            checks[f"seed {seed} {name} AL {acc_al[name]:.3f}>=0.95"] = acc_al[name] >= 0.95
            checks[f"seed {seed} {name} AL>=plain {acc_plain[name]:.3f}"] = acc_al[name] >= acc_plain[name]
        passed = float(legitimate_mask(with_al.discriminator, x).mean())
        checks[f"seed {seed} clean pass {passed:.3f}>=0.95"] = passed >= 0.95
    _finish(5, checks, time.perf_counter() - t0, 600.0)


@pytest.mark.slow
def test_criterion_6_graybox_asr():
    t0 = time.perf_counter()
    checks = {
        "9/11": asr_from_predictions([0, 1, 2, 3, 4, 5, 6, 7, 8, 8, 0], 11) == 9 / 11,
        "3/4": asr_from_predictions([0, 1, 1, 3], 4) == 0.75,
    }
    s = synth(0)
    attacker = train_graybox_generator(s.train, latent_dim=64, seed=0, epochs=150)
    generated = generate_graybox(attacker, 1500, 64, seed=0)
    asr = graybox_asr(trained(0), generated)
    checks[f"trained generator ASR {asr:.3f}>0.25"] = asr > 0.25
    _finish(6, checks, time.perf_counter() - t0, 300.0)


@pytest.mark.slow
def test_criterion_7_determinism(tmp_path):
    cfg = ExperimentConfig(seeds=[0], out=str(tmp_path / "run"))
    t0 = time.perf_counter()
    first = run_full_pipeline(cfg)
    one_pass = time.perf_counter() - t0
    second = run_full_pipeline(cfg)
    checks = {
        f"{len(first.metric_rows())} metric rows identical": first.metric_rows() == second.metric_rows(),
        f"single pass {one_pass:.0f}s<900s": one_pass < 900,
    }
    _finish(7, checks, time.perf_counter() - t0, 1800.0)


IEEE13 = os.environ.get("FAULTGUARD_IEEE13_CSV")


@pytest.mark.skipif(not IEEE13 or not Path(IEEE13).is_file(), reason="IEEE13 data not available")
def test_criterion_8_full_scale():
    t0 = time.perf_counter()
    windows = make_windows(ingest(IEEE13))
    checks = {}
    eps_acc = []
    for task, floor in (("zone", 0.90), ("type", 0.55)):
        s = split(windows, seed=0)
        cfg = PredictorConfig(n_classes=4 if task == "zone" else 11, seed=0)
        model = init_model(cfg)
        train_standard(model, s, cfg, task)
        acc = evaluate_accuracy(model, s.test, task)
        checks[f"{task} clean {acc:.3f}>={floor}"] = acc >= floor
        if task == "type":
            y = s.test.fault_type
            for kind in ("FGSM", "BIM", "CW", "RFGSM", "PGD"):
                spec = AttackSpec(kind, 0.0 if kind == "CW" else 0.05, None if kind in ("BIM", "PGD", "CW") else 1)
                adv = run_attack(model, s.test.data, y, spec).perturbed
                eps_acc.append(float((predict(model, adv) == y).mean()))
    checks[f"type eps=0.05 mean {np.mean(eps_acc):.3f}<=0.30"] = float(np.mean(eps_acc)) <= 0.30
    _finish(8, checks, time.perf_counter() - t0, 4 * 3600.0)
