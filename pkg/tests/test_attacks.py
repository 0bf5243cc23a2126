import warnings

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import synth, trained
from faultguard.attacks import (
    AttackError,
    AttackSpec,
    GeneratedWindows,
    asr_from_predictions,
    bim,
    cw,
    fgsm,
    fgsm_tensor,
    generate_graybox,
    graybox_asr,
    load_adversarial,
    load_graybox,
    pgd,
    replay,
    rfgsm,
    run_attack,
    save_adversarial,
    save_graybox,
    train_graybox_generator,
)
from faultguard.predictor import PredictorConfig, init_model, predict


class Linear(nn.Module):
    """Two logits (-w.x, 0); with label 0 the loss rises with w.x, so dL/dx has the sign of w."""

    def __init__(self, w):
        super().__init__()
        self.w = nn.Parameter(torch.as_tensor(w, dtype=torch.float64), requires_grad=False)

    def forward(self, x):
        s = (x * self.w).flatten(1).sum(1)
        return torch.stack([-s, torch.zeros_like(s)], dim=1)


def _surrogate(shape=(4, 3), zero_cols=()):
    w = np.ones(shape)
    for c in zero_cols:
        w[:, c] = 0
    return Linear(w)


def _x(n=5, shape=(4, 3), seed=0):
    return np.random.default_rng(seed).uniform(0.2, 0.8, size=(n, *shape))


@pytest.fixture(scope="module")
def gru():
    return init_model(PredictorConfig(hidden_size=16, n_classes=4, seed=0))


@pytest.fixture(scope="module")
def suite():
    rng = np.random.default_rng(123)
    return rng.random((1000, 16, 51)).astype(np.float32), rng.integers(0, 4, 1000)


# ---- surrogate-model examples ----------------------------------------------


def test_fgsm_monotone_surrogate():
    x = _x()
    out = fgsm(_surrogate(), x, np.zeros(5, dtype=int), 0.3).perturbed
    np.testing.assert_allclose(out, np.clip(x + 0.3, 0, 1), atol=1e-12)


def test_fgsm_zero_gradient_coordinate_unchanged():
    x = _x()
    out = fgsm(_surrogate(zero_cols=[1]), x, np.zeros(5, dtype=int), 0.1).perturbed
    np.testing.assert_array_equal(out[..., 1], x[..., 1])
    assert np.all(out[..., 0] > x[..., 0])


def test_bim_monotone_surrogate():
    x = _x()
    out = bim(_surrogate(), x, np.zeros(5, dtype=int), 0.2, alpha=0.02, steps=10).perturbed
    np.testing.assert_allclose(out, np.clip(x + 0.2, 0, 1), atol=1e-12)


def test_bim_budget_warning():
    with pytest.warns(UserWarning, match="budget"):
        bim(_surrogate(), _x(), np.zeros(5, dtype=int), 0.2, alpha=0.01, steps=2)


def test_label_preservation():
    y = np.array([0, 0, 0, 0, 0])
    b = pgd(_surrogate(), _x(), y, 0.1)
    np.testing.assert_array_equal(b.labels, y)


# ---- definitional equivalences ---------------------------------------------


def test_bim_one_step_equals_fgsm(gru, suite):
    x, y = suite
    a = fgsm(gru, x[:200], y[:200], 0.2).perturbed
    b = bim(gru, x[:200], y[:200], 0.2, alpha=0.2, steps=1).perturbed
    np.testing.assert_array_equal(a, b)


def test_pgd_without_random_start_equals_bim(gru, suite):
    x, y = suite
    a = bim(gru, x[:200], y[:200], 0.2).perturbed
    b = pgd(gru, x[:200], y[:200], 0.2, random_start=False).perturbed
    np.testing.assert_array_equal(a, b)


def test_rfgsm_zero_alpha_equals_fgsm(gru, suite):
    x, y = suite
    a = fgsm(gru, x[:100], y[:100], 0.2).perturbed
    b = rfgsm(gru, x[:100], y[:100], 0.2, alpha=0.0).perturbed
    np.testing.assert_array_equal(a, b)


def test_seeded_attacks_repeat(gru, suite):
    x, y = suite
    for f in (rfgsm, pgd):
        a = f(gru, x[:50], y[:50], 0.2, seed=3).perturbed
        b = f(gru, x[:50], y[:50], 0.2, seed=3).perturbed
        c = f(gru, x[:50], y[:50], 0.2, seed=4).perturbed
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


# ---- invariant suite --------------------------------------------------------


@pytest.mark.parametrize("kind", ["FGSM", "BIM", "RFGSM", "PGD"])
def test_ball_and_box_containment_suite(gru, suite, kind):
    x, y = suite
    for eps in (0.05, 0.2, 0.5):
        b = run_attack(gru, x, y, AttackSpec(kind, eps))
        assert b.linf().max() <= eps + 1e-6
        assert b.perturbed.min() >= 0.0 and b.perturbed.max() <= 1.0


@pytest.mark.parametrize("kind", ["FGSM", "BIM", "RFGSM", "PGD"])
def test_zero_epsilon_identity(gru, suite, kind):
    x, y = suite
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b = run_attack(gru, x[:100], y[:100], AttackSpec(kind, 0.0))
    np.testing.assert_allclose(b.perturbed, x[:100], atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(
    st.sampled_from(["FGSM", "BIM", "RFGSM", "PGD"]),
    st.floats(0.0, 0.6),
    st.integers(0, 2**16),
    st.floats(-0.5, 0.2),
    st.floats(0.8, 1.5),
)
def test_containment_random_box_and_inputs(kind, eps, seed, lo, hi):
    model = init_model(PredictorConfig(hidden_size=4, n_classes=3, n_features=5, window_len=3, seed=seed))
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, size=(6, 3, 5)).astype(np.float32)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b = run_attack(model, x, rng.integers(0, 3, 6), AttackSpec(kind, eps, data_box=(lo, hi), seed=seed))
    assert b.linf().max() <= eps + 1e-6
    assert b.perturbed.min() >= lo - 1e-7 and b.perturbed.max() <= hi + 1e-7


def test_cw_box_and_zero_steps(gru, suite):
    x, y = suite
    b0 = cw(gru, x[:20], y[:20], steps=0)
    np.testing.assert_array_equal(b0.perturbed, x[:20])
    b = cw(gru, x[:20], y[:20], steps=20)
    assert b.perturbed.min() >= 0 and b.perturbed.max() <= 1


# ---- gradient correctness ---------------------------------------------------


def test_fgsm_sign_matches_finite_differences():
    cfg = PredictorConfig(hidden_size=8, n_classes=3, n_features=4, window_len=4, seed=2)
    model = init_model(cfg).double()
    rng = np.random.default_rng(1)
    x = torch.tensor(rng.uniform(0.3, 0.7, (8, 4, 4)))
    y = torch.tensor(rng.integers(0, 3, 8))
    delta = fgsm_tensor(model, x, y, 0.01) - x
    loss = lambda z: torch.nn.functional.cross_entropy(model(z), y, reduction="sum").item()  # noqa: E731
    h = 1e-4
    agree = total = 0
    for idx in np.ndindex(*x.shape):
        xp, xm = x.clone(), x.clone()
        xp[idx] += h
        xm[idx] -= h
        g = (loss(xp) - loss(xm)) / (2 * h)
        if abs(g) > 1e-6:
            total += 1
            agree += np.sign(g) == np.sign(delta[idx].item())
    assert total > 0 and agree / total >= 0.99


def test_non_finite_gradient_raises():
    model = _surrogate()
    with torch.no_grad():
        model.w[0, 0] = float("nan")
    with pytest.raises(AttackError):
        fgsm_tensor(model, torch.tensor(_x()), torch.zeros(5, dtype=torch.long), 0.1)


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec("DEEPFOOL")
    with pytest.raises(ValueError):
        AttackSpec("BIM", 0.1, alpha=0.2)
    with pytest.raises(ValueError):
        AttackSpec("FGSM", data_box=(1, 0))
    assert AttackSpec("pgd", 0.2).alpha == pytest.approx(0.05)
    assert AttackSpec("RFGSM", 0.2).alpha == pytest.approx(0.1)


# ---- persistence and replay ------------------------------------------------


@pytest.mark.parametrize("kind", ["PGD", "RFGSM", "CW"])
def test_replay_bit_exact(tmp_path, gru, suite, kind):
    x, y = suite
    spec = AttackSpec(kind, 0.2, steps=5 if kind == "CW" else None, seed=11)
    b = run_attack(gru, x[:30], y[:30], spec)
    back = load_adversarial(save_adversarial(b, tmp_path / kind))
    np.testing.assert_array_equal(replay(gru, back).perturbed, b.perturbed)
    np.testing.assert_array_equal(back.success_mask, b.success_mask)


# ---- trained-model properties ----------------------------------------------


@pytest.mark.slow
def test_pgd_at_least_fgsm_over_seeds():
    pgd_hits = fgsm_hits = 0
    for seed in range(5):
        s, m = synth(seed), trained(seed)
        y = s.test.fault_type
        pgd_hits += pgd(m, s.test.data, y, 0.2, seed=seed).success_mask.sum()
        fgsm_hits += fgsm(m, s.test.data, y, 0.2).success_mask.sum()
    assert pgd_hits >= fgsm_hits


@pytest.mark.slow
def test_cw_smaller_l2_than_fgsm(synth0, model0):
    x = np.concatenate([synth0.test.data, synth0.validation.data, synth0.train.data])[:200]
    y = np.concatenate([synth0.test.fault_type, synth0.validation.fault_type, synth0.train.fault_type])[:200]
    c = cw(model0, x, y)
    f = fgsm(model0, x, y, 0.2)
    assert c.success_mask.any() and f.success_mask.any()
    assert c.l2()[c.success_mask].mean() < f.l2()[f.success_mask].mean()


# ---- gray box ---------------------------------------------------------------


def test_asr_examples():
    assert asr_from_predictions([0, 1, 2, 3, 4, 5, 6, 7, 8, 8, 8], 11) == pytest.approx(9 / 11)
    assert round(asr_from_predictions([0, 1, 2, 2], 4), 3) == 0.750
    assert asr_from_predictions([2] * 50, 4) == 0.25
    with pytest.raises(ValueError):
        asr_from_predictions([], 4)


@pytest.fixture(scope="module")
def small_attacker():
    return train_graybox_generator(synth(0).train[:40], latent_dim=16, seed=1, epochs=3)


def test_graybox_determinism_and_shapes(small_attacker, tmp_path):
    again = train_graybox_generator(synth(0).train[:40], latent_dim=16, seed=1, epochs=3)
    for a, b in zip(small_attacker.generator.parameters(), again.generator.parameters()):
        assert torch.equal(a, b)
    g = generate_graybox(small_attacker, 1500, 8, seed=2)
    assert g.records.shape == (1500 * 8, 51)
    assert g.windows.shape == (1500 * 8 // 16, 16, 51)
    np.testing.assert_array_equal(g.records, generate_graybox(small_attacker, 1500, 8, seed=2).records)
    assert len(generate_graybox(small_attacker, 0)) == 0
    back = load_graybox(save_graybox(small_attacker, tmp_path / "gb"))
    np.testing.assert_array_equal(generate_graybox(back, 3, seed=5).records, generate_graybox(small_attacker, 3, seed=5).records)
    assert len(small_attacker.fake_scores) == 3


def test_graybox_asr_constant_predictor():
    model = init_model(PredictorConfig(hidden_size=4, n_classes=4))
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.copy_(torch.tensor([0.0, 9.0, 0.0, 0.0]))
    gw = GeneratedWindows(np.random.default_rng(0).random((64, 51)).astype(np.float32), 16)
    assert graybox_asr(model, gw) == 0.25
    with pytest.raises(ValueError):
        graybox_asr(model, GeneratedWindows(np.zeros((0, 51), np.float32), 16))


def test_graybox_empty_training_data():
    with pytest.raises(ValueError):
        train_graybox_generator(np.zeros((0, 16, 51)))


@pytest.fixture(scope="module")
def graybox0():
    return train_graybox_generator(synth(0).train, seed=0, epochs=150)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="epoch-1 mean is pinned near 0.5 by the untrained discriminator; "
                   "on the synthetic data D wins early and G recovers only to about 0.3")
def test_graybox_fake_score_rises_from_first_epoch(graybox0):
    assert graybox0.fake_scores[-1] > graybox0.fake_scores[0]


@pytest.mark.slow
def test_graybox_fake_score_recovers_from_trough(graybox0):
    f = np.asarray(graybox0.fake_scores)
    trough = int(f.argmin())
    assert trough < len(f) - 1
    assert f[-1] > 2 * f[trough]


_WEAK_AT_02 = {
    "RFGSM": "the random step spends half the budget, leaving a gradient step of only 0.1",
    "CW": "L2 attack with c=1, 100 steps at lr 0.01 leaves most windows correctly classified",
}


@pytest.mark.slow
@pytest.mark.parametrize("kind", [
    pytest.param(k, marks=pytest.mark.xfail(strict=True, reason=_WEAK_AT_02[k])) if k in _WEAK_AT_02 else k
    for k in ("FGSM", "BIM", "PGD", "RFGSM", "CW")
])
def test_each_attack_halves_clean_accuracy(kind):
    for seed in range(3):
        s, model = synth(seed), trained(seed)
        x, y = s.test.data, s.test.fault_type
        clean = float((predict(model, x) == y).mean())
        adv = run_attack(model, x, y, AttackSpec(kind, 0.2, seed=seed)).perturbed
        assert float((predict(model, adv) == y).mean()) <= 0.5 * clean, f"seed {seed}"
