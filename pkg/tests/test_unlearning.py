import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedunlearn import federation as fed
from fedunlearn import metrics as M
from fedunlearn import unlearning as un
from fedunlearn.errors import ConfigError
from fedunlearn.instances import identical_federation, random_quadratic_federation
from fedunlearn.linalg import dot, norm

from conftest import point_quadratic


def _cfgs(spec, T=40, **kw):
    lr = 1.0 / spec.max_L(spec.remaining)
    return lr, dict(rounds=T, lr_local=lr, **kw)


def test_empty_unlearn_set_rejected():
    spec = fed.FederationSpec([point_quadratic([0.0])] * 2)
    with pytest.raises(ConfigError):
        un.exact_retrain(spec, fed.TrainConfig(rounds=1))
    with pytest.raises(ConfigError):
        un.continue_unlearn(spec, fed.TrainConfig(rounds=1), np.zeros(1))


def test_retrain_converges(small_spec):
    lr, kw = _cfgs(small_spec, T=500)
    res = un.exact_retrain(small_spec, fed.TrainConfig(**kw))
    assert M.metric_V(small_spec, res.w_u) <= 1e-6


def test_continue_monotone_and_shares_fixed_point(trained):
    spec, w_o = trained
    lr, kw = _cfgs(spec, T=500)
    res = un.continue_unlearn(spec, fed.TrainConfig(**kw), w_o)
    V = [M.metric_V(spec, w) for w in res.trajectory.weights]
    assert all(b <= a + 1e-12 for a, b in zip(V, V[1:]))
    retr = un.exact_retrain(spec, fed.TrainConfig(**kw))
    assert np.linalg.norm(res.w_u - retr.w_u) <= 1e-6


def test_homogeneous_start_is_already_verified():
    spec = identical_federation(point_quadratic([1.0, -2.0]), 4, [3])
    w_o = fed.train(spec, fed.TrainConfig(rounds=200, lr_local=0.5)).final
    delta = M.erm_gap(spec, w_o)
    assert M.metric_V(spec, w_o) <= delta + 1e-12


def test_lambda_zero_bitwise_equals_continue(trained):
    spec, w_o = trained
    lr, kw = _cfgs(spec, batch_size=3, sample_fraction=0.6, seed=11)
    cont = un.continue_unlearn(spec, fed.TrainConfig(**kw), w_o)
    stab = un.stability_unlearn(spec, un.StabilityConfig(lam=0.0, lr_global=lr, **kw), w_o)
    assert all(np.array_equal(a, b) for a, b in zip(cont.trajectory.weights, stab.trajectory.weights))


def test_lambda_negative_rejected(trained):
    spec, w_o = trained
    with pytest.raises(ConfigError):
        un.stability_unlearn(spec, un.StabilityConfig(lam=-1.0), w_o)


def test_parallel_correction_vanishes():
    # identical clients: g_hat and g_S are both multiples of the same gradient at round 0
    spec = identical_federation(point_quadratic([1.0, 2.0]), 4, [3])
    w_o = np.array([3.0, -1.0])
    cfg = un.StabilityConfig(rounds=1, lr_local=0.0, lr_global=0.5, lam=1.0)
    res = un.stability_unlearn(spec, cfg, w_o)
    row = res.correction_log[0]
    assert row["gc_norm"] <= 1e-10 * row["h_norm"]


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 5.0))
def test_correction_structure(seed, lam):
    spec = random_quadratic_federation(np.random.default_rng(seed))
    w_o = fed.train(spec, fed.TrainConfig(rounds=50, lr_local=1.0 / spec.max_L())).final
    lr, kw = _cfgs(spec, T=15)
    res = un.stability_unlearn(spec, un.StabilityConfig(lam=lam, lr_global=lr, **kw), w_o)
    for row in res.correction_log:
        assert 0.0 <= row["cos_theta_sq"] <= 1.0
        if row["degenerate"]:
            continue
        assert abs(row["gc_dot_gs"]) <= 1e-10 * max(row["gc_norm"] * row["gs_norm"], 1e-300) + 1e-300
        phi = M.verification_stability_phi(lam, spec.P_J, row["cos_theta_sq"])
        assert row["gc_norm"] ** 2 <= phi * row["ghat_norm"] ** 2 * (1 + 1e-9) + 1e-300


def test_stability_logs_and_deviation_flags(trained, tmp_path):
    spec, w_o = trained
    lr, kw = _cfgs(spec, T=5)
    res = un.stability_unlearn(spec, un.StabilityConfig(lam=1.0, lr_global=lr, gradient_mode="pseudo",
                                                        surrogate_mode="remaining", **kw), w_o)
    assert len(res.correction_log) == 5 and len(res.deviations) == 2
    res.write_correction_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().startswith("round,gc_norm")


def test_multipliers():
    mu = un.fairness_multipliers(np.array([0.0, 0.0]), 1.0)
    assert np.allclose(mu, [1 / 3, 1 / 3])
    big = un.fairness_multipliers(np.array([800.0, 799.0]), 2.0)
    assert np.all(np.isfinite(big)) and big.sum() <= 2.0
    assert np.array_equal(un.fairness_multipliers(np.array([5.0, -3.0]), 0.0), [0.0, 0.0])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(0.0, 10.0))
def test_multiplier_budget(r, Lam):
    mu = un.fairness_multipliers(np.array(r), Lam)
    assert np.all(mu >= 0)
    assert mu.sum() <= Lam * (1 + 1e-15)
    # the +1 in the denominator keeps the budget strict until exp(max r) swamps it in floating point
    if Lam > 0 and max(r) < 30:
        assert mu.sum() < Lam


def test_fairness_zero_budget_equals_continue(trained):
    spec, w_o = trained
    lr, kw = _cfgs(spec, batch_size=3, sample_fraction=0.6, seed=4)
    cont = un.continue_unlearn(spec, fed.TrainConfig(**kw), w_o)
    fair = un.fairness_unlearn(spec, un.FairnessConfig(Lambda=0.0, **kw), w_o)
    assert all(np.array_equal(a, b) for a, b in zip(cont.trajectory.weights, fair.trajectory.weights))
    assert all(row["mu_sum"] == 0.0 for row in fair.fairness_log)


def test_fairness_early_stop_rule(trained):
    spec, w_o = trained
    lr, kw = _cfgs(spec, T=100)
    eps = 1e-3
    res = un.fairness_unlearn(spec, un.FairnessConfig(Lambda=1.0, epsilon=eps, lr_local=lr / 2,
                                                      rounds=100), w_o)
    base = spec.client_losses(w_o)
    if res.terminated_early:
        losses = spec.client_losses(res.w_u)
        assert max(losses[i] - base[i] for i in spec.remaining) <= eps
    for row in res.fairness_log:
        assert row["mu_sum"] < 1.0


def test_fairness_negative_budget_rejected(trained):
    spec, w_o = trained
    with pytest.raises(ConfigError):
        un.fairness_unlearn(spec, un.FairnessConfig(Lambda=-0.5), w_o)
