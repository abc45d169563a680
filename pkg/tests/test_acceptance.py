"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import math
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

from fedunlearn import federation as fed
from fedunlearn import harness as H
from fedunlearn import metrics as M
from fedunlearn import unlearning as un
from fedunlearn.instances import random_quadratic_federation
from fedunlearn.objectives import LogisticObjective, QuadraticObjective, exact_minimizer

RESULTS = []
N_SEEDS = 20


def record(n, title, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {title} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(autouse=True)
def _no_step_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def _full_batch(spec, T, lr=None):
    return fed.TrainConfig(rounds=T, lr_local=1.0 / spec.max_L() if lr is None else lr)


def test_criterion_1_tradeoff_inequality():
    rng = np.random.default_rng(12345)
    t0 = time.time()
    checked = violations = 0
    worst = 0.0
    for _ in range(100):
        spec = random_quadratic_federation(rng)
        lr = 1.0 / spec.max_L()
        cfg = _full_batch(spec, 300, lr)
        w_o = fed.train(spec, cfg).final
        o = M.Oracles(spec)
        Cq = M.bound_Cq(spec, o)
        runs = [
            un.exact_retrain(spec, cfg),
            un.continue_unlearn(spec, cfg, w_o),
            un.stability_unlearn(spec, un.StabilityConfig(rounds=300, lr_local=lr, lr_global=lr), w_o),
            un.fairness_unlearn(spec, un.FairnessConfig(rounds=300, lr_local=lr / 2, Lambda=1.0), w_o),
        ]
        for r in runs:
            checked += 1
            gap = Cq - (2 * M.metric_V(spec, r.w_u, o) + M.metric_Q(spec, r.w_u, o))
            if gap > 1e-8:
                violations += 1
                worst = max(worst, gap)
    elapsed = time.time() - t0
    record(1, "2V + Q >= Cq - 1e-8", violations == 0 and elapsed < 60,
           f"{violations}/{checked} violations, worst shortfall {worst:.3g}, {elapsed:.1f}s")


def test_criterion_2_homogeneity_collapse():
    cfg = H.preset("homogeneous")
    cfg = replace(cfg, unlearn=replace(cfg.unlearn, rounds=500))
    out = H.execute(cfg)
    spec, o = out.spec, out.oracles
    dF = fed.remaining_loss(spec, o.w_star) - o.F_rem_star
    div = M.gradient_divergence(spec, out.w_o)
    ok = out.report.Cq <= 1e-10 and out.report.Q <= 1e-6 and dF <= 1e-10 and div <= 1e-8
    record(2, "homogeneity collapse", ok,
           f"Cq={out.report.Cq:.2e} Q={out.report.Q:.2e} dF={dF:.2e} div={div:.2e}")


def test_criterion_3_verification_convergence():
    rng = np.random.default_rng(303)
    worst_ratio, worst_dist, monotone = 0.0, 0.0, True
    for _ in range(10):
        spec = random_quadratic_federation(rng)
        cfg = fed.TrainConfig(rounds=500, lr_local=1.0 / spec.max_L(spec.remaining))
        w_o = fed.train(spec, _full_batch(spec, 100)).final
        o = M.Oracles(spec)
        res = un.continue_unlearn(spec, cfg, w_o)
        V = [M.metric_V(spec, w, o) for w in res.trajectory.weights]
        monotone &= all(b <= a + 1e-12 for a, b in zip(V, V[1:]))
        worst_ratio = max(worst_ratio, V[-1] / V[0] if V[0] > 0 else 0.0)
        retr = un.exact_retrain(spec, cfg)
        worst_dist = max(worst_dist, float(np.linalg.norm(retr.w_u - o.w_r_star)),
                         float(np.linalg.norm(res.w_u - o.w_r_star)))
    ok = monotone and worst_ratio <= 1e-6 and worst_dist <= 1e-6
    record(3, "verification convergence", ok,
           f"monotone={monotone} max V(500)/V(0)={worst_ratio:.2e} max dist={worst_dist:.2e}")


def test_criterion_4_correction_structure():
    rng = np.random.default_rng(404)
    rounds = bad_orth = bad_norm = 0
    bitwise = True
    for k in range(20):
        spec = random_quadratic_federation(rng)
        w_o = fed.train(spec, _full_batch(spec, 100)).final
        lr = 1.0 / spec.max_L(spec.remaining)
        stoch = dict(batch_size=3, sample_fraction=0.7) if k % 2 else {}
        base = dict(rounds=40, lr_local=lr, seed=k, **stoch)
        lam = float(rng.uniform(0.2, 5.0))
        res = un.stability_unlearn(spec, un.StabilityConfig(lam=lam, lr_global=lr, **base), w_o)
        for row in res.correction_log:
            if row["degenerate"]:
                continue
            rounds += 1
            if abs(row["gc_dot_gs"]) > 1e-10 * row["gc_norm"] * row["gs_norm"]:
                bad_orth += 1
            phi = M.verification_stability_phi(lam, spec.P_J, row["cos_theta_sq"])
            if row["gc_norm"] ** 2 > phi * row["ghat_norm"] ** 2 * (1 + 1e-12):
                bad_norm += 1
        zero = un.stability_unlearn(spec, un.StabilityConfig(lam=0.0, lr_global=lr, **base), w_o)
        cont = un.continue_unlearn(spec, fed.TrainConfig(**base), w_o)
        bitwise &= all(np.array_equal(a, b) for a, b in zip(zero.trajectory.weights, cont.trajectory.weights))
    ok = bad_orth == 0 and bad_norm == 0 and bitwise
    record(4, "correction orthogonality, norm bound, lambda=0 replay", ok,
           f"{rounds} rounds, orth violations={bad_orth}, norm violations={bad_norm}, bitwise={bitwise}")


def _stability_triplet(cfg):
    out = {}
    for lam in (0.0, 1.0, 5.0):
        _, _, rep = H.run_experiment(replace(cfg, mechanism="stability", lam=lam))
        out[lam] = (rep.V, rep.S)
    return out


def _stability_ok(o):
    return (o[1.0][1] < o[0.0][1], o[1.0][0] >= o[0.0][0] - 1e-9, sum(o[5.0]) <= sum(o[0.0]))


def test_criterion_5_stability_direction():
    base = H.preset("two-group")
    fixed = _stability_ok(_stability_triplet(base))
    per_seed = [_stability_triplet(H.override(base, seed=s)) for s in range(N_SEEDS)]
    med = {lam: (float(np.median([p[lam][0] for p in per_seed])),
                 float(np.median([p[lam][1] for p in per_seed]))) for lam in (0.0, 1.0, 5.0)}
    median = _stability_ok(med)
    ok = all(fixed) and all(median)
    record(5, "stability direction on two-group", ok,
           f"fixed seed {fixed}, median {median}, median S(0)={med[0.0][1]:.4g} S(1)={med[1.0][1]:.4g}")


def _fairness_pair(cfg):
    _, fair, rf = H.run_experiment(replace(cfg, mechanism="fairness", Lambda=1.0))
    retrain_cfg = replace(cfg, mechanism="retrain", unlearn=replace(cfg.unlearn, rounds=300))
    _, _, rr = H.run_experiment(retrain_cfg)
    return rf, rr


def test_criterion_6_fairness_direction():
    base = H.preset("fairness-demo")
    rf, rr = _fairness_pair(base)
    fixed = rf.Q < rr.Q
    bound_ok = rf.V <= 4 * rf.rho**2 * 1.0 + 1e-6
    seeds = [_fairness_pair(H.override(base, seed=s)) for s in range(N_SEEDS)]
    median = np.median([f.Q for f, _ in seeds]) < np.median([r.Q for _, r in seeds])
    bound_ok &= all(f.V <= 4 * f.rho**2 + 1e-6 for f, _ in seeds)
    # early termination: the stopping rule must hold exactly at the returned point
    stops = stop_ok = 0
    for eps in (1e-2, 3e-3, 1e-3):
        out = H.execute(replace(base, epsilon=eps))
        res = out.results[0]
        if res.terminated_early:
            stops += 1
            base_loss = out.spec.client_losses(out.w_o)
            losses = out.spec.client_losses(res.w_u)
            stop_ok += max(losses[i] - base_loss[i] for i in out.spec.remaining) <= eps
    ok = fixed and median and bound_ok and stops > 0 and stop_ok == stops
    record(6, "fairness direction and saddle bound", ok,
           f"Q fair={rf.Q:.4g} < retrain={rr.Q:.4g}: {fixed}; median {median}; "
           f"V<=4rho^2 Lambda: {bound_ok}; early stops honoured {stop_ok}/{stops}")


def test_criterion_7_convergence_bound():
    rng = np.random.default_rng(777)
    fails, admissible = 0, 0
    worst = -math.inf
    for _ in range(50):
        spec = random_quadratic_federation(rng)
        L = spec.max_L()
        w_o = fed.train(spec, _full_batch(spec, 300, 1.0 / L)).final
        o = M.Oracles(spec)
        est = M.estimate_heterogeneity(spec, M.default_probes(spec, w_o, oracles=o), w_o=w_o)
        T = 50
        for _ in range(10):
            lr = 2.0 / (L * T)
            cfg = un.StabilityConfig(rounds=T, lr_local=lr, lr_global=lr, lam=1.0)
            run = un.stability_unlearn(spec, cfg, w_o)
            eps = max(row["grad_ratio"] for row in run.correction_log)
            cos_sq = max(row["cos_theta_sq"] for row in run.correction_log)
            b = M.bound_thm4(spec, cfg, est, T, w_o, eps, cos_sq, oracles=o)
            if b["T_admissible"]:
                break
            T = int(math.ceil(b["T_min"]))
        admissible += b["T_admissible"]
        V = M.metric_V(spec, run.w_u, o)
        slack = V - (b["chi1"] + b["chi2"])
        worst = max(worst, slack)
        fails += slack > 1e-8
    ok = fails == 0 and admissible == 50
    record(7, "V <= chi1 + chi2", ok, f"{fails}/50 violations, {admissible} admissible, max V-bound={worst:.3g}")


def test_criterion_8_heterogeneity_machinery():
    out = H.execute(H.preset("homogeneous"))
    est = out.report.ingredients["heterogeneity"]
    homog = est["zeta_sq"] <= 1e-10 and est["beta_sq"] <= 1e-10
    _, med = H.dirichlet_sweep(H.preset("table3-dirichlet"), n_seeds=N_SEEDS)
    z = [m["zeta_sq"] for m in med]
    s = [m["S_retrain"] for m in med]
    zeta_dec = all(b < a for a, b in zip(z, z[1:]))
    s_dec = all(b < a for a, b in zip(s, s[1:]))
    ok = homog and zeta_dec and s_dec
    record(8, "heterogeneity estimates and Dirichlet ordering", ok,
           f"homogeneous zeta={est['zeta_sq']:.1e} beta={est['beta_sq']:.1e}; "
           f"median zeta {['%.4g' % v for v in z]}; median S_retrain {['%.4g' % v for v in s]}")


def _fd(f, w, h=1e-6):
    g = np.zeros_like(w)
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = h
        g[j] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def test_criterion_9_gradient_correctness():
    rng = np.random.default_rng(909)
    objs = []
    for _ in range(5):
        n, d = int(rng.integers(3, 12)), int(rng.integers(2, 7))
        objs.append(QuadraticObjective(rng.standard_normal((n, d)), rng.standard_normal(n), rng.uniform(0, 1)))
        objs.append(LogisticObjective(rng.standard_normal((n, d)), rng.integers(0, 2, n).astype(float),
                                      rng.uniform(0.01, 1)))
    worst_fd = 0.0
    for obj in objs:
        for _ in range(20):
            w = rng.standard_normal(obj.d)
            g = obj.grad(w)
            worst_fd = max(worst_fd, np.linalg.norm(g - _fd(obj.loss, w)) / max(1.0, np.linalg.norm(g)))
    worst_min = 0.0
    for obj in objs:
        w = exact_minimizer([(obj, 1.0)])
        worst_min = max(worst_min, float(np.linalg.norm(obj.grad(w))))
    for _ in range(5):
        spec = random_quadratic_federation(rng)
        for terms in (spec.global_terms(), spec.remaining_terms()):
            w = exact_minimizer(terms)
            worst_min = max(worst_min, float(np.linalg.norm(sum(wt * o.grad(w) for o, wt in terms))))
    ok = worst_fd <= 1e-6 and worst_min <= 1e-8
    record(9, "analytic gradients and exact minimizers", ok,
           f"max FD rel err={worst_fd:.2e}, max minimizer grad norm={worst_min:.2e}")


def test_criterion_10_thread_determinism(tmp_path):
    base = H.preset("two-group")
    stoch = replace(base, unlearn=replace(base.unlearn, batch_size=10, sample_fraction=0.6))
    identical = True
    for name, cfg in (("full", base), ("stochastic", stoch)):
        outs = []
        for k in (1, 4, 8):
            d = tmp_path / f"{name}_{k}"
            H.run_experiment(cfg, d, threads=k)
            outs.append(((d / "trajectory.csv").read_bytes(), (d / "bounds.json").read_bytes()))
        identical &= all(o == outs[0] for o in outs[1:])
    record(10, "byte-identical artifacts across 1/4/8 threads", identical, f"identical={identical}")
