"""Unlearning mechanisms: exact retrain, continued training, the
stability-penalized gradient correction, and the fairness-constrained
multiplier scheme.

All four share the round structure of :func:`federation.fedavg_round`
restricted to the remaining clients, and all use the same ``PHASE_UNLEARN``
random streams, so mechanisms with a zero penalty replay continued training
bit for bit.
"""

import csv
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import federation as fed
from .errors import ConfigError
from .linalg import as_vector, dot, norm, norm_sq, orth_residual, projection_threshold

# gradient source for the projection base
GS_EXACT = "exact"
GS_PSEUDO = "pseudo"
# linearization anchor for the removed-client surrogate
SURROGATE_REMOVED = "removed"
SURROGATE_REMAINING = "remaining"


@dataclass
class StabilityConfig(fed.TrainConfig):
    lam: float = 1.0
    lr_global: float = 0.1
    L_used: Optional[float] = None
    gradient_mode: str = GS_EXACT
    surrogate_mode: str = SURROGATE_REMOVED

    def validate(self):
        super().validate()
        if not (self.lam >= 0):
            raise ConfigError("stability penalty lambda must be nonnegative")
        if not (self.lr_global > 0):
            raise ConfigError("lr_global must be positive")
        if self.gradient_mode not in (GS_EXACT, GS_PSEUDO):
            raise ConfigError(f"unknown gradient_mode {self.gradient_mode!r}")
        if self.surrogate_mode not in (SURROGATE_REMOVED, SURROGATE_REMAINING):
            raise ConfigError(f"unknown surrogate_mode {self.surrogate_mode!r}")


@dataclass
class FairnessConfig(fed.TrainConfig):
    Lambda: float = 1.0
    epsilon: Optional[float] = None  # None disables early termination

    def validate(self):
        super().validate()
        if not (self.Lambda >= 0):
            raise ConfigError("multiplier budget Lambda must be nonnegative")


@dataclass
class UnlearnResult:
    mechanism: str
    w_u: np.ndarray
    trajectory: fed.Trajectory
    correction_log: Optional[List[dict]] = None
    fairness_log: Optional[List[dict]] = None
    terminated_early: bool = False
    deviations: List[str] = field(default_factory=list)

    def write_correction_csv(self, path):
        _write_log(self.correction_log, path)

    def write_fairness_csv(self, path):
        _write_log(self.fairness_log, path)


def _write_log(rows, path):
    if not rows:
        raise ValueError("no log rows to write")
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(keys)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in keys])


def _fmt(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return ";".join(_fmt(x) for x in v)
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _require_unlearn_set(spec):
    if not spec.unlearn_set:
        raise ConfigError("unlearn set is empty: nothing to unlearn")


def _run_remaining(spec, config, w0, mechanism):
    config.validate()
    _require_unlearn_set(spec)
    fed.check_step_size(spec, config, spec.remaining)
    w = as_vector(w0, copy=True)
    traj = fed.Trajectory()
    traj.record(spec, w)
    for t in range(config.rounds):
        w, sampled = fed.fedavg_round(w, spec, config, spec.remaining, t, fed.PHASE_UNLEARN)
        traj.record(spec, w, sampled)
    return UnlearnResult(mechanism=mechanism, w_u=w, trajectory=traj)


def exact_retrain(spec, config):
    """FedAvg from the zero vector over the remaining clients; yields ``w^r``."""
    return _run_remaining(spec, config, np.zeros(spec.d), "retrain")


def continue_unlearn(spec, config, w_o):
    """FedAvg over the remaining clients starting from the trained model."""
    return _run_remaining(spec, config, w_o, "continue")


def stability_unlearn(spec, cfg, w_o):
    """Continued training plus a projected stability correction each round.

    After aggregation to ``w_bar`` the server forms
    ``h = lam (1-P_J) g_S + lam P_J g_hat`` with the removed-client surrogate
    ``g_hat = grad F_J(w_o) + L_used (w_bar - w_o)`` and steps along the part of
    ``h`` orthogonal to ``g_S``. ``grad F_J(w_o)`` is computed once up front.
    """
    cfg.validate()
    _require_unlearn_set(spec)
    fed.check_step_size(spec, cfg, spec.remaining)
    w_o = as_vector(w_o, copy=True)
    L_used = spec.max_L(spec.remaining) if cfg.L_used is None else float(cfg.L_used)
    if cfg.surrogate_mode == SURROGATE_REMOVED:
        anchor_grad = fed.removed_grad(spec, w_o)
    else:
        anchor_grad = fed.remaining_grad(spec, w_o)
    P = spec.P_J
    lam = cfg.lam
    tau = projection_threshold(spec.d)

    w = w_o.copy()
    traj = fed.Trajectory()
    traj.record(spec, w)
    log = []
    for t in range(cfg.rounds):
        w_bar, sampled = fed.fedavg_round(w, spec, cfg, spec.remaining, t, fed.PHASE_UNLEARN)
        alphas = fed.aggregation_alphas(spec, sampled)
        if cfg.gradient_mode == GS_EXACT:
            g_S = np.zeros(spec.d)
            for a, i in zip(alphas, sampled):
                g_S = g_S + a * spec.objectives[i].grad(w_bar)
        else:
            g_S = (w - w_bar) / (cfg.lr_local * cfg.local_epochs) if cfg.lr_local > 0 else np.zeros(spec.d)
        g_hat = anchor_grad + L_used * (w_bar - w_o)
        h = lam * (1.0 - P) * g_S + lam * P * g_hat
        g_c = orth_residual(h, g_S)
        w_next = w_bar - cfg.lr_global * g_c

        gs_sq = norm_sq(g_S)
        gh_sq = norm_sq(g_hat)
        cos = dot(g_hat, g_S) / np.sqrt(gs_sq * gh_sq) if gs_sq > 0 and gh_sq > 0 else 0.0
        cos_sq = min(1.0, cos * cos)
        grad_start = norm(fed.remaining_grad(spec, w))
        grad_end = norm(fed.remaining_grad(spec, w_bar))
        log.append({
            "round": t,
            "gc_norm": norm(g_c),
            "gc_dot_gs": dot(g_c, g_S),
            "cos_theta": cos,
            "cos_theta_sq": cos_sq,
            "gs_norm": np.sqrt(gs_sq),
            "ghat_norm": np.sqrt(gh_sq),
            "h_norm": norm(h),
            "degenerate": gs_sq <= tau,
            "grad_ratio": grad_end / grad_start if grad_start > 0 else 0.0,
        })
        w = w_next
        traj.record(spec, w, sampled)

    res = UnlearnResult(mechanism="stability", w_u=w, trajectory=traj, correction_log=log)
    if cfg.surrogate_mode == SURROGATE_REMAINING:
        res.deviations.append("surrogate anchored at grad F_-J(w_o) (remaining-client anchor)")
    if cfg.gradient_mode == GS_PSEUDO:
        res.deviations.append("projection base is the round pseudo-gradient")
    return res


def fairness_multipliers(r, Lambda):
    """``mu_i = Lambda exp(r_i) / (1 + sum_k exp(r_k))``, evaluated without overflow."""
    r = np.asarray(r, dtype=np.float64)
    m = max(0.0, float(r.max())) if r.size else 0.0
    e = np.exp(r - m)
    return Lambda * e / (np.exp(-m) + e.sum())


def fairness_unlearn(spec, cfg, w_o):
    """Continued training where client ``i`` scales its local steps by ``1 + mu_i``.

    Regrets ``r_i = f_i(w) - f_i(w_o)`` are evaluated at each freshly aggregated
    model. If the sampled clients all satisfy ``r_i <= epsilon`` that model is
    returned; otherwise the multipliers are refreshed from the regrets.
    """
    cfg.validate()
    _require_unlearn_set(spec)
    fed.check_step_size(spec, cfg, spec.remaining)
    w_o = as_vector(w_o, copy=True)
    base = {i: spec.objectives[i].loss(w_o) for i in spec.remaining}
    rem = list(spec.remaining)
    regrets = {i: 0.0 for i in rem}
    mu = {i: 0.0 for i in rem}

    w = w_o.copy()
    traj = fed.Trajectory()
    traj.record(spec, w)
    log = []
    early = False
    for t in range(cfg.rounds):
        scales = {i: 1.0 + mu[i] for i in rem}
        w, sampled = fed.fedavg_round(w, spec, cfg, rem, t, fed.PHASE_UNLEARN, step_scales=scales)
        traj.record(spec, w, sampled)
        for i in sampled:
            regrets[i] = spec.objectives[i].loss(w) - base[i]
        max_r = max(regrets[i] for i in sampled)
        stop = cfg.epsilon is not None and max_r <= cfg.epsilon
        if not stop:
            new_mu = fairness_multipliers([regrets[i] for i in rem], cfg.Lambda)
            mu = {i: float(m) for i, m in zip(rem, new_mu)}
        log.append({
            "round": t,
            "max_regret": max_r,
            "mu_sum": sum(mu.values()),
            "mu": [mu[i] for i in rem],
            "regret": [regrets[i] for i in rem],
            "terminated": stop,
        })
        if stop:
            early = True
            break

    res = UnlearnResult(mechanism="fairness", w_u=w, trajectory=traj, fairness_log=log,
                        terminated_early=early)
    res.deviations.append("local step uses (1 + mu_i) grad f_i (Lagrangian form)")
    res.deviations.append("stopping regrets evaluated at the aggregated model")
    return res
