"""Verification, stability and fairness metrics plus the trade-off bounds.

Every quantity is evaluated against exact optima (``w*``, ``w^{r*}``, each
``w_i*``) from :func:`objectives.exact_minimizer`.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Dict

import numpy as np
from scipy.optimize import nnls

from . import federation as fed
from .errors import ConfigError, UnsupportedError
from .linalg import norm_sq
from .objectives import exact_minimizer, solve_spd, weighted_quadratic_system


class Oracles:
    """Lazily computed exact optima for one federation."""

    def __init__(self, spec):
        self.spec = spec

    @cached_property
    def w_star(self):
        return exact_minimizer(self.spec.global_terms())

    @cached_property
    def w_r_star(self):
        return exact_minimizer(self.spec.remaining_terms())

    @cached_property
    def local_minimizers(self):
        """``{i: w_i*}`` for every remaining client."""
        return {i: exact_minimizer([(self.spec.objectives[i], 1.0)]) for i in self.spec.remaining}

    @cached_property
    def F_star(self):
        return fed.global_loss(self.spec, self.w_star)

    @cached_property
    def F_rem_star(self):
        return fed.remaining_loss(self.spec, self.w_r_star)

    @cached_property
    def local_optimum_average(self):
        """``sum_{i not in J} p'_i f_i(w_i*)``."""
        total = 0.0
        for pi, i in zip(self.spec.p_prime, self.spec.remaining):
            total += pi * self.spec.objectives[i].loss(self.local_minimizers[i])
        return total


def _oracles(spec, oracles):
    return Oracles(spec) if oracles is None else oracles


def _points(w_u):
    """A single model or a stack of replicate models, as a list."""
    arr = np.asarray(w_u, dtype=np.float64)
    if arr.ndim == 1:
        return [arr]
    return list(arr)


def _expected(fn, w_u):
    pts = _points(w_u)
    total = 0.0
    for w in pts:
        total += fn(w)
    return total / len(pts)


def metric_V(spec, w_u, oracles=None):
    """Remaining-objective gap to the optimal unlearned model."""
    o = _oracles(spec, oracles)
    return float(_expected(lambda w: fed.remaining_loss(spec, w), w_u) - o.F_rem_star)


def metric_S(spec, w_u, oracles=None):
    """Global-objective gap to the optimal federated model."""
    o = _oracles(spec, oracles)
    return float(_expected(lambda w: fed.global_loss(spec, w), w_u) - o.F_star)


def utility_changes(spec, w_u, oracles=None):
    """``Delta f_i = E f_i(w_u) - f_i(w*)`` for remaining clients, in roster order."""
    o = _oracles(spec, oracles)
    out = []
    for i in spec.remaining:
        obj = spec.objectives[i]
        out.append(_expected(obj.loss, w_u) - obj.loss(o.w_star))
    return np.array(out)


def weighted_mad(values, weights):
    values = np.asarray(values, dtype=np.float64)
    mean = 0.0
    for wt, v in zip(weights, values):
        mean += wt * v
    total = 0.0
    for wt, v in zip(weights, values):
        total += wt * abs(v - mean)
    return float(total)


def metric_Q(spec, w_u, oracles=None):
    """Weighted mean absolute deviation of the remaining clients' utility changes."""
    return weighted_mad(utility_changes(spec, w_u, oracles), spec.p_prime)


@dataclass
class HeterogeneityEstimate:
    zeta_sq: float
    beta_sq: float
    zeta_prime_sq: float
    beta_prime_sq: float
    residual: float
    residual_prime: float = 0.0


def _envelope(x, y):
    """Nonnegative affine upper envelope ``y <= a + b x`` over all probes.

    NNLS fit of ``(a, b)``, then ``a`` is raised until every probe is covered.
    """
    X = np.column_stack([np.ones_like(x), x])
    scale = max(1.0, float(np.max(np.abs(y)))) if y.size else 1.0
    (a, b), _ = nnls(X / scale, y / scale)
    fit = a + b * x
    rms = float(np.sqrt(np.mean((y - fit) ** 2)))
    a += max(0.0, float(np.max(y - fit)))
    return max(a, 0.0), max(b, 0.0), rms


def estimate_heterogeneity(spec, probe_points, w_o=None, L_used=None, clients=None):
    """Fit the heterogeneity constants at ``probe_points``.

    ``(zeta^2, beta^2)`` bound ``sum_i alpha_i ||grad f_i - grad F_-J||^2`` by
    ``zeta^2 + beta^2 ||grad F_-J||^2`` over ``clients`` (remaining clients by
    default). ``(zeta'^2, beta'^2)`` do the same for the removed-client
    surrogate ``grad F_J(w_o) + L (w - w_o)``; without ``w_o`` the exact
    ``grad F_J(w)`` is used.
    """
    probes = [np.asarray(p, dtype=np.float64) for p in probe_points]
    if len(probes) < 2:
        raise ConfigError("need at least two probe points")
    clients = list(spec.remaining if clients is None else clients)
    alphas = fed.aggregation_alphas(spec, clients)
    L = spec.max_L(spec.remaining) if L_used is None else L_used
    anchor = fed.removed_grad(spec, w_o) if (w_o is not None and spec.unlearn_set) else None

    x, y, y2 = [], [], []
    for w in probes:
        gF = fed.remaining_grad(spec, w)
        x.append(norm_sq(gF))
        dev = 0.0
        for a, i in zip(alphas, clients):
            dev += a * norm_sq(spec.objectives[i].grad(w) - gF)
        y.append(dev)
        if spec.unlearn_set:
            g_hat = anchor + L * (w - w_o) if anchor is not None else fed.removed_grad(spec, w)
            y2.append(norm_sq(g_hat - gF))
        else:
            y2.append(0.0)
    x, y, y2 = np.array(x), np.array(y), np.array(y2)
    z, b, res = _envelope(x, y)
    z2, b2, res2 = _envelope(x, y2)
    return HeterogeneityEstimate(z, b, z2, b2, res, res2)


def default_probes(spec, w_o, count=16, seed=0, oracles=None):
    """Oracle points plus uniform draws from a ball around ``w^{r*}``.

    The radius covers ``w_o`` and ``w*`` with 50% margin, which contains every
    iterate of a descent method started at ``w_o``.
    """
    o = _oracles(spec, oracles)
    c = o.w_r_star
    radius = 1.5 * max(np.linalg.norm(w_o - c), np.linalg.norm(o.w_star - c), 1e-3)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(211,)))
    pts = [c, o.w_star, np.asarray(w_o, dtype=np.float64)]
    for _ in range(count):
        u = rng.standard_normal(spec.d)
        u /= np.linalg.norm(u)
        pts.append(c + radius * rng.uniform() ** (1.0 / spec.d) * u)
    return pts


def gradient_divergence(spec, w_o):
    """``||grad F_-J(w_o) - grad F_J(w_o)||^2``."""
    if not spec.unlearn_set:
        return 0.0
    return norm_sq(fed.remaining_grad(spec, w_o) - fed.removed_grad(spec, w_o))


def erm_gap(spec, w_o, oracles=None):
    o = _oracles(spec, oracles)
    return fed.global_loss(spec, w_o) - o.F_star


def verification_step_size(T, beta_sq, mu, L):
    """Step size under which the verification lower bound is stated.

    Returns ``(eta, ambiguous)``; ``ambiguous`` flags ``beta_S <= 1`` where the
    ``min{...}`` branch flips sign (and is 0/0 at exactly 1).
    """
    beta = math.sqrt(beta_sq)
    num = beta - 1.0
    den = min(mu * num, L * num)
    if num == 0.0:
        return 1.0 / (T * mu), True
    return (1.0 / (T * math.sqrt(mu))) * math.sqrt(num / den), beta < 1.0


def bound_C1(spec, w_o, T, estimates, sigma_bar_sq=0.0, zeta_bar_sq=None, oracles=None):
    """Verification lower bound; returns a dict with every ingredient."""
    if T < 1:
        raise ConfigError("T must be at least 1")
    o = _oracles(spec, oracles)
    L = spec.max_L()
    zeta_bar = estimates.zeta_sq if zeta_bar_sq is None else zeta_bar_sq
    gap_opt = fed.remaining_loss(spec, o.w_star) - o.F_rem_star
    gap_train = fed.remaining_loss(spec, w_o) - fed.remaining_loss(spec, o.w_star)
    factor = 1.0 + (estimates.beta_sq - 1.0) / T
    noise = (sigma_bar_sq + zeta_bar) / (2.0 * L * T)
    eta, ambiguous = verification_step_size(T, estimates.beta_sq, spec.min_mu(), L)
    return {
        "C1": factor * (gap_opt + gap_train) + noise,
        "dF_rem_wstar_wrstar": gap_opt,
        "dF_rem_wo_wstar": gap_train,
        "round_factor": factor,
        "noise_term": noise,
        "sigma_bar_sq": sigma_bar_sq,
        "zeta_bar_sq": zeta_bar,
        "eta": eta,
        "eta_ambiguous": ambiguous,
    }


def bound_C2(spec, w_o, eta, T, oracles=None):
    div = gradient_divergence(spec, w_o)
    delta = erm_gap(spec, w_o, oracles)
    first = spec.P_J * eta * T / 2.0 * div
    return {"C2": first + delta, "divergence_term": first, "grad_divergence_sq": div, "delta": delta}


def bound_Cs(spec, w_o, C1, oracles=None):
    mu = spec.min_mu()
    div = gradient_divergence(spec, w_o)
    delta = erm_gap(spec, w_o, oracles)
    return spec.P_J / (math.sqrt(2.0) * mu) * div + delta + C1


def bound_Cq(spec, oracles=None):
    """``F*_-J - sum p'_i f_i(w_i*)``."""
    o = _oracles(spec, oracles)
    return float(o.F_rem_star - o.local_optimum_average)


def verification_stability_phi(lam, P_J, cos_theta_sq):
    return lam * lam * P_J * P_J * (1.0 + cos_theta_sq)


def bound_thm4(spec, cfg, estimates, T, w_o, eps_ratio, cos_theta_sq=1.0, sigma_sq=0.0,
               oracles=None):
    """Upper bound ``V <= chi1 + chi2`` for the stability mechanism.

    ``eps_ratio`` is the measured worst per-round ratio of remaining-gradient
    norms (end of local training over start of round).
    """
    if T < 1:
        raise ConfigError("T must be at least 1")
    o = _oracles(spec, oracles)
    L = spec.max_L()
    phi = verification_stability_phi(cfg.lam, spec.P_J, cos_theta_sq)
    zeta2 = phi * estimates.zeta_prime_sq
    beta2 = phi * eps_ratio * estimates.beta_prime_sq + phi * eps_ratio + 1.0
    D = fed.remaining_loss(spec, w_o) - o.F_rem_star
    b_s = estimates.beta_sq
    base1 = 1.0 - 1.0 / (2.0 * L * T) + (b_s + 1.0) / (L * T * T)
    base2 = 1.0 - 1.0 / (L * T) + (beta2 + 1.0) / (L * T * T)
    chi1 = 0.5 * base1**T * D + (sigma_sq + estimates.zeta_sq) / (2.0 * L * T)
    chi2 = 0.5 * base2**T * D + zeta2 / (2.0 * L * T)
    delta1 = math.sqrt(max(0.0, 1.0 - 16.0 * L * (b_s + 1.0)))
    delta2 = math.sqrt(max(0.0, 1.0 - L * (beta2 + 1.0)))
    T_min = max(2.0 * b_s + 2.0, (1.0 + delta1) / (4.0 * L), 0.5 * (beta2 + 1.0), (1.0 + delta2) / L)
    return {
        "chi1": chi1,
        "chi2": chi2,
        "phi": phi,
        "zeta_dd_sq": zeta2,
        "beta_dd_sq": beta2,
        "D": D,
        "eps_ratio": eps_ratio,
        "T_min": T_min,
        "T_admissible": T >= T_min,
        "prescribed_lr": 2.0 / (L * T),
    }


def bound_thm5(spec, w_o, Lambda, rho, oracles=None):
    """Fairness-threshold and saddle-gap values; ``V <= 4 rho^2 Lambda``."""
    if not (Lambda > 0):
        raise ConfigError("Lambda must be positive for the fairness bound")
    o = _oracles(spec, oracles)
    eps = (fed.remaining_loss(spec, w_o) - o.F_rem_star) / Lambda
    nu = 2.0 * rho * rho * Lambda
    return {"epsilon_fair": eps, "nu": nu, "rho": rho, "V_guarantee": 2.0 * nu}


def measure_rho(spec, trajectory, w_o, epsilon):
    """``max_{i,t} |r_i(w_t) - epsilon|`` over the remaining clients of a run."""
    base = spec.client_losses(w_o)
    worst = 0.0
    for losses in trajectory.client_losses:
        for i in spec.remaining:
            worst = max(worst, abs(losses[i] - base[i] - epsilon))
    return worst


def saddle_round_estimate(nu, C, Lambda, mu, gamma, dist_sq, M=1.0, kappa=1.0):
    """Round estimate for a ``nu``-approximate saddle point (diagnostic only).

    ``M`` and ``kappa`` are unspecified constants and default to 1; returns
    ``inf`` when the denominator is not positive.
    """
    cc = 2.0 * C / ((1.0 + Lambda) * mu) + (1.0 + Lambda) * mu * gamma / 2.0 * dist_sq
    den = nu * (gamma + 1.0) - 2.0 * kappa * cc
    if den <= 0:
        return math.inf
    return (M / nu + 2.0 * kappa * cc * (gamma - 1.0)) / den


def w_H_star(spec, lam, w_o, L_used=None):
    """Closed-form minimizer of the penalized surrogate problem (quadratics only)."""
    if spec.kind != "quadratic":
        raise UnsupportedError("w^{H*} has a closed form only for quadratic objectives")
    L = spec.max_L(spec.remaining) if L_used is None else L_used
    P = spec.P_J
    H_rem, c_rem = weighted_quadratic_system(spec.remaining_terms())
    g_anchor = fed.removed_grad(spec, w_o) if spec.unlearn_set else np.zeros(spec.d)
    k = 1.0 + (1.0 - P) * lam
    H = k * H_rem + P * lam * L * np.eye(spec.d)
    c = k * c_rem - P * lam * g_anchor + P * lam * L * np.asarray(w_o)
    return solve_spd(H, c)


def diag_thm3(spec, cfg, run, estimates, w_o, G=None, sigma_sq=0.0, beta_step=None, gamma=None,
              oracles=None):
    """Labelled ingredients of the convergence bound for the stability mechanism.

    Uses the diminishing schedule ``eta_l = beta/(2(t+gamma))``; by default
    ``beta = 5/mu`` and ``gamma = 2 L beta`` so that ``eta_l <= 1/(4L)``.
    """
    if spec.kind != "quadratic":
        raise UnsupportedError("convergence diagnostics need quadratic objectives")
    o = _oracles(spec, oracles)
    L = spec.max_L()
    mu = spec.min_mu()
    if G is None:
        G = default_G(spec, oracles=o)
    log = run.correction_log or []
    cos_sq = max((row["cos_theta_sq"] for row in log), default=1.0)
    phi = verification_stability_phi(cfg.lam, spec.P_J, cos_sq)
    gamma_opt = o.F_rem_star - o.local_optimum_average
    E = cfg.local_epochs
    ratio = cfg.lr_global / cfg.lr_local if cfg.lr_local > 0 else 0.0
    surcharge = 2.0 * phi * ratio**2 * ((estimates.beta_prime_sq + 1.0) * G**2 + estimates.zeta_prime_sq)
    B = (sigma_sq + 6.0 * L * gamma_opt
         + 8.0 * (estimates.zeta_sq + (estimates.beta_sq + 1.0) * G**2) * (E - 1) ** 2
         + surcharge)
    beta_step = 5.0 / mu if beta_step is None else beta_step
    gamma = 2.0 * L * beta_step if gamma is None else gamma
    dist_o = norm_sq(o.w_r_star - w_o)
    w_h = w_H_star(spec, cfg.lam, w_o, cfg.L_used)
    dist_h = norm_sq(o.w_r_star - w_h)
    den = beta_step * mu - 4.0
    v = max(beta_step**2 * B / den if den > 0 else math.inf, (gamma + 1.0) * dist_o)
    t = len(run.trajectory) - 1
    return {
        "phi": phi,
        "cos_theta_sq": cos_sq,
        "Gamma": gamma_opt,
        "B": B,
        "B_correction_surcharge": surcharge,
        "v": v,
        "rhs_decay": L * v / (gamma + t),
        "rhs_penalty": spec.P_J**2 * cfg.lam**2 * G**2 / (2.0 * L),
        "rhs_offset": L / 2.0 * (dist_o + dist_h),
        "dist_wrstar_wo_sq": dist_o,
        "dist_wrstar_wH_sq": dist_h,
        "beta_step": beta_step,
        "gamma": gamma,
        "G": G,
    }


def default_radius(spec, oracles=None):
    """Ten times the norm of the farthest client minimizer (floor 1)."""
    far = 0.0
    for obj in spec.objectives:
        far = max(far, float(np.linalg.norm(exact_minimizer([(obj, 1.0)]))))
    return 10.0 * max(far, 0.1)


def default_G(spec, radius=None, oracles=None):
    radius = default_radius(spec) if radius is None else radius
    return max(obj.constants(radius=radius).G for obj in spec.objectives)


BOUND_FIELDS = (
    "V", "S", "Q", "C1", "C2", "Cs", "Cq", "delta", "chi1", "chi2",
    "epsilon_fair", "nu", "rho", "phi", "cos_theta_sq", "thm3_rhs_terms",
    "sigma_bar_sq", "zeta_bar_sq",
)


@dataclass
class BoundReport:
    V: float
    S: float
    Q: float
    C1: float
    C2: float
    Cs: float
    Cq: float
    delta: float
    chi1: float
    chi2: float
    epsilon_fair: float
    nu: float
    rho: float
    phi: float
    cos_theta_sq: float
    thm3_rhs_terms: Dict[str, float]
    sigma_bar_sq: float
    zeta_bar_sq: float
    ingredients: Dict[str, object] = field(default_factory=dict)

    def to_dict(self):
        return _clean(asdict(self))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def validate_report(data):
    """Check a decoded ``bounds.json`` against the published field list."""
    missing = [k for k in BOUND_FIELDS if k not in data]
    if missing:
        raise ValueError(f"bound report missing fields: {missing}")
    for k in BOUND_FIELDS:
        if k == "thm3_rhs_terms":
            if not isinstance(data[k], dict) or not data[k]:
                raise ValueError("thm3_rhs_terms must be a non-empty mapping")
            continue
        if not isinstance(data[k], (int, float)) or not math.isfinite(data[k]):
            raise ValueError(f"field {k} is not a finite number: {data[k]!r}")
    return True
