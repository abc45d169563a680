"""FedAvg engine over a fixed client roster.

Randomness is never shared between clients: each (phase, client, round) triple
gets its own ``SeedSequence`` child of the run seed, and client sampling uses a
per-round child of its own. Results therefore do not depend on how many worker
threads execute the clients.
"""

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ConfigError, DivergenceError, SamplingError
from .linalg import as_vector, weighted_sum

DIVERGENCE_LOSS = 1e12

PHASE_TRAIN = 0
PHASE_UNLEARN = 1
_SAMPLING_KEY = 7


def stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


class FederationSpec:
    """Client objectives plus the aggregation weights before and after unlearning.

    ``p`` defaults to sample-count weights when ``sizes`` are given; an explicit
    ``weights`` vector overrides it.
    """

    def __init__(self, objectives, sizes=None, unlearn_set=(), weights=None, enforce_pj=True):
        self.objectives = list(objectives)
        N = len(self.objectives)
        if N == 0:
            raise ConfigError("federation has no clients")
        if weights is None:
            if sizes is None:
                sizes = [obj.n for obj in self.objectives]
            sizes = np.asarray(sizes, dtype=np.float64)
            if sizes.shape != (N,) or np.any(sizes <= 0):
                raise ConfigError("need one positive sample count per client")
            weights = sizes / sizes.sum()
        p = np.asarray(weights, dtype=np.float64)
        if p.shape != (N,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ConfigError("aggregation weights must be nonnegative and sum to 1")
        dims = {obj.d for obj in self.objectives}
        if len(dims) != 1:
            raise ConfigError(f"clients disagree on dimension: {sorted(dims)}")
        self.d = dims.pop()
        self.p = p
        self.N = N

        J = sorted({int(j) for j in unlearn_set})
        if any(j < 0 or j >= N for j in J):
            raise ConfigError(f"unlearn set {J} references unknown clients")
        if len(J) == N:
            raise ConfigError("cannot unlearn every client")
        self.unlearn_set = tuple(J)
        self.remaining = tuple(i for i in range(N) if i not in set(J))
        self.P_J = float(sum(p[j] for j in J))
        if enforce_pj and self.P_J > 0.5 + 1e-12:
            raise ConfigError(f"P_J = {self.P_J:.4f} exceeds 1/2")
        rem = np.array([p[i] for i in self.remaining])
        self.p_prime = rem / rem.sum()
        self.removed_weights = np.array([p[j] for j in J]) / self.P_J if J else np.zeros(0)

    @property
    def kind(self):
        return self.objectives[0].kind

    def with_unlearn_set(self, unlearn_set):
        return FederationSpec(self.objectives, unlearn_set=unlearn_set, weights=self.p)

    # weighted objectives, in the (objective, weight) form exact_minimizer takes
    def global_terms(self):
        return [(self.objectives[i], float(self.p[i])) for i in range(self.N)]

    def remaining_terms(self):
        return [(self.objectives[i], float(w)) for i, w in zip(self.remaining, self.p_prime)]

    def removed_terms(self):
        return [(self.objectives[j], float(w)) for j, w in zip(self.unlearn_set, self.removed_weights)]

    def client_losses(self, w):
        return np.array([obj.loss(w) for obj in self.objectives])

    def client_grads(self, w):
        return [obj.grad(w) for obj in self.objectives]

    def max_L(self, clients=None):
        idx = range(self.N) if clients is None else clients
        return max(self.objectives[i].constants().L for i in idx)

    def min_mu(self, clients=None):
        idx = range(self.N) if clients is None else clients
        return min(self.objectives[i].constants().mu for i in idx)


def _weighted(terms, fn):
    total = 0.0
    for obj, wt in terms:
        total += wt * fn(obj)
    return total


def global_loss(spec, w):
    return _weighted(spec.global_terms(), lambda o: o.loss(w))


def remaining_loss(spec, w):
    return _weighted(spec.remaining_terms(), lambda o: o.loss(w))


def removed_loss(spec, w):
    if not spec.unlearn_set:
        return 0.0
    return _weighted(spec.removed_terms(), lambda o: o.loss(w))


def _weighted_grad(terms, w):
    return weighted_sum([o.grad(w) for o, _ in terms], [wt for _, wt in terms])


def global_grad(spec, w):
    return _weighted_grad(spec.global_terms(), w)


def remaining_grad(spec, w):
    return _weighted_grad(spec.remaining_terms(), w)


def removed_grad(spec, w):
    return _weighted_grad(spec.removed_terms(), w)


@dataclass
class TrainConfig:
    rounds: int = 100
    local_epochs: int = 1
    lr_local: float = 0.1
    batch_size: Optional[int] = None  # None means full batch
    sample_fraction: float = 1.0
    seed: int = 0
    threads: int = 1

    def validate(self):
        if self.rounds < 0:
            raise ConfigError("rounds must be nonnegative")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be at least 1")
        if not (self.lr_local >= 0) or not np.isfinite(self.lr_local):
            raise ConfigError("lr_local must be a finite nonnegative number")
        if not (0 < self.sample_fraction <= 1):
            raise ConfigError("sample_fraction must lie in (0, 1]")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")


@dataclass
class Trajectory:
    weights: List[np.ndarray] = field(default_factory=list)
    F: List[float] = field(default_factory=list)
    F_rem: List[float] = field(default_factory=list)
    client_losses: List[np.ndarray] = field(default_factory=list)
    sampled: List[Optional[tuple]] = field(default_factory=list)

    def record(self, spec, w, sampled=None):
        losses = spec.client_losses(w)
        F = 0.0
        for pi, fi in zip(spec.p, losses):
            F += pi * fi
        F_rem = 0.0
        for pi, i in zip(spec.p_prime, spec.remaining):
            F_rem += pi * losses[i]
        if not (np.isfinite(F) and np.isfinite(F_rem)) or max(F, F_rem) > DIVERGENCE_LOSS:
            raise DivergenceError(f"loss diverged at round {len(self.weights)} (F={F:.3e})")
        self.weights.append(np.array(w, dtype=np.float64))
        self.F.append(float(F))
        self.F_rem.append(float(F_rem))
        self.client_losses.append(losses)
        self.sampled.append(None if sampled is None else tuple(sampled))

    @property
    def final(self):
        return self.weights[-1]

    def __len__(self):
        return len(self.weights)

    def rows(self):
        for t, (F, Fr, fl) in enumerate(zip(self.F, self.F_rem, self.client_losses)):
            yield [t, repr(float(F)), repr(float(Fr))] + [repr(float(v)) for v in fl]

    def to_csv(self, path):
        N = len(self.client_losses[0]) if self.client_losses else 0
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "F", "F_rem"] + [f"f_{i}" for i in range(N)])
            writer.writerows(self.rows())


def sample_clients(pool, fraction, seed, round_index):
    """Uniform sample without replacement, sorted; full participation draws nothing."""
    pool = list(pool)
    if not pool:
        raise SamplingError("no clients available to sample")
    if fraction >= 1.0:
        return pool
    m = max(1, int(round(fraction * len(pool))))
    rng = stream(seed, _SAMPLING_KEY, round_index)
    picked = rng.choice(len(pool), size=m, replace=False)
    return [pool[k] for k in sorted(picked)]


def local_train(obj, w_start, config, client_id, round_index, phase, step_scale=1.0):
    """``E`` local (mini-batch) gradient steps from ``w_start``."""
    w = np.array(w_start, dtype=np.float64)
    full = config.batch_size is None or config.batch_size >= obj.n
    rng = None if full else stream(config.seed, phase, client_id, round_index)
    lr = config.lr_local * step_scale
    for _ in range(config.local_epochs):
        g = obj.grad(w) if full else obj.stochastic_grad(w, config.batch_size, rng)
        w = w - lr * g
    return w


def aggregation_alphas(spec, sampled):
    p = np.array([spec.p[i] for i in sampled])
    return p / p.sum()


def run_clients(spec, w_t, config, sampled, round_index, phase, step_scales=None):
    """Local training for every sampled client, in parallel when ``config.threads > 1``."""
    def job(i):
        scale = 1.0 if step_scales is None else step_scales.get(i, 1.0)
        return local_train(spec.objectives[i], w_t, config, i, round_index, phase, scale)

    if config.threads > 1 and len(sampled) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(job, sampled))
    return [job(i) for i in sampled]


def fedavg_round(w_t, spec, config, client_filter=None, round_index=0, phase=PHASE_TRAIN,
                 step_scales=None):
    """One FedAvg round; returns ``(w_next, sampled)``.

    ``client_filter`` lists the clients allowed to participate (all by default).
    """
    pool = list(range(spec.N)) if client_filter is None else list(client_filter)
    sampled = sample_clients(pool, config.sample_fraction, config.seed, round_index)
    results = run_clients(spec, w_t, config, sampled, round_index, phase, step_scales)
    alphas = aggregation_alphas(spec, sampled)
    return weighted_sum(results, alphas), sampled


def check_step_size(spec, config, clients=None):
    L = spec.max_L(clients)
    if config.lr_local > 1.0 / L:
        warnings.warn(f"lr_local={config.lr_local:g} exceeds 1/L={1.0 / L:g}", stacklevel=3)


def train(spec, config, init=None):
    """Run ``config.rounds`` FedAvg rounds over all clients; the last point is ``w^o``."""
    config.validate()
    check_step_size(spec, config)
    w = np.zeros(spec.d) if init is None else as_vector(init, copy=True)
    traj = Trajectory()
    traj.record(spec, w)
    for t in range(config.rounds):
        w, sampled = fedavg_round(w, spec, config, None, t, PHASE_TRAIN)
        traj.record(spec, w, sampled)
    return traj
