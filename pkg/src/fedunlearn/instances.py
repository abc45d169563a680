"""Random and hand-built federations used by presets, sweeps and tests."""

import numpy as np

from .federation import FederationSpec
from .objectives import QuadraticObjective


def random_quadratic_federation(rng, n_clients=None, dim=None, ridge=0.1, spread=1.0):
    """Random least-squares clients with a random unlearn set of weight at most 1/2.

    Client ``i`` fits ``b = A x_i + noise`` where the ground truths ``x_i`` are
    scattered with standard deviation ``spread``.
    """
    N = int(rng.integers(3, 7)) if n_clients is None else n_clients
    d = int(rng.integers(2, 9)) if dim is None else dim
    objectives = []
    for _ in range(N):
        n = int(rng.integers(d, 3 * d + 1))
        A = rng.standard_normal((n, d))
        truth = spread * rng.standard_normal(d)
        b = A @ truth + 0.1 * rng.standard_normal(n)
        objectives.append(QuadraticObjective(A, b, ridge))
    sizes = np.array([o.n for o in objectives], dtype=np.float64)
    p = sizes / sizes.sum()
    while True:
        k = int(rng.integers(1, N))
        J = sorted(rng.choice(N, size=k, replace=False).tolist())
        if p[J].sum() <= 0.5:
            return FederationSpec(objectives, sizes=sizes, unlearn_set=J)


def identical_federation(obj, n_clients, unlearn_set):
    """``n_clients`` copies of the same objective."""
    return FederationSpec([obj] * n_clients, sizes=[obj.n] * n_clients, unlearn_set=unlearn_set)
