"""Strongly convex local objectives with exact constants and minimizers.

Two families are provided:

* :class:`QuadraticObjective` -- ridge-regularized least squares,
  ``(1/2n)||A w - b||^2 + (ridge/2)||w||^2``. Every optimum is a linear solve.
* :class:`LogisticObjective` -- ridge-regularized logistic loss with labels in
  ``{0, 1}``. Minimizers come from deterministic full-gradient descent.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError, SingularSystemError
from .linalg import norm

LOGISTIC_GRAD_TOL = 1e-10


@dataclass(frozen=True)
class ObjectiveConstants:
    mu: float
    L: float
    G: float
    sigma_sq: float

    def __post_init__(self):
        if not (self.mu <= self.L):
            raise ValueError(f"mu={self.mu} exceeds L={self.L}")


class _Objective:
    kind = None

    def __init__(self, A, ridge, dim=None):
        A = np.asarray(A, dtype=np.float64)
        if A.size == 0:
            if dim is None:
                raise DimensionError("empty design needs an explicit dim")
            A = np.zeros((0, int(dim)))
        elif A.ndim == 1:
            A = A.reshape(1, -1)
        if ridge < 0:
            raise ConfigError("ridge must be nonnegative")
        self.A = A
        self.ridge = float(ridge)
        self.n = A.shape[0]
        self.d = A.shape[1]
        self.A.setflags(write=False)

    def _check(self, w):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.d,):
            raise DimensionError(f"expected dimension {self.d}, got {w.shape}")
        return w

    def gram_eigenvalues(self):
        """Eigenvalues of ``A^T A / n`` (ascending)."""
        if self.n == 0:
            return np.zeros(self.d)
        return np.linalg.eigvalsh(self.A.T @ self.A / self.n)

    def sample_gradients(self, w):
        """Per-sample gradients, one row per data point."""
        raise NotImplementedError

    def stochastic_grad(self, w, batch_size, rng):
        """Mini-batch gradient over ``batch_size`` rows drawn without replacement."""
        w = self._check(w)
        if not (1 <= batch_size <= self.n):
            raise ConfigError(f"batch_size {batch_size} outside [1, {self.n}]")
        if batch_size == self.n:
            return self.grad(w)
        idx = np.sort(rng.choice(self.n, size=batch_size, replace=False))
        return self._batch_grad(w, idx)

    def batch_variance(self, w, batch_size):
        """Exact ``E||g_B(w) - grad(w)||^2`` for uniform batches without replacement."""
        w = self._check(w)
        if batch_size is None or batch_size >= self.n:
            return 0.0
        per = self.sample_gradients(w)
        dev = per - per.mean(axis=0)
        s2 = float(np.sum(dev * dev)) / self.n
        return s2 * (self.n - batch_size) / (batch_size * (self.n - 1))


class QuadraticObjective(_Objective):
    kind = "quadratic"

    def __init__(self, A, b, ridge=0.0, dim=None):
        super().__init__(A, ridge, dim)
        b = np.asarray(b, dtype=np.float64).reshape(-1)
        if b.shape[0] != self.n:
            raise DimensionError(f"{self.n} rows but {b.shape[0]} targets")
        self.b = b
        self.b.setflags(write=False)
        if self.n:
            self._gram = self.A.T @ self.A / self.n
            self._atb = self.A.T @ self.b / self.n
        else:
            self._gram = np.zeros((self.d, self.d))
            self._atb = np.zeros(self.d)

    def loss(self, w):
        w = self._check(w)
        val = 0.5 * self.ridge * float(w @ w)
        if self.n:
            r = self.A @ w - self.b
            val += 0.5 * float(r @ r) / self.n
        return val

    def grad(self, w):
        w = self._check(w)
        g = self.ridge * w
        if self.n:
            g = g + self.A.T @ (self.A @ w - self.b) / self.n
        return g

    def _batch_grad(self, w, idx):
        A = self.A[idx]
        return A.T @ (A @ w - self.b[idx]) / len(idx) + self.ridge * w

    def sample_gradients(self, w):
        w = self._check(w)
        r = self.A @ w - self.b
        return self.A * r[:, None] + self.ridge * w

    def hessian(self):
        return self._gram + self.ridge * np.eye(self.d)

    def linear_term(self):
        """``c`` such that ``grad(w) = hessian() @ w - c``."""
        return self._atb.copy()

    def variance_cap(self, radius, batch_size):
        """Upper bound on the batch variance over the ball ``||w|| <= radius``.

        Per-sample deviations are affine in ``w``: ``(a a^T - Gram) w - (a b - A^T b/n)``.
        """
        if batch_size is None or batch_size >= self.n:
            return 0.0
        s2 = 0.0
        for a, bj in zip(self.A, self.b):
            M = np.outer(a, a) - self._gram
            c = a * bj - self._atb
            s2 += (np.linalg.norm(M, 2) * radius + norm(c)) ** 2
        s2 /= self.n
        return s2 * (self.n - batch_size) / (batch_size * (self.n - 1))

    def constants(self, radius=1.0, batch_size=None):
        eig = self.gram_eigenvalues()
        mu = self.ridge + float(eig[0])
        L = self.ridge + float(eig[-1])
        mu = min(mu, L)
        G = L * radius + norm(self.grad(np.zeros(self.d)))
        return ObjectiveConstants(mu=mu, L=L, G=G, sigma_sq=self.variance_cap(radius, batch_size))


class LogisticObjective(_Objective):
    kind = "logistic"

    def __init__(self, A, y, ridge, dim=None):
        super().__init__(A, ridge, dim)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.shape[0] != self.n:
            raise DimensionError(f"{self.n} rows but {y.shape[0]} labels")
        if np.any((y != 0) & (y != 1)):
            raise ConfigError("logistic labels must be 0 or 1")
        self.y = y
        self.y.setflags(write=False)

    def loss(self, w):
        w = self._check(w)
        val = 0.5 * self.ridge * float(w @ w)
        if self.n:
            z = self.A @ w
            val += float(np.mean(np.logaddexp(0.0, z) - self.y * z))
        return val

    def grad(self, w):
        w = self._check(w)
        g = self.ridge * w
        if self.n:
            g = g + self.A.T @ (expit(self.A @ w) - self.y) / self.n
        return g

    def _batch_grad(self, w, idx):
        A = self.A[idx]
        return A.T @ (expit(A @ w) - self.y[idx]) / len(idx) + self.ridge * w

    def sample_gradients(self, w):
        w = self._check(w)
        s = expit(self.A @ w) - self.y
        return self.A * s[:, None] + self.ridge * w

    def variance_cap(self, radius, batch_size):
        if batch_size is None or batch_size >= self.n:
            return 0.0
        # |sigmoid - y| <= 1, so each deviation is at most ||a_j|| + mean ||a||
        rows = np.linalg.norm(self.A, axis=1)
        s2 = float(np.mean((rows + rows.mean()) ** 2))
        return s2 * (self.n - batch_size) / (batch_size * (self.n - 1))

    def constants(self, radius=1.0, batch_size=None):
        eig = self.gram_eigenvalues()
        L = self.ridge + float(eig[-1]) / 4.0
        G = self.ridge * radius
        if self.n:
            G += float(np.mean(np.linalg.norm(self.A, axis=1)))
        return ObjectiveConstants(mu=self.ridge, L=L, G=G, sigma_sq=self.variance_cap(radius, batch_size))


def constants(objective, radius=1.0, batch_size=None):
    return objective.constants(radius=radius, batch_size=batch_size)


def _validate_weighted(weighted):
    if not weighted:
        raise ConfigError("exact_minimizer needs at least one objective")
    kinds = {obj.kind for obj, _ in weighted}
    if len(kinds) != 1:
        raise ConfigError("cannot mix quadratic and logistic objectives")
    dims = {obj.d for obj, _ in weighted}
    if len(dims) != 1:
        raise DimensionError(f"objectives disagree on dimension: {sorted(dims)}")
    total = sum(wt for _, wt in weighted)
    if abs(total - 1.0) > 1e-12:
        raise ConfigError(f"objective weights sum to {total!r}, not 1")
    return kinds.pop()


def weighted_quadratic_system(weighted):
    """Hessian ``H`` and vector ``c`` with ``grad = H w - c`` for a weighted quadratic sum."""
    d = weighted[0][0].d
    H = np.zeros((d, d))
    c = np.zeros(d)
    for obj, wt in weighted:
        H += wt * obj.hessian()
        c += wt * obj.linear_term()
    return H, c


def solve_spd(H, c):
    eig = np.linalg.eigvalsh(0.5 * (H + H.T))
    if eig[0] <= 1e-13 * max(1.0, abs(eig[-1])):
        raise SingularSystemError(f"normal equations are singular (lambda_min={eig[0]:.3e})")
    return np.linalg.solve(H, c)


def exact_minimizer(weighted, max_iter=2_000_000):
    """Minimizer of ``sum_k weight_k f_k``.

    ``weighted`` is a list of ``(objective, weight)`` pairs with weights summing to 1.
    """
    kind = _validate_weighted(weighted)
    if kind == "quadratic":
        H, c = weighted_quadratic_system(weighted)
        return solve_spd(H, c)

    ridge = sum(wt * obj.ridge for obj, wt in weighted)
    if ridge <= 0:
        raise SingularSystemError("logistic minimizer requires ridge > 0")
    L = sum(wt * obj.constants().L for obj, wt in weighted)
    d = weighted[0][0].d
    w = np.zeros(d)
    step = 1.0 / L
    for _ in range(max_iter):
        g = np.zeros(d)
        for obj, wt in weighted:
            g = g + wt * obj.grad(w)
        if norm(g) <= LOGISTIC_GRAD_TOL:
            return w
        w = w - step * g
    raise SingularSystemError("logistic gradient descent did not reach tolerance")
