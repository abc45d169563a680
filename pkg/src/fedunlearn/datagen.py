"""Synthetic non-IID client data.

Each class ``c`` has a Gaussian prototype; samples are ``N(proto_c, noise_sd^2 I)``.
Class counts per client follow either a rotating class slice or a Dirichlet
label-skew draw.
"""

import csv
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .errors import ConfigError

# spawn-key tags keep the data streams disjoint from the training streams
_PROTO_KEY = 101
_PARTITION_KEY = 102
_SAMPLE_KEY = 103


@dataclass(frozen=True)
class ClassSlice:
    classes_per_client: int


@dataclass(frozen=True)
class Dirichlet:
    alpha: float


@dataclass(frozen=True)
class SyntheticSpec:
    num_clients: int = 10
    num_classes: int = 10
    dim: int = 10
    samples_per_client: int = 40
    class_sep: float = 2.0
    noise_sd: float = 0.5
    partition: Union[ClassSlice, Dirichlet] = ClassSlice(4)
    seed: int = 0

    def validate(self):
        if self.num_clients < 1 or self.num_classes < 1 or self.dim < 1:
            raise ConfigError("num_clients, num_classes and dim must be positive")
        if self.samples_per_client < 1:
            raise ConfigError("samples_per_client must be positive")
        if self.class_sep <= 0 or self.noise_sd <= 0:
            raise ConfigError("class_sep and noise_sd must be positive")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        p = self.partition
        if isinstance(p, ClassSlice):
            if not (1 <= p.classes_per_client <= self.num_classes):
                raise ConfigError("classes_per_client must lie in [1, num_classes]")
            if p.classes_per_client > self.samples_per_client:
                raise ConfigError("fewer samples than classes per client")
        elif isinstance(p, Dirichlet):
            if not (p.alpha > 0):
                raise ConfigError("Dirichlet alpha must be positive")
        else:
            raise ConfigError(f"unknown partition {p!r}")
        if self.samples_per_client < self.dim:
            warnings.warn(
                f"samples_per_client={self.samples_per_client} < dim={self.dim}; "
                "local Gram matrices will be rank deficient",
                stacklevel=3,
            )


@dataclass(frozen=True)
class ClientDataset:
    features: np.ndarray
    labels: np.ndarray
    client_id: int
    num_classes: int
    targets: Optional[np.ndarray] = None

    @property
    def n(self):
        return int(self.labels.shape[0])


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def largest_remainder(total, fractions):
    """Integer counts summing to ``total`` proportional to ``fractions``."""
    fractions = np.asarray(fractions, dtype=np.float64)
    raw = fractions / fractions.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = int(total - counts.sum())
    if short:
        # stable sort keeps ties in index order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def class_prototypes(spec):
    """Prototype matrix ``(num_classes, dim)`` with pairwise distance >= class_sep."""
    C, d = spec.num_classes, spec.dim
    if C == 1:
        return np.zeros((1, d))
    if C <= d:
        # scaled orthonormal frame: every pair is exactly class_sep apart
        return np.eye(C, d) * (spec.class_sep / np.sqrt(2.0))
    rng = _rng(spec.seed, _PROTO_KEY)
    P = rng.standard_normal((C, d))
    diff = P[:, None, :] - P[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    dmin = dist[np.triu_indices(C, 1)].min()
    return P * (spec.class_sep / dmin)


def partition_counts(spec):
    """Per-client class counts ``(num_clients, num_classes)`` and the proportions used.

    For :class:`Dirichlet` the proportions matrix has one Dirichlet draw per
    class (columns sum to one); for :class:`ClassSlice` each row spreads evenly
    over the client's classes.
    """
    spec.validate()
    N, C = spec.num_clients, spec.num_classes
    part = spec.partition
    counts = np.zeros((N, C), dtype=np.int64)
    if isinstance(part, ClassSlice):
        k = part.classes_per_client
        props = np.zeros((N, C))
        for i in range(N):
            cls = [(i + j) % C for j in range(k)]
            props[i, cls] = 1.0 / k
            counts[i, cls] = largest_remainder(spec.samples_per_client, np.ones(k))
        return counts, props

    rng = _rng(spec.seed, _PARTITION_KEY)
    per_class = largest_remainder(N * spec.samples_per_client, np.ones(C))
    props = np.zeros((N, C))
    for c in range(C):
        q = rng.dirichlet(np.full(N, part.alpha))
        # underflow at tiny alpha can zero every entry
        if not np.all(np.isfinite(q)) or q.sum() <= 0:
            q = np.zeros(N)
            q[rng.integers(N)] = 1.0
        q = q / q.sum()
        props[:, c] = q
        counts[:, c] = largest_remainder(per_class[c], q)
    for i in range(N):
        if counts[i].sum() == 0:
            donor = int(np.argmax(counts.sum(axis=1)))
            c = int(np.argmax(counts[donor]))
            counts[donor, c] -= 1
            counts[i, c] += 1
    return counts, props


def generate(spec):
    """Build one :class:`ClientDataset` per client, fully determined by ``spec.seed``."""
    counts, _ = partition_counts(spec)
    protos = class_prototypes(spec)
    out = []
    for i in range(spec.num_clients):
        rng = _rng(spec.seed, _SAMPLE_KEY, i)
        labels = np.repeat(np.arange(spec.num_classes), counts[i])
        feats = protos[labels] + spec.noise_sd * rng.standard_normal((labels.size, spec.dim))
        out.append(ClientDataset(features=feats, labels=labels, client_id=i, num_classes=spec.num_classes))
    return out


def class_value_table(num_classes):
    """Scalar regression target per class, evenly spaced on [-1, 1]."""
    if num_classes == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, num_classes)


def label_for_regression(ds):
    table = class_value_table(ds.num_classes)
    return replace(ds, targets=table[ds.labels])


def aggregation_weights(datasets):
    """``p_i = n_i / sum_k n_k``; accepts datasets or raw sample counts."""
    if len(datasets) == 0:
        raise ConfigError("no datasets")
    n = np.array([d.n if isinstance(d, ClientDataset) else d for d in datasets], dtype=np.float64)
    if np.any(n <= 0):
        raise ConfigError("every client needs at least one sample")
    return n / n.sum()


def to_csv(datasets, path):
    d = datasets[0].features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "label"] + [f"f{j}" for j in range(d)])
        for ds in datasets:
            for x, y in zip(ds.features, ds.labels):
                writer.writerow([ds.client_id, int(y)] + [repr(float(v)) for v in x])
