"""Experiment configuration, presets, orchestration and artifact emission."""

import configparser
import contextlib
import csv
import io
import json
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from . import __version__
from . import federation as fed
from . import metrics as M
from . import unlearning as un
from .datagen import ClassSlice, Dirichlet, SyntheticSpec, generate, label_for_regression
from .errors import ConfigError, FedUnlearnError
from .objectives import LogisticObjective, QuadraticObjective

MECHANISMS = ("retrain", "continue", "stability", "fairness")
SWEEP_PARAMETERS = ("lambda", "Lambda", "alpha", "T", "P_J")
THREADS_ENV = "FEDUNLEARN_THREADS"


@dataclass
class PhaseConfig:
    rounds: int = 100
    local_epochs: int = 1
    lr_local: Union[float, str] = "auto"  # "auto" resolves to 1/L_max
    batch_size: Optional[int] = None
    sample_fraction: float = 1.0


@dataclass
class ExperimentConfig:
    scenario: str = "custom"
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    identical_clients: bool = False
    objective: str = "quadratic"
    ridge: float = 0.1
    unlearn_set: Tuple[int, ...] = (8, 9)
    p_j: Optional[float] = None  # reweights groups to this P_J when set
    train: PhaseConfig = field(default_factory=lambda: PhaseConfig(rounds=200))
    unlearn: PhaseConfig = field(default_factory=lambda: PhaseConfig(rounds=100))
    mechanism: str = "stability"
    lam: float = 1.0
    lr_global: Union[float, str] = "auto"  # "auto" follows the resolved unlearning lr
    L_used: Optional[float] = None
    gradient_mode: str = un.GS_EXACT
    surrogate_mode: str = un.SURROGATE_REMOVED
    Lambda: float = 1.0
    epsilon: Optional[float] = None
    replicates: int = 1
    seed: int = 0

    def validate(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown mechanism {self.mechanism!r}; choose from {MECHANISMS}")
        if self.objective not in ("quadratic", "logistic"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if self.ridge < 0 or (self.objective == "logistic" and self.ridge <= 0):
            raise ConfigError("ridge must be positive (nonnegative for quadratics)")
        if self.p_j is not None and not (0 < self.p_j <= 0.5):
            raise ConfigError("p_j must lie in (0, 1/2]")
        for ph in (self.train, self.unlearn):
            if isinstance(ph.lr_local, str) and ph.lr_local != "auto":
                raise ConfigError(f"lr_local must be a number or 'auto', got {ph.lr_local!r}")
        if isinstance(self.lr_global, str) and self.lr_global != "auto":
            raise ConfigError(f"lr_global must be a number or 'auto', got {self.lr_global!r}")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.data.validate()

    def to_dict(self):
        d = asdict(self)
        part = self.data.partition
        d["data"]["partition"] = (
            {"kind": "class_slice", "classes_per_client": part.classes_per_client}
            if isinstance(part, ClassSlice) else {"kind": "dirichlet", "alpha": part.alpha}
        )
        d["unlearn_set"] = list(self.unlearn_set)
        return d


# ---------------------------------------------------------------- config files

def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if s.strip().lower() in ("none", "auto") else float(s)


def _lr(s):
    return "auto" if s.strip().lower() == "auto" else float(s)


def _batch(s):
    return None if s.strip().lower() == "full" else int(s)


def _int_list(s):
    s = s.strip()
    return tuple(int(x) for x in s.split(",") if x.strip()) if s else ()


_PHASE_KEYS = {
    "rounds": _int, "local_epochs": _int, "lr_local": _lr, "batch_size": _batch,
    "sample_fraction": _float,
}

SCHEMA = {
    "experiment": {
        "preset": str, "scenario": str, "mechanism": str, "objective": str, "ridge": _float,
        "unlearn_set": _int_list, "p_j": _opt_float, "replicates": _int, "seed": _int,
        "identical_clients": _bool,
    },
    "data": {
        "num_clients": _int, "num_classes": _int, "dim": _int, "samples_per_client": _int,
        "class_sep": _float, "noise_sd": _float, "partition": str,
        "classes_per_client": _int, "alpha": _float,
    },
    "train": _PHASE_KEYS,
    "unlearn": _PHASE_KEYS,
    "stability": {
        "lambda": _float, "lr_global": _lr, "L_used": _opt_float,
        "gradient_mode": str, "surrogate_mode": str,
    },
    "fairness": {"Lambda": _float, "epsilon": _opt_float},
}


def _fmt_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def config_to_sections(cfg):
    part = cfg.data.partition
    data = {
        "num_clients": cfg.data.num_clients, "num_classes": cfg.data.num_classes,
        "dim": cfg.data.dim, "samples_per_client": cfg.data.samples_per_client,
        "class_sep": cfg.data.class_sep, "noise_sd": cfg.data.noise_sd,
    }
    if isinstance(part, ClassSlice):
        data.update(partition="class_slice", classes_per_client=part.classes_per_client)
    else:
        data.update(partition="dirichlet", alpha=part.alpha)

    def phase(ph):
        return {
            "rounds": ph.rounds, "local_epochs": ph.local_epochs, "lr_local": ph.lr_local,
            "batch_size": "full" if ph.batch_size is None else ph.batch_size,
            "sample_fraction": ph.sample_fraction,
        }

    return {
        "experiment": {
            "scenario": cfg.scenario, "mechanism": cfg.mechanism, "objective": cfg.objective,
            "ridge": cfg.ridge, "unlearn_set": cfg.unlearn_set, "p_j": cfg.p_j,
            "replicates": cfg.replicates, "seed": cfg.seed,
            "identical_clients": cfg.identical_clients,
        },
        "data": data,
        "train": phase(cfg.train),
        "unlearn": phase(cfg.unlearn),
        "stability": {
            "lambda": cfg.lam, "lr_global": cfg.lr_global, "L_used": cfg.L_used,
            "gradient_mode": cfg.gradient_mode, "surrogate_mode": cfg.surrogate_mode,
        },
        "fairness": {"Lambda": cfg.Lambda, "epsilon": cfg.epsilon},
    }


def config_to_ini(cfg):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for sec, kv in config_to_sections(cfg).items():
        cp[sec] = {k: _fmt_value(v) for k, v in kv.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _parse_ini(text):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    out = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        out[sec] = {}
        for key, raw in cp[sec].items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            try:
                out[sec][key] = SCHEMA[sec][key](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {raw!r} ({exc})") from exc
    return out


def _apply(cfg, values, strict):
    """Overlay parsed ``values`` onto ``cfg``; with ``strict`` every key must be present."""
    base = config_to_sections(cfg)
    merged = {}
    for sec, keys in base.items():
        merged[sec] = dict(keys)
        for key in keys:
            if key in values.get(sec, {}):
                merged[sec][key] = values[sec][key]
            elif strict and not _optional_key(sec, key, values):
                raise ConfigError(f"missing key {key!r} in [{sec}] (no preset given)")
        for key in values.get(sec, {}):
            if key not in keys:
                merged[sec][key] = values[sec][key]

    ex, dt, st, fa = merged["experiment"], merged["data"], merged["stability"], merged["fairness"]
    kind = dt["partition"]
    if kind == "class_slice":
        partition = ClassSlice(int(dt.get("classes_per_client", 1)))
    elif kind == "dirichlet":
        if "alpha" not in dt:
            raise ConfigError("dirichlet partition needs alpha")
        partition = Dirichlet(float(dt["alpha"]))
    else:
        raise ConfigError(f"unknown partition {kind!r}")

    def phase(d):
        return PhaseConfig(
            rounds=d["rounds"], local_epochs=d["local_epochs"], lr_local=d["lr_local"],
            batch_size=None if d["batch_size"] == "full" else d["batch_size"],
            sample_fraction=d["sample_fraction"],
        )

    new = ExperimentConfig(
        scenario=ex["scenario"],
        data=SyntheticSpec(
            num_clients=dt["num_clients"], num_classes=dt["num_classes"], dim=dt["dim"],
            samples_per_client=dt["samples_per_client"], class_sep=dt["class_sep"],
            noise_sd=dt["noise_sd"], partition=partition, seed=ex["seed"],
        ),
        identical_clients=ex["identical_clients"], objective=ex["objective"], ridge=ex["ridge"],
        unlearn_set=tuple(ex["unlearn_set"]), p_j=ex["p_j"],
        train=phase(merged["train"]), unlearn=phase(merged["unlearn"]),
        mechanism=ex["mechanism"], lam=st["lambda"], lr_global=st["lr_global"],
        L_used=st["L_used"], gradient_mode=st["gradient_mode"], surrogate_mode=st["surrogate_mode"],
        Lambda=fa["Lambda"], epsilon=fa["epsilon"], replicates=ex["replicates"], seed=ex["seed"],
    )
    new.validate()
    return new


def _optional_key(sec, key, values):
    if sec == "data" and key in ("classes_per_client", "alpha"):
        wanted = {"class_slice": "classes_per_client", "dirichlet": "alpha"}
        return wanted.get(values.get("data", {}).get("partition")) != key
    return sec == "stability" and key == "L_used" or sec == "fairness" and key == "epsilon" \
        or sec == "experiment" and key == "p_j"


def load_config(path):
    """Read a config file.

    ``[experiment] preset = NAME`` takes every unspecified key from that
    preset; without it, every key must be spelled out.
    """
    text = Path(path).read_text()
    values = _parse_ini(text)
    preset_name = values.get("experiment", {}).pop("preset", None)
    if preset_name is not None:
        return _apply(preset(preset_name), values, strict=False)
    return _apply(ExperimentConfig(), values, strict=True)


def override(cfg, seed=None, replicates=None):
    if seed is not None:
        cfg = replace(cfg, seed=seed, data=replace(cfg.data, seed=seed))
    if replicates is not None:
        cfg = replace(cfg, replicates=replicates)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- presets

def _two_group():
    return ExperimentConfig(
        scenario="two-group",
        data=SyntheticSpec(num_clients=10, num_classes=10, dim=10, samples_per_client=40,
                           class_sep=2.0, noise_sd=0.5, partition=ClassSlice(4), seed=0),
        unlearn_set=(8, 9),
        train=PhaseConfig(rounds=300),
        unlearn=PhaseConfig(rounds=30),
        mechanism="stability",
        lam=1.0,
        lr_global=0.25,
    )


def _homogeneous():
    cfg = _two_group()
    return replace(cfg, scenario="homogeneous", identical_clients=True, mechanism="continue")


def _fairness_demo():
    return replace(_two_group(), scenario="fairness-demo", mechanism="fairness", Lambda=1.0)


def _per_client():
    return replace(_two_group(), scenario="fig1-sweep", mechanism="retrain",
                   unlearn=PhaseConfig(rounds=300))


def _dirichlet():
    cfg = _two_group()
    return replace(
        cfg, scenario="table3-dirichlet", mechanism="retrain",
        data=replace(cfg.data, partition=Dirichlet(0.4)), unlearn_set=(6, 7, 8, 9), p_j=0.38,
        unlearn=PhaseConfig(rounds=300),
    )


PRESETS = {
    "homogeneous": _homogeneous,
    "two-group": _two_group,
    "fig1-sweep": _per_client,
    "table3-dirichlet": _dirichlet,
    "fairness-demo": _fairness_demo,
}

DIRICHLET_ALPHAS = (0.1, 0.4, 0.7)


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]()
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- running

@contextlib.contextmanager
def stage(name):
    try:
        yield
    except FedUnlearnError as exc:
        if exc.stage is None:
            exc.with_stage(name)
        raise


def build_federation(cfg):
    """Synthesize client data and wrap it as a :class:`FederationSpec`."""
    datasets = generate(cfg.data)
    if cfg.identical_clients:
        first = datasets[0]
        datasets = [replace(first, client_id=i) for i in range(len(datasets))]
    datasets = [label_for_regression(ds) for ds in datasets]
    objectives = []
    for ds in datasets:
        if cfg.objective == "quadratic":
            objectives.append(QuadraticObjective(ds.features, ds.targets, cfg.ridge))
        else:
            objectives.append(LogisticObjective(ds.features, (ds.targets > 0).astype(float), cfg.ridge))
    sizes = np.array([ds.n for ds in datasets], dtype=np.float64)
    weights = None
    if cfg.p_j is not None and cfg.unlearn_set:
        weights = group_weights(sizes, cfg.unlearn_set, cfg.p_j)
    spec = fed.FederationSpec(objectives, sizes=sizes, unlearn_set=cfg.unlearn_set, weights=weights)
    return spec, datasets


def group_weights(sizes, unlearn_set, P):
    """Sample-count weights rescaled so the unlearn set carries total weight ``P``."""
    sizes = np.asarray(sizes, dtype=np.float64)
    mask = np.zeros(sizes.size, dtype=bool)
    mask[list(unlearn_set)] = True
    w = np.empty_like(sizes)
    w[mask] = P * sizes[mask] / sizes[mask].sum()
    w[~mask] = (1.0 - P) * sizes[~mask] / sizes[~mask].sum()
    return w / w.sum()


def replicate_seed(master, r):
    if r == 0:
        return int(master)
    return int(np.random.SeedSequence(int(master), spawn_key=(900, r)).generate_state(1, np.uint64)[0])


def _resolve_lr(lr, spec, clients=None):
    return 1.0 / spec.max_L(clients) if lr == "auto" else float(lr)


def train_config(cfg, spec, threads=1):
    ph = cfg.train
    return fed.TrainConfig(rounds=ph.rounds, local_epochs=ph.local_epochs,
                           lr_local=_resolve_lr(ph.lr_local, spec), batch_size=ph.batch_size,
                           sample_fraction=ph.sample_fraction, seed=cfg.seed, threads=threads)


def mechanism_config(cfg, spec, seed, threads=1):
    ph = cfg.unlearn
    lr = _resolve_lr(ph.lr_local, spec, spec.remaining)
    common = dict(rounds=ph.rounds, local_epochs=ph.local_epochs, lr_local=lr,
                  batch_size=ph.batch_size, sample_fraction=ph.sample_fraction, seed=seed,
                  threads=threads)
    if cfg.mechanism == "stability":
        lr_g = lr if cfg.lr_global == "auto" else float(cfg.lr_global)
        return un.StabilityConfig(lam=cfg.lam, lr_global=lr_g, L_used=cfg.L_used,
                                  gradient_mode=cfg.gradient_mode,
                                  surrogate_mode=cfg.surrogate_mode, **common)
    if cfg.mechanism == "fairness":
        return un.FairnessConfig(Lambda=cfg.Lambda, epsilon=cfg.epsilon, **common)
    return fed.TrainConfig(**common)


def run_mechanism(cfg, spec, w_o, seed, threads=1):
    mcfg = mechanism_config(cfg, spec, seed, threads)
    if cfg.mechanism == "retrain":
        return un.exact_retrain(spec, mcfg), mcfg
    if cfg.mechanism == "continue":
        return un.continue_unlearn(spec, mcfg, w_o), mcfg
    if cfg.mechanism == "stability":
        return un.stability_unlearn(spec, mcfg, w_o), mcfg
    return un.fairness_unlearn(spec, mcfg, w_o), mcfg


def _round_heterogeneity(spec, traj, beta_sq, batch_size):
    """Per-round ``sigma_t^2`` and ``zeta_t^2`` measured along a trajectory."""
    sig, zet = [], []
    for w, sampled in zip(traj.weights[:-1], traj.sampled[1:]):
        sampled = list(sampled)
        alphas = fed.aggregation_alphas(spec, sampled)
        s = 0.0
        for a, i in zip(alphas, sampled):
            s += a * a * spec.objectives[i].batch_variance(w, batch_size)
        gF = fed.remaining_grad(spec, w)
        dev = 0.0
        for a, i in zip(alphas, sampled):
            dev += a * M.norm_sq(spec.objectives[i].grad(w) - gF)
        sig.append(s)
        zet.append(max(0.0, dev - beta_sq * M.norm_sq(gF)))
    return sig, zet


def _grad_ratios(spec, traj):
    out = []
    for a, b in zip(traj.weights[:-1], traj.weights[1:]):
        g0 = M.norm_sq(fed.remaining_grad(spec, a)) ** 0.5
        g1 = M.norm_sq(fed.remaining_grad(spec, b)) ** 0.5
        out.append(g1 / g0 if g0 > 0 else 0.0)
    return out


def compute_report(cfg, spec, w_o, results, mcfg, oracles=None):
    """Evaluate every metric and bound for one experiment."""
    o = M.Oracles(spec) if oracles is None else oracles
    w_stack = np.array([r.w_u for r in results])
    run = results[0]
    V = M.metric_V(spec, w_stack, o)
    S = M.metric_S(spec, w_stack, o)
    Q = M.metric_Q(spec, w_stack, o)

    L_used = spec.max_L(spec.remaining) if cfg.L_used is None else cfg.L_used
    est = M.estimate_heterogeneity(spec, M.default_probes(spec, w_o, seed=cfg.seed, oracles=o),
                                   w_o=w_o, L_used=L_used)
    T = max(1, len(run.trajectory) - 1)
    sig, zet = _round_heterogeneity(spec, run.trajectory, est.beta_sq, cfg.unlearn.batch_size)
    sigma_bar = float(np.mean(sig)) if sig else 0.0
    if zet:
        zeta_bar, zeta_source = float(np.mean(zet)), "rounds"
    else:
        zeta_bar, zeta_source = est.zeta_sq, "envelope"

    c1 = M.bound_C1(spec, w_o, T, est, sigma_bar, zeta_bar, o)
    c2 = M.bound_C2(spec, w_o, c1["eta"], T, o)
    Cs = M.bound_Cs(spec, w_o, c1["C1"], o)
    Cq = M.bound_Cq(spec, o)

    stab = replace(mechanism_config(replace(cfg, mechanism="stability"), spec, cfg.seed), rounds=T)
    if run.correction_log:
        ratios = [row["grad_ratio"] for row in run.correction_log]
        cos_sq = max(row["cos_theta_sq"] for row in run.correction_log)
        cos_source = "correction_log"
    else:
        ratios = _grad_ratios(spec, run.trajectory)
        cos_sq, cos_source = 1.0, "worst_case"
    eps_ratio = max(ratios) if ratios else 1.0
    thm4 = M.bound_thm4(spec, stab, est, T, w_o, eps_ratio, cos_sq, sigma_bar, o)

    Lambda = cfg.Lambda if cfg.Lambda > 0 else 1.0
    eps_thm = (fed.remaining_loss(spec, w_o) - o.F_rem_star) / Lambda
    eps = cfg.epsilon if cfg.epsilon is not None else eps_thm
    rho = M.measure_rho(spec, run.trajectory, w_o, eps)
    thm5 = M.bound_thm5(spec, w_o, Lambda, rho, o)

    G = M.default_G(spec)
    if spec.kind == "quadratic":
        thm3 = M.diag_thm3(spec, stab, run, est, w_o, G=G, sigma_sq=sigma_bar, oracles=o)
        rhs = {k: thm3[k] for k in ("B", "v", "rhs_decay", "rhs_penalty", "rhs_offset")}
    else:
        thm3 = {}
        rhs = {"available": 0.0}
    L = spec.max_L()
    C_rt = (sigma_bar + 6.0 * L * Cq
            + 8.0 * (cfg.unlearn.local_epochs - 1) ** 2 * (est.zeta_sq + (est.beta_sq + 1.0) * G**2))
    saddle_rounds = M.saddle_round_estimate(thm5["nu"], C_rt, Lambda, spec.min_mu(), thm3.get("gamma", 1.0),
                             M.norm_sq(w_o - o.w_r_star)) if thm5["nu"] > 0 else math.inf

    return M.BoundReport(
        V=V, S=S, Q=Q, C1=c1["C1"], C2=c2["C2"], Cs=Cs, Cq=Cq, delta=c2["delta"],
        chi1=thm4["chi1"], chi2=thm4["chi2"], epsilon_fair=thm5["epsilon_fair"], nu=thm5["nu"],
        rho=rho, phi=thm4["phi"], cos_theta_sq=cos_sq, thm3_rhs_terms=rhs,
        sigma_bar_sq=sigma_bar, zeta_bar_sq=zeta_bar,
        ingredients={
            "C1": c1, "C2": c2, "thm4": thm4, "thm5": thm5, "thm3": thm3,
            "heterogeneity": asdict(est), "zeta_source": zeta_source,
            "zeta_t_max": max(zet) if zet else est.zeta_sq,
            "cos_theta_source": cos_source, "epsilon_used": eps, "Lambda_used": Lambda,
            "saddle_rounds": saddle_rounds, "P_J": spec.P_J, "T": T,
            "V_plus_S": V + S, "two_V_plus_Q": 2.0 * V + Q,
        },
    )


@dataclass
class ExperimentOutcome:
    spec: fed.FederationSpec
    w_o: np.ndarray
    train_trajectory: fed.Trajectory
    results: list
    report: M.BoundReport
    config: ExperimentConfig
    oracles: M.Oracles


def run_experiment(cfg, out_dir=None, threads=None):
    """Train ``w^o``, run the configured mechanism, evaluate every metric and bound.

    Returns ``(train_trajectory, unlearn_result, report)`` and writes artifacts
    to ``out_dir`` when given.
    """
    outcome = execute(cfg, threads=threads)
    if out_dir is not None:
        write_artifacts(outcome, out_dir)
    return outcome.train_trajectory, outcome.results[0], outcome.report


def default_threads():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        k = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
    if k < 1:
        raise ConfigError(f"{THREADS_ENV} must be positive")
    return k


def execute(cfg, threads=None):
    threads = default_threads() if threads is None else threads
    started = time.time()
    with stage("config"):
        cfg.validate()
    with stage("datagen"):
        spec, _ = build_federation(cfg)
    with stage("train"):
        tcfg = train_config(cfg, spec, threads)
        train_traj = fed.train(spec, tcfg)
    w_o = train_traj.final
    results, mcfg = [], None
    with stage(f"unlearn:{cfg.mechanism}"):
        for r in range(cfg.replicates):
            res, mcfg = run_mechanism(cfg, spec, w_o, replicate_seed(cfg.seed, r), threads)
            results.append(res)
    with stage("bounds"):
        oracles = M.Oracles(spec)
        report = compute_report(cfg, spec, w_o, results, mcfg, oracles)
    report.ingredients["elapsed_s"] = None
    outcome = ExperimentOutcome(spec, w_o, train_traj, results, report, cfg, oracles)
    outcome.elapsed = time.time() - started
    outcome.started = started
    outcome.train_config = tcfg
    outcome.mechanism_config = mcfg
    return outcome


def _atomic_write(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _traj_text(traj):
    N = len(traj.client_losses[0])
    return _csv_text(["round", "F", "F_rem"] + [f"f_{i}" for i in range(N)], traj.rows())


def _log_text(rows):
    keys = list(rows[0].keys())
    return _csv_text(keys, ([un._fmt(row[k]) for k in keys] for row in rows))


SUMMARY_HEADER = ["mechanism", "V", "S", "Q", "V_plus_S", "two_V_plus_Q", "Cq", "P_J", "rounds"]


def summary_row(cfg, report):
    V, S, Q = float(report.V), float(report.S), float(report.Q)
    return [cfg.mechanism, repr(V), repr(S), repr(Q), repr(V + S), repr(2 * V + Q),
            repr(float(report.Cq)), repr(float(report.ingredients["P_J"])), report.ingredients["T"]]


def write_artifacts(outcome, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = outcome.config
    run = outcome.results[0]
    report = outcome.report
    _atomic_write(out / "trajectory.csv", _traj_text(run.trajectory))
    _atomic_write(out / "train_trajectory.csv", _traj_text(outcome.train_trajectory))
    if run.correction_log:
        _atomic_write(out / "correction.csv", _log_text(run.correction_log))
    if run.fairness_log:
        _atomic_write(out / "fairness.csv", _log_text(run.fairness_log))
    payload = report.to_dict()
    payload["ingredients"].pop("elapsed_s", None)
    M.validate_report(payload)
    _atomic_write(out / "bounds.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _atomic_write(out / "summary.csv", _csv_text(SUMMARY_HEADER, [summary_row(cfg, report)]))
    _atomic_write(out / "config.ini", config_to_ini(cfg))
    manifest = {
        "package_version": __version__,
        "mechanism": cfg.mechanism,
        "config": M._clean(cfg.to_dict()),
        "resolved": {
            "train_lr_local": outcome.train_config.lr_local,
            "unlearn": M._clean(asdict(outcome.mechanism_config)),
        },
        "seeds": {
            "master": cfg.seed,
            "replicates": [replicate_seed(cfg.seed, r) for r in range(cfg.replicates)],
        },
        "deviations": sorted({d for r in outcome.results for d in r.deviations}),
        "terminated_early": [bool(r.terminated_early) for r in outcome.results],
        "timing": {"started_unix": outcome.started, "elapsed_s": outcome.elapsed},
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------- sweeps

def apply_parameter(cfg, parameter, value):
    if parameter == "lambda":
        return replace(cfg, mechanism="stability", lam=float(value))
    if parameter == "Lambda":
        return replace(cfg, mechanism="fairness", Lambda=float(value))
    if parameter == "alpha":
        return replace(cfg, data=replace(cfg.data, partition=Dirichlet(float(value))))
    if parameter == "T":
        return replace(cfg, unlearn=replace(cfg.unlearn, rounds=int(value)))
    if parameter == "P_J":
        return replace(cfg, p_j=float(value))
    raise ConfigError(f"cannot sweep {parameter!r}; choose from {SWEEP_PARAMETERS}")


SWEEP_HEADER = ["parameter", "value", "V", "S", "Q", "V_plus_S", "two_V_plus_Q"]


def sweep(cfg, parameter, values, out_dir=None, threads=None):
    """One experiment per value; returns the summary rows as dicts."""
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"cannot sweep {parameter!r}; choose from {SWEEP_PARAMETERS}")
    rows = []
    for v in values:
        run_cfg = apply_parameter(cfg, parameter, v)
        sub = None if out_dir is None else Path(out_dir) / f"{parameter}_{v}"
        _, _, rep = run_experiment(run_cfg, sub, threads)
        rows.append({"parameter": parameter, "value": v, "V": rep.V, "S": rep.S, "Q": rep.Q,
                     "V_plus_S": rep.V + rep.S, "two_V_plus_Q": 2 * rep.V + rep.Q})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _atomic_write(Path(out_dir) / "summary.csv", _csv_text(
            SWEEP_HEADER,
            ([r["parameter"], r["value"]] + [repr(float(r[k])) for k in SWEEP_HEADER[2:]] for r in rows),
        ))
    return rows


# ---------------------------------------------------------------- multi-run presets

def per_client_sweep(cfg, out_dir=None, threads=None):
    """Unlearn each client in turn; per-client utility change table."""
    rows = []
    for c in range(cfg.data.num_clients):
        run_cfg = replace(cfg, unlearn_set=(c,), p_j=None)
        outcome = execute(run_cfg, threads)
        deltas = M.utility_changes(outcome.spec, outcome.results[0].w_u, outcome.oracles)
        for i, dfi in zip(outcome.spec.remaining, deltas):
            rows.append({"unlearned": c, "client": i, "delta_f": float(dfi),
                         "V": outcome.report.V, "S": outcome.report.S, "Q": outcome.report.Q})
        if out_dir is not None:
            write_artifacts(outcome, Path(out_dir) / f"unlearn_{c}")
    if out_dir is not None:
        keys = ["unlearned", "client", "delta_f", "V", "S", "Q"]
        _atomic_write(Path(out_dir) / "per_client_table.csv", _csv_text(
            keys, ([r["unlearned"], r["client"]] + [repr(r[k]) for k in keys[2:]] for r in rows)))
    return rows


def dirichlet_sweep(cfg, alphas=DIRICHLET_ALPHAS, n_seeds=20, out_dir=None, threads=None):
    """Retrain vs stability (lambda=1) across Dirichlet heterogeneity levels.

    Returns per-run rows and per-alpha medians.
    """
    runs = []
    for a in alphas:
        for s in range(n_seeds):
            base = override(replace(cfg, data=replace(cfg.data, partition=Dirichlet(a))), seed=cfg.seed + s)
            out_r = execute(replace(base, mechanism="retrain"), threads)
            out_s = execute(replace(base, mechanism="stability", lam=1.0), threads)
            est = out_r.report.ingredients["heterogeneity"]
            runs.append({"alpha": a, "seed": base.seed, "S_retrain": out_r.report.S,
                         "S_lambda1": out_s.report.S, "V_lambda1": out_s.report.V,
                         "zeta_sq": est["zeta_sq"]})
    medians = []
    for a in alphas:
        sel = [r for r in runs if r["alpha"] == a]
        medians.append({"alpha": a, **{k: float(np.median([r[k] for r in sel]))
                                       for k in ("S_retrain", "S_lambda1", "V_lambda1", "zeta_sq")}})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        keys = ["alpha", "seed", "S_retrain", "S_lambda1", "V_lambda1", "zeta_sq"]
        _atomic_write(out / "dirichlet_runs.csv", _csv_text(
            keys, ([r["alpha"], r["seed"]] + [repr(r[k]) for k in keys[2:]] for r in runs)))
        mk = ["alpha", "S_retrain", "S_lambda1", "V_lambda1", "zeta_sq"]
        _atomic_write(out / "dirichlet_medians.csv", _csv_text(
            mk, ([m["alpha"]] + [repr(m[k]) for k in mk[1:]] for m in medians)))
    return runs, medians


def run_preset(name, out_dir=None, seed=None, replicates=None, threads=None, n_seeds=20):
    cfg = override(preset(name), seed=seed, replicates=replicates)
    if name == "fig1-sweep":
        return per_client_sweep(cfg, out_dir, threads)
    if name == "table3-dirichlet":
        return dirichlet_sweep(cfg, n_seeds=n_seeds, out_dir=out_dir, threads=threads)
    return run_experiment(cfg, out_dir, threads)
