"""Command line entry point: ``fedunlearn {train,unlearn,bounds,sweep,preset}``."""

import argparse
import json
import sys
from pathlib import Path

from . import federation as fed
from . import harness as H
from .errors import ConfigError, DivergenceError, FedUnlearnError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_OTHER = 1


def _add_common(p, needs_config=True):
    if needs_config:
        p.add_argument("--config", required=True, help="INI experiment file")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--out", default=None, help="output directory for artifacts")
    p.add_argument("--replicates", type=int, default=None, help="unlearning replicates to average")
    p.add_argument("--threads", type=int, default=None,
                   help=f"client worker threads (default ${H.THREADS_ENV} or 1)")


def build_parser():
    parser = argparse.ArgumentParser(prog="fedunlearn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the original model and write its trajectory")
    _add_common(p)

    p = sub.add_parser("unlearn", help="train, then run the configured unlearning mechanism")
    _add_common(p)

    p = sub.add_parser("bounds", help="run an experiment and print the bound report")
    _add_common(p)

    p = sub.add_parser("sweep", help="one experiment per parameter value")
    _add_common(p)
    p.add_argument("--param", required=True, choices=H.SWEEP_PARAMETERS)
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("preset", help="run or dump a named preset")
    p.add_argument("name", choices=sorted(H.PRESETS))
    p.add_argument("--dump", action="store_true", help="print the preset as an INI file and exit")
    p.add_argument("--seeds", type=int, default=20, help="seed count for the Dirichlet table")
    _add_common(p, needs_config=False)
    return parser


def _load(args):
    return H.override(H.load_config(args.config), seed=args.seed, replicates=args.replicates)


def _threads(args):
    if args.threads is not None and args.threads < 1:
        raise ConfigError("--threads must be positive")
    return args.threads


def _parse_values(raw, parameter):
    parts = [v.strip() for v in raw.split(",") if v.strip()]
    cast = int if parameter == "T" else float
    try:
        return [cast(v) for v in parts]
    except ValueError as exc:
        raise ConfigError(f"bad sweep value list {raw!r}") from exc


def cmd_train(args):
    cfg = _load(args)
    spec, _ = H.build_federation(cfg)
    traj = fed.train(spec, H.train_config(cfg, spec, _threads(args) or H.default_threads()))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        H._atomic_write(Path(args.out) / "train_trajectory.csv", H._traj_text(traj))
    print(f"trained {len(traj) - 1} rounds: F={traj.F[-1]!r} F_rem={traj.F_rem[-1]!r}")


def cmd_unlearn(args):
    cfg = _load(args)
    _, _, rep = H.run_experiment(cfg, args.out, _threads(args))
    print(f"{cfg.mechanism}: V={rep.V!r} S={rep.S!r} Q={rep.Q!r}")


def cmd_bounds(args):
    cfg = _load(args)
    _, _, rep = H.run_experiment(cfg, args.out, _threads(args))
    print(rep.to_json(), end="")


def cmd_sweep(args):
    cfg = _load(args)
    rows = H.sweep(cfg, args.param, _parse_values(args.values, args.param), args.out, _threads(args))
    print(",".join(H.SWEEP_HEADER))
    for r in rows:
        print(",".join([r["parameter"], str(r["value"])] + [repr(float(r[k])) for k in H.SWEEP_HEADER[2:]]))


def cmd_preset(args):
    if args.dump:
        cfg = H.override(H.preset(args.name), seed=args.seed, replicates=args.replicates)
        text = H.config_to_ini(cfg).replace("[experiment]\n", f"[experiment]\npreset = {args.name}\n", 1)
        print(text, end="")
        return
    out = H.run_preset(args.name, args.out, args.seed, args.replicates, _threads(args), args.seeds)
    if args.name == "fig1-sweep":
        print(f"{len(out)} per-client utility changes written")
    elif args.name == "table3-dirichlet":
        _, medians = out
        print(json.dumps(medians, indent=2))
    else:
        rep = out[2]
        print(f"{args.name}: V={rep.V!r} S={rep.S!r} Q={rep.Q!r}")


COMMANDS = {"train": cmd_train, "unlearn": cmd_unlearn, "bounds": cmd_bounds,
            "sweep": cmd_sweep, "preset": cmd_preset}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FedUnlearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
