"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
protocol failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict

from ..dataset import LibsvmParseError
from ..engine import EngineError
from ..privacy import calibrate_party, total_budget
from ..subsolvers import SubproblemError
from ..transport import ProtocolError, TransportError
from .baselines import BaselineError, baseline_centralized, baseline_local
from .config import ConfigError, json_schema, load_config
from .experiment import noise_sweep, prepare_data, resolve_hyper, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _override(text: str):
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vfladmm", description="Vertically partitioned ADMM sharing experiments")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True, metavar="PATH")
        sp.add_argument("--seed", type=int, metavar="U64")
        sp.add_argument("--out", metavar="PATH")
        sp.add_argument("--full-data", action="store_true", help="lift the fixture row limit")
        sp.add_argument("--set", dest="overrides", type=_override, action="append", default=[],
                        metavar="KEY=VALUE", help="override a config field, e.g. hyper.rho=0.5")

    run = sub.add_parser("run", help="train in one role and write per-epoch metrics")
    common(run)
    run.add_argument("--role", choices=["local-sim", "coordinator", "party"])
    run.add_argument("--party-id", type=int, metavar="K")
    run.add_argument("--listen", metavar="ADDR:PORT")
    run.add_argument("--connect", metavar="ADDR:PORT")
    run.add_argument("--timeout", type=float, metavar="SECONDS")

    base = sub.add_parser("baseline", help="centralized and local reference models")
    common(base)
    base.add_argument("--kind", choices=["centralized", "local", "both"], default="both")
    base.add_argument("--method", choices=["newton", "gd"], default="newton")
    base.add_argument("--steps", type=int, default=100_000)
    base.add_argument("--step-size", type=float)

    sw = sub.add_parser("sweep", help="final test loss across noise multipliers and seeds")
    common(sw)
    sw.add_argument("--multipliers", type=_floats, metavar="M1,M2,...")
    sw.add_argument("--seeds", type=int, metavar="N")

    bud = sub.add_parser("budget", help="privacy accounting and noise calibration")
    bud.add_argument("--epsilon", type=float, required=True, help="per-iteration epsilon")
    bud.add_argument("--delta", type=float, required=True)
    bud.add_argument("--epochs", "-T", type=int, required=True)
    bud.add_argument("--delta-prime", type=float, default=1e-4)
    bud.add_argument("--config", metavar="PATH", help="also report per-party sensitivity and sigma")

    sub.add_parser("schema", help="print the JSON schema of experiment configs")
    return p


def _load(args, **flags):
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["hyper.seed"] = args.seed
    for key, value in flags.items():
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _cmd_run(args) -> int:
    cfg = _load(args, role=args.role, party_id=args.party_id, listen=args.listen,
                connect=args.connect, timeout=args.timeout)
    result = run_experiment(cfg, full_data=args.full_data, out=args.out)
    if result.records:
        last = result.records[-1]
        print(f"epochs={len(result.records)} test_log_loss={last.test_log_loss:.6f} "
              f"test_accuracy={last.test_accuracy:.4f} primal_residual={last.primal_residual:.3e} "
              f"lyapunov={last.lyapunov:.3e}")
    for k, v in result.outputs.items():
        print(f"{k}: {v}")
    return EXIT_OK


def _cmd_baseline(args) -> int:
    cfg = _load(args)
    data = prepare_data(cfg, args.full_data)
    lam = cfg.lam_for(data.train.n_samples)
    kw = dict(steps=args.steps, step_size=args.step_size, method=args.method,
              loss_scale=cfg.loss_scale_for(data.train.n_samples))
    results = {}
    if args.kind in ("centralized", "both"):
        results["centralized"] = baseline_centralized(data.train, data.test, lam, **kw)
    if args.kind in ("local", "both"):
        results["local"] = baseline_local(data.train, data.test, lam, data.partition, 0, **kw)
    fields = ["kind", "train_objective", "test_log_loss", "test_accuracy", "grad_norm", "iterations", "converged"]
    rows = [[k, r.train_objective, r.test_log_loss, r.test_accuracy, r.grad_norm, r.iterations, r.converged]
            for k, r in results.items()]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(fields)
            w.writerows(rows)
    for row in rows:
        print(json.dumps(dict(zip(fields, row))))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _load(args)
    rows = noise_sweep(cfg, args.multipliers, args.seeds, args.full_data, args.out)
    for r in rows:
        print(json.dumps(asdict(r)))
    return EXIT_OK


def _cmd_budget(args) -> int:
    try:
        eps, delta = total_budget(args.epsilon, args.delta, args.epochs, args.delta_prime)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    doc = {"epsilon_total": eps, "delta_total": delta}
    if args.config:
        cfg = load_config(args.config)
        priv = cfg.privacy_params()
        if priv is None:
            raise ConfigError("config has no privacy section")
        data = prepare_data(cfg)
        hyper = resolve_hyper(cfg, data)
        M = data.partition.n_parties
        cal = [calibrate_party(w, M, hyper.rho, hyper.lam, priv) for w in data.partition.boundaries]
        doc["parties"] = [{"party": m, "sensitivity": c.sensitivity, "sigma": c.sigma} for m, c in enumerate(cal)]
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": _cmd_run, "baseline": _cmd_baseline, "sweep": _cmd_sweep, "budget": _cmd_budget}
    try:
        if args.command == "schema":
            print(json.dumps(json_schema(), indent=2))
            return EXIT_OK
        return handlers[args.command](args)
    except (ConfigError, LibsvmParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProtocolError, TransportError, EngineError, SubproblemError, BaselineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:  # invalid parameter values reaching the library
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
