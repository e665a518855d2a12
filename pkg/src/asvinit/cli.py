"""Command-line front end.

Subcommands: analyze (shape/connection report), init (per-layer sigma table,
optional sampled-weight file), simulate (Monte Carlo check of the variance
predictions, CI-friendly exit status), compare-methods (five-method sigma
table side by side).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys

import numpy as np

from . import arch as arch_mod
from . import montecarlo, refnet, shapes as shapes_mod, variance as variance_mod
from .errors import AsvinitError, BudgetExceeded

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_BUDGET = 3

_WEIGHTS_FORMAT = "asvinit-weights"


def _add_arch_args(parser):
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--builtin", metavar="NAME", help="built-in architecture name")
    group.add_argument("--arch", metavar="FILE", help="architecture JSON file")


def _resolve_arch(args):
    if args.builtin:
        return arch_mod.builtin(args.builtin)
    try:
        with open(args.arch, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise AsvinitError(f"cannot read {args.arch}: {exc}") from exc
    return arch_mod.parse_architecture(text)


def _emit(text, out_path):
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
            if not text.endswith("\n"):
                fh.write("\n")
    else:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")


def _parse_trials(text):
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise AsvinitError(f"--trials expects AxB (e.g. 8x512), got {text!r}") from None


def _clamp_factor(text):
    if text.lower() in ("none", "off"):
        return None
    return float(text)


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(args):
    architecture = _resolve_arch(args)
    report = shapes_mod.ShapeReport.build(architecture)
    _emit(report.to_csv() if args.format == "csv" else report.to_json(), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# init / compare-methods
# ---------------------------------------------------------------------------

def _method_table(architecture, clamp_factor, tau0, clamp_mode):
    geo = shapes_mod.infer_shapes(architecture)
    plans = {
        m: variance_mod.init_plan(
            m, architecture, geo=geo, clamp_factor=clamp_factor,
            tau0=tau0, clamp_mode=clamp_mode,
        )
        for m in variance_mod.METHODS
    }
    return plans


def _method_table_json(architecture, plans):
    layers = []
    for i in range(len(architecture.layers)):
        layers.append({
            "layer": i + 1,
            "sigma_w": {m: plans[m].rows[i].sigma_w for m in variance_mod.METHODS},
        })
    return json.dumps({
        "arch": architecture.name,
        "methods": list(variance_mod.METHODS),
        "layers": layers,
    }, indent=2)


def _method_table_csv(architecture, plans):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", *variance_mod.METHODS])
    for i in range(len(architecture.layers)):
        writer.writerow(
            [i + 1, *(repr(plans[m].rows[i].sigma_w) for m in variance_mod.METHODS)]
        )
    return buf.getvalue()


def write_weights(path, net: refnet.VectorNet, method, seed):
    """Binary weight file: one JSON header line, then little-endian float64
    weights and biases per layer (W row-major (C, S), then b)."""
    header = {
        "format": _WEIGHTS_FORMAT,
        "version": 1,
        "arch": net.arch.name,
        "method": method,
        "seed": seed,
        "layers": [
            {"layer": i + 1, "channels": g.channels, "kernel_len": g.s_len}
            for i, g in enumerate(net.geo)
        ],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for w, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def read_weights(path):
    """Inverse of write_weights: returns (header, weights, biases)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != _WEIGHTS_FORMAT:
            raise AsvinitError(f"{path} is not a weight file")
        weights, biases = [], []
        for layer in header["layers"]:
            c, s = layer["channels"], layer["kernel_len"]
            w = np.frombuffer(fh.read(8 * c * s), dtype="<f8").reshape(c, s)
            b = np.frombuffer(fh.read(8 * c), dtype="<f8")
            weights.append(w)
            biases.append(b)
    return header, weights, biases


def cmd_init(args):
    architecture = _resolve_arch(args)
    clamp = _clamp_factor(args.clamp_factor)
    if args.method == "all":
        if args.emit_weights:
            raise AsvinitError("--emit-weights needs a single --method")
        plans = _method_table(architecture, clamp, args.tau0, args.clamp_mode)
        text = (
            _method_table_csv(architecture, plans)
            if args.format == "csv"
            else _method_table_json(architecture, plans)
        )
        _emit(text, args.out)
        return EXIT_OK
    plan = variance_mod.init_plan(
        args.method, architecture, clamp_factor=clamp,
        tau0=args.tau0, clamp_mode=args.clamp_mode,
    )
    _emit(plan.to_csv() if args.format == "csv" else plan.to_json(), args.out)
    if args.emit_weights:
        net = refnet.sample_parameters(architecture, plan, args.seed)
        write_weights(args.emit_weights, net, plan.method, args.seed)
    return EXIT_OK


def cmd_compare_methods(args):
    architecture = _resolve_arch(args)
    plans = _method_table(
        architecture, _clamp_factor(args.clamp_factor), args.tau0, args.clamp_mode
    )
    text = (
        _method_table_csv(architecture, plans)
        if args.format == "csv"
        else _method_table_json(architecture, plans)
    )
    _emit(text, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    architecture = _resolve_arch(args)
    geo = shapes_mod.infer_shapes(architecture)
    if args.sigma_override:
        try:
            with open(args.sigma_override, "r", encoding="utf-8") as fh:
                sigmas = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise AsvinitError(f"cannot read {args.sigma_override}: {exc}") from exc
        plan = variance_mod.plan_from_sigmas(
            architecture, sigmas, geo=geo, tau0=args.tau0, q0=args.q0, rL=args.rL
        )
    else:
        plan = variance_mod.init_plan(
            args.method, architecture, geo=geo,
            clamp_factor=_clamp_factor(args.clamp_factor),
            tau0=args.tau0, clamp_mode=args.clamp_mode,
        )
    n_param, n_input = _parse_trials(args.trials)
    cfg = montecarlo.McConfig(
        n_param_draws=n_param, n_input_draws=n_input, seed=args.seed,
        q0=args.q0, rL=args.rL,
    )
    if args.directions == "forward":
        trace = montecarlo.estimate_forward(architecture, plan, cfg)
    elif args.directions == "backward":
        trace = montecarlo.estimate_backward(architecture, plan, cfg)
    else:
        trace = montecarlo.estimate_both(architecture, plan, cfg)
    report = montecarlo.compare(trace, args.threshold)
    if args.format == "csv":
        _emit(trace.to_csv(), args.out)
    else:
        _emit(report.to_json(trace=trace), args.out)
    if not report.passed:
        worst = report.worst
        print(
            f"FAIL: {len(report.failures)} layer(s) beyond threshold "
            f"{args.threshold}; worst {worst.direction} layer {worst.ell} "
            f"rel error {worst.rel_error:.4f}",
            file=sys.stderr,
        )
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="asvinit",
        description="Padding- and pooling-aware CNN initialization calculator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = dict(formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    p = sub.add_parser("analyze", help="per-layer shape and connection report", **common)
    _add_arch_args(p)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("init", help="per-layer sigma table for one method", **common)
    _add_arch_args(p)
    p.add_argument(
        "--method", default=variance_mod.ASV_BACKWARD,
        choices=(*variance_mod.METHODS, "all"),
    )
    p.add_argument("--clamp-factor", default="3", metavar="F",
                   help="asv-backward cap vs. the no-pool value ('none' disables)")
    p.add_argument("--clamp-mode", choices=("variance", "stddev"), default="variance")
    p.add_argument("--tau0", type=float, default=1.0,
                   help="input-layer forward constant (raw inputs carry their full variance)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--emit-weights", metavar="PATH",
                   help="also sample parameters and write a binary weight file")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("compare-methods", help="five-method sigma table", **common)
    _add_arch_args(p)
    p.add_argument("--clamp-factor", default="3", metavar="F")
    p.add_argument("--clamp-mode", choices=("variance", "stddev"), default="variance")
    p.add_argument("--tau0", type=float, default=1.0)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_compare_methods)

    p = sub.add_parser("simulate", help="Monte Carlo check of variance predictions", **common)
    _add_arch_args(p)
    p.add_argument("--method", default=variance_mod.ASV_FORWARD,
                   choices=variance_mod.METHODS)
    p.add_argument("--sigma-override", metavar="FILE",
                   help="JSON list of per-layer weight std devs (overrides --method)")
    p.add_argument("--clamp-factor", default="3", metavar="F")
    p.add_argument("--clamp-mode", choices=("variance", "stddev"), default="variance")
    p.add_argument("--tau0", type=float, default=1.0)
    p.add_argument("--trials", default="8x512", metavar="AxB",
                   help="parameter draws x input draws")
    p.add_argument("--directions", choices=("forward", "backward", "both"),
                   default="both", help="which signal directions to judge")
    p.add_argument("--threshold", type=float, default=0.2,
                   help="max tolerated relative error per layer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--q0", type=float, default=1.0)
    p.add_argument("--rL", type=float, default=1.0)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except AsvinitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
