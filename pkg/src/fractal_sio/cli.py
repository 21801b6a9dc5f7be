"""Command-line front end.

Exit codes: 0 success or certified, 2 inconclusive, 3 invalid input or
infeasible parameters. Reports are JSON; plot data is CSV.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from typing import Sequence

import numpy as np

from . import __version__
from .cantor import CantorParams, removability_pipeline, solve_phi, solve_r_for_dimension, verify_phi
from .errors import BudgetError, FractalSIOError, InputError, SeparationError, SingularityError
from .ifs import IFS, Budget, SelfSimilarMeasure, fixed_point, similarity_dimension
from .kernels import kernel_from_config
from .quadrature import (check_unboundedness, integrate_region, maximal_operator_estimate,
                         parse_region, telescope_eta)

EXIT_OK = 0
EXIT_INCONCLUSIVE = 2
EXIT_INPUT = 3


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# -- helpers -----------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def dumps(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n"


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise CLIError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CLIError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CLIError("config must be a JSON object")
    return cfg


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _budget_value(text: str) -> int:
    try:
        v = int(float(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError("budget must be >= 1")
    return v


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _words(text: str) -> list:
    """'0;1,2' -> [(0,), (1, 2)] (zero-based)."""
    try:
        return [tuple(int(v) for v in w.split(",") if v.strip()) for w in text.split(";") if w.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected words like '0;1,2', got {text!r}")


def _ifs_from(cfg: dict):
    if "maps" not in cfg or "space" not in cfg:
        raise CLIError("config needs 'space' and 'maps'")
    ifs = IFS.from_config(cfg)
    dim = cfg.get("dimension", "auto")
    if dim == "auto":
        s = None
    elif isinstance(dim, (int, float)) and dim > 0:
        s = float(dim)
    else:
        raise CLIError(f"dimension must be 'auto' or a positive number, got {dim!r}")
    total = float(cfg.get("measure_total", 1.0))
    return ifs, SelfSimilarMeasure(ifs, s, total)


def _kernel_from(cfg: dict, ifs: IFS):
    if "kernel" not in cfg:
        raise CLIError("config needs a 'kernel' object")
    return kernel_from_config(cfg["kernel"], ifs.space)


def _base_report(command: str, args, inputs: dict) -> dict:
    return {
        "command": command,
        "version": __version__,
        "inputs": inputs,
        "determinism": {
            "seed": getattr(args, "seed", 0),
            "threads": getattr(args, "threads", 1),
            "summation": "lexicographic" if getattr(args, "threads", 1) <= 1 else "chunked-fsum",
        },
    }


def _opt(args, cfg, name, default):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


# -- commands ------------------------------------------------------------------------

def cmd_check_unbounded(args) -> tuple[dict, int]:
    cfg = _load_config(args.config)
    ifs, measure = _ifs_from(cfg)
    spec = _kernel_from(cfg, ifs)
    words = args.words if args.words is not None else [tuple(w) for w in cfg.get("words", [[0]])]
    depth = int(_opt(args, cfg, "depth", 6))
    mode = _opt(args, cfg, "mode", "interval")
    k_max = int(_opt(args, cfg, "k_max", 2))
    comps = cfg.get("components")
    inputs = {"ifs": ifs.to_config(), "kernel": spec.to_config(), "words": [list(w) for w in words],
              "depth": depth, "mode": mode, "k_max": k_max, "components": comps,
              "dimension": measure.s, "measure_total": measure.total}
    report = _base_report("check-unbounded", args, inputs)
    if args.dry_run:
        report["dry_run"] = True
        return report, EXIT_OK
    try:
        crit = check_unboundedness(ifs, measure, spec, words, depth=depth, mode=mode, k_max=k_max,
                                   components=comps, threads=args.threads)
    except SeparationError as exc:
        report["outputs"] = {"status": "inconclusive-separation", "diagnostic": str(exc)}
        return report, EXIT_INCONCLUSIVE
    report["outputs"] = {"criteria": [c.to_dict() for c in crit],
                         "certified": any(c.certified for c in crit)}
    return report, EXIT_OK if report["outputs"]["certified"] else EXIT_INCONCLUSIVE


def cmd_cantor_hn(args) -> tuple[dict, int]:
    target = None if args.target_a in (None, "auto") else float(args.target_a)
    inputs = {"n": args.n, "N": args.N, "target_a": target if target is not None else "auto",
              "resolution": args.resolution, "budget": args.budget, "c_Q": args.c_Q,
              "nesting_samples": args.nesting_samples}
    report = _base_report("cantor-hn", args, inputs)
    res = removability_pipeline(args.n, args.N, args.budget, target, args.resolution, args.c_Q,
                                args.nesting_samples, args.seed, timing=args.timing,
                                dry_run=args.dry_run)
    report["outputs"] = res
    if args.dry_run:
        return report, EXIT_OK
    if res["stopped_at"] == "build_similarities":
        return report, EXIT_INPUT
    return report, EXIT_OK if res["criterion_certified"] else EXIT_INCONCLUSIVE


def _point_or_fixed(args, cfg, ifs):
    if getattr(args, "point", None) is not None:
        return np.array(args.point)
    if "point" in cfg:
        return np.array(cfg["point"], dtype=float)
    words = cfg.get("words", [[0]])
    return fixed_point(ifs, tuple(words[0]))


def cmd_integrate(args) -> tuple[dict, int]:
    cfg = _load_config(args.config)
    ifs, measure = _ifs_from(cfg)
    spec = _kernel_from(cfg, ifs)
    region = parse_region(args.region or cfg.get("region", "whole"))
    x = _point_or_fixed(args, cfg, ifs)
    depth = int(_opt(args, cfg, "depth", 4))
    mode = _opt(args, cfg, "mode", "interval")
    depths = list(range(depth + 1)) if args.sweep else [depth]
    inputs = {"ifs": ifs.to_config(), "kernel": spec.to_config(), "region": region.label(),
              "point": x, "depth": depth, "mode": mode, "sweep": bool(args.sweep),
              "dimension": measure.s}
    report = _base_report("integrate", args, inputs)
    if args.dry_run:
        report["dry_run"] = True
        return report, EXIT_OK
    ests = [integrate_region(ifs, measure, spec, x, region, d, mode, threads=args.threads)
            for d in depths]
    report["outputs"] = {"estimate": ests[-1].to_dict(),
                         "convergence": [{**e.to_dict(), "depth": d} for d, e in zip(depths, ests)]}
    certified = any(s != "none" for s in ests[-1].certified_sign)
    return report, EXIT_OK if certified else EXIT_INCONCLUSIVE


def cmd_telescope(args) -> tuple[dict, int]:
    cfg = _load_config(args.config)
    ifs, measure = _ifs_from(cfg)
    spec = _kernel_from(cfg, ifs)
    word = args.word if args.word is not None else tuple(cfg.get("words", [[0]])[0])
    k_max = int(_opt(args, cfg, "k_max", 3))
    depth = int(_opt(args, cfg, "depth", 4))
    inputs = {"ifs": ifs.to_config(), "kernel": spec.to_config(), "word": list(word),
              "k_max": k_max, "depth": depth, "dimension": measure.s}
    report = _base_report("telescope", args, inputs)
    if args.dry_run:
        report["dry_run"] = True
        return report, EXIT_OK
    etas = telescope_eta(ifs, measure, spec, word, k_max, depth, threads=args.threads)
    partial = np.cumsum(np.array(etas), axis=0)
    report["outputs"] = {"eta": [list(map(float, e)) for e in etas],
                         "partial_sums": partial.tolist()}
    return report, EXIT_OK


def cmd_maximal(args) -> tuple[dict, int]:
    cfg = _load_config(args.config)
    ifs, measure = _ifs_from(cfg)
    spec = _kernel_from(cfg, ifs)
    x = _point_or_fixed(args, cfg, ifs)
    grid = args.eps_grid if args.eps_grid is not None else cfg.get("eps_grid")
    if not grid:
        raise CLIError("maximal needs --eps-grid or 'eps_grid' in the config")
    depth = int(_opt(args, cfg, "depth", 4))
    inputs = {"ifs": ifs.to_config(), "kernel": spec.to_config(), "point": x,
              "eps_grid": sorted(grid), "depth": depth}
    report = _base_report("maximal", args, inputs)
    if args.dry_run:
        report["dry_run"] = True
        return report, EXIT_OK
    best, sweep = maximal_operator_estimate(ifs, measure, spec, x, grid, depth, args.threads,
                                            return_sweep=True)
    report["outputs"] = {"estimate": best,
                         "sweep": [{"eps": e, "value": list(map(float, v)), "norm": nrm}
                                   for e, v, nrm in sweep]}
    return report, EXIT_OK


def cmd_phi_solve(args) -> tuple[dict, int]:
    if args.r is not None:
        r = args.r
        feas = None
    else:
        info = solve_r_for_dimension(args.n, args.N, None if args.target_a in (None, "auto")
                                     else float(args.target_a))
        r = info["r"]
        feas = info
    inputs = {"n": args.n, "N": args.N, "r": r, "resolution": args.resolution, "tol": args.tol}
    report = _base_report("phi-solve", args, inputs)
    if feas is not None and not feas["checks"][0]["pass"]:
        report["outputs"] = {"dimension": feas, "status": "infeasible"}
        return report, EXIT_INPUT
    params = CantorParams(args.n, args.N, r)
    if args.dry_run:
        report["dry_run"] = True
        return report, EXIT_OK
    phi = solve_phi(params, args.resolution, args.tol)
    ver = verify_phi(phi, params)
    report["outputs"] = {"field": phi.to_dict(include_values=args.values), "verify": ver}
    return report, EXIT_OK if ver["pass"] else EXIT_INCONCLUSIVE


def cmd_dim_solve(args) -> tuple[dict, int]:
    if args.ratios is not None:
        s = similarity_dimension(args.ratios)
        report = _base_report("dim-solve", args, {"ratios": args.ratios})
        report["outputs"] = {"dimension": s, "moran_sum": float(np.sum(np.power(args.ratios, s)))}
        return report, EXIT_OK
    target = None if args.target_a in (None, "auto") else float(args.target_a)
    info = solve_r_for_dimension(args.n, args.N, target)
    report = _base_report("dim-solve", args, {"n": args.n, "N": args.N,
                                              "target_a": target if target is not None else "auto"})
    report["outputs"] = info
    return report, EXIT_OK if info["feasible"] else EXIT_INPUT


def cmd_emit_plotdata(args) -> tuple[dict | None, int]:
    if args.report is None:
        raise CLIError("emit-plotdata needs --report (a JSON report from a previous run)")
    rep = _load_config(args.report)
    out = rep.get("outputs", {})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    kind = args.kind
    if kind == "eta":
        if "eta" not in out:
            raise CLIError("report has no eta sequence (run 'telescope')")
        comps = len(out["eta"][0])
        w.writerow(["k"] + [f"eta_{j + 1}" for j in range(comps)] + [f"partial_{j + 1}" for j in range(comps)])
        for k, (e, p) in enumerate(zip(out["eta"], out["partial_sums"])):
            w.writerow([k] + [repr(float(v)) for v in e] + [repr(float(v)) for v in p])
    elif kind == "eps":
        if "sweep" not in out:
            raise CLIError("report has no eps sweep (run 'maximal')")
        comps = len(out["sweep"][0]["value"])
        w.writerow(["eps", "norm"] + [f"T_{j + 1}" for j in range(comps)])
        for row in out["sweep"]:
            w.writerow([repr(float(row["eps"])), repr(float(row["norm"]))] + [repr(float(v)) for v in row["value"]])
    elif kind == "phi":
        field = out.get("field", {})
        if "values" not in field:
            raise CLIError("report has no phi grid (run 'phi-solve --values')")
        vals = np.array(field["values"])
        if vals.ndim != 2:
            raise CLIError("phi heatmap export supports n = 1 only")
        res = vals.shape[0]
        axis = np.linspace(0.0, 1.0, res)
        w.writerow(["i", "j", "w1", "w2", "phi"])
        for i in range(res):
            for j in range(res):
                w.writerow([i, j, repr(float(axis[i])), repr(float(axis[j])), repr(float(vals[i, j]))])
    elif kind == "depth":
        if "convergence" not in out:
            raise CLIError("report has no convergence data (run 'integrate --sweep')")
        conv = out["convergence"]
        comps = len(conv[0]["value"])
        w.writerow(["depth", "nodes"] + [f"value_{j + 1}" for j in range(comps)]
                   + [f"error_{j + 1}" for j in range(comps)])
        for row in conv:
            w.writerow([row["depth"], row["nodes"]] + [repr(float(v)) for v in row["value"]]
                       + [repr(float(v)) for v in row["error"]])
    else:
        raise CLIError(f"unknown plot kind {kind!r}")
    text = buf.getvalue()
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return None, EXIT_OK


# -- parser ----------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, config: bool = True):
    if config:
        p.add_argument("--config", help="JSON config with space, maps, kernel and options")
    p.add_argument("--out", help="write the JSON report here instead of standard output")
    p.add_argument("--threads", type=_positive_int, default=1,
                   help="worker threads for kernel sums (>= 1; 1 gives the reference order)")
    p.add_argument("--seed", type=int, default=0, help="seed for sampled checks (default 0)")
    p.add_argument("--timing", action="store_true",
                   help="record wall-clock timings (reports are then not byte-identical)")
    p.add_argument("--dry-run", action="store_true", help="validate inputs and list the work only")
    p.add_argument("--budget", type=_budget_value, default=None,
                   help="node budget (overrides FRACTAL_SIO_NODE_BUDGET, default 5e7)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fractal-sio",
        description="Singular integrals over self-similar sets in Heisenberg and Euclidean groups.",
        epilog="Exit codes: 0 certified/success, 2 inconclusive, 3 invalid input or infeasible.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check-unbounded", help="certify the unboundedness criterion")
    _common(p)
    p.add_argument("--words", type=_words, help="zero-based words, e.g. '0;1,2'")
    p.add_argument("--depth", type=_positive_int, help="relative quadrature depth (>= 0, default 6)")
    p.add_argument("--mode", choices=["interval", "heuristic"], help="certification mode")
    p.add_argument("--k-max", dest="k_max", type=_positive_int, help="telescoped generations (default 2)")
    p.set_defaults(func=cmd_check_unbounded)

    p = sub.add_parser("cantor-hn", help="removability-evidence pipeline for the Heisenberg Cantor set")
    _cantor_args(p)
    p.set_defaults(func=cmd_cantor_hn)

    p = sub.add_parser("integrate", help="integrate a kernel over a region")
    _common(p)
    p.add_argument("--region", help="'whole', 'complement:0,1' or 'annulus:0:2' (zero-based)")
    p.add_argument("--point", type=_floats, help="evaluation point (default: fixed point of the first word)")
    p.add_argument("--depth", type=_positive_int, help="relative depth (>= 0, default 4)")
    p.add_argument("--mode", choices=["interval", "heuristic"])
    p.add_argument("--sweep", action="store_true", help="also report every depth 0..depth")
    p.set_defaults(func=cmd_integrate)

    p = sub.add_parser("telescope", help="eta_k sequence at a word's fixed point")
    _common(p)
    p.add_argument("--word", type=lambda t: _words(t)[0], help="zero-based word, e.g. '0' or '0,1'")
    p.add_argument("--k-max", dest="k_max", type=_positive_int, help="last k (>= 0, default 3)")
    p.add_argument("--depth", type=_positive_int, help="relative depth (>= 0, default 4)")
    p.set_defaults(func=cmd_telescope)

    p = sub.add_parser("maximal", help="truncated operators over an eps grid")
    _common(p)
    p.add_argument("--point", type=_floats)
    p.add_argument("--eps-grid", dest="eps_grid", type=_floats, help="comma-separated eps > 0")
    p.add_argument("--depth", type=_positive_int)
    p.set_defaults(func=cmd_maximal)

    p = sub.add_parser("phi-solve", help="solve the separating function on a grid")
    _common(p, config=False)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--N", type=int, default=18)
    p.add_argument("--r", type=float, help="ratio (default: solved for dimension 2n+1)")
    p.add_argument("--target-a", dest="target_a", default="auto")
    p.add_argument("--resolution", type=int, default=64, help="grid points per axis (>= 2)")
    p.add_argument("--tol", type=float, default=1e-13)
    p.add_argument("--values", action="store_true", help="include grid values in the report")
    p.set_defaults(func=cmd_phi_solve)

    p = sub.add_parser("dim-solve", help="similarity dimension or the ratio for a target dimension")
    _common(p, config=False)
    p.add_argument("--ratios", type=_floats, help="comma-separated ratios in (0,1)")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--N", type=int, default=18)
    p.add_argument("--target-a", dest="target_a", default="auto")
    p.set_defaults(func=cmd_dim_solve)

    p = sub.add_parser("emit-plotdata", help="CSV plot data from a saved report")
    p.add_argument("--report", help="JSON report produced by telescope, maximal, phi-solve or integrate")
    p.add_argument("--kind", choices=["eta", "eps", "phi", "depth"], required=True)
    p.add_argument("--out", help="CSV path (default standard output)")
    p.set_defaults(func=cmd_emit_plotdata, dry_run=False, budget=None, timing=False)
    return ap


def _cantor_args(p):
    _common(p, config=False)
    p.add_argument("--n", type=int, default=1, help="Heisenberg parameter n >= 1")
    p.add_argument("--N", type=int, default=18, help="even grid parameter N >= 2")
    p.add_argument("--target-a", dest="target_a", default="auto", help="target dimension (default 2n+1)")
    p.add_argument("--resolution", type=int, default=None, help="phi grid per axis (default 64 for n=1)")
    p.add_argument("--c-Q", dest="c_Q", type=float, default=None, help="kernel constant (default 2-Q)")
    p.add_argument("--nesting-samples", dest="nesting_samples", type=int, default=10_000)
    p.set_defaults(budget_default=1e6)


def main(argv: Sequence[str] | None = None, prog: str | None = None) -> int:
    parser = build_parser()
    if prog == "cantor-hn":
        parser = argparse.ArgumentParser(prog="cantor-hn",
                                         description="Removability-evidence pipeline for C_{Q-1}.")
        _cantor_args(parser)
        parser.set_defaults(func=cmd_cantor_hn)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    if getattr(args, "budget", None) is None and getattr(args, "budget_default", None) is not None:
        args.budget = args.budget_default
    elif getattr(args, "budget", None) is not None and args.func is not cmd_cantor_hn:
        os.environ["FRACTAL_SIO_NODE_BUDGET"] = str(args.budget)
    t0 = time.perf_counter()
    try:
        report, code = args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (InputError, SingularityError, BudgetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FractalSIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCONCLUSIVE
    if report is None:
        return code
    if getattr(args, "timing", False):
        report["timing"] = {"seconds": round(time.perf_counter() - t0, 3)}
    report["exit_code"] = code
    text = dumps(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return code


def run() -> None:
    sys.exit(main())


def run_cantor() -> None:
    sys.exit(main(prog="cantor-hn"))


if __name__ == "__main__":
    run()
