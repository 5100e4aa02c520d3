"""``nullfiber`` command-line front end.

Exit codes: 0 success, 2 schema/usage error, 3 dimension mismatch,
4 empty kernel, 5 internal error.

Points and coefficient lists are comma-separated (``0.5,-2``). Data files
(CSV) contain no timestamps, so identical invocations produce identical
bytes; run metadata goes to a ``<out>.manifest.json`` sidecar.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import datetime as _dt
import hashlib
import io
import json
import os
import re
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    DimensionMismatch,
    EmptyKernel,
    InvalidRange,
    SpecError,
    StepRejected,
)
from .leaftrace import TraceConfig, same_class_certificate, trace_leaf
from .pullback import kernel_basis
from .smoothnet import check_full_rank, forward_all, load_network
from .weightspace import WeightMap, WeightPoint, trace_weight_class

EXIT_OK, EXIT_SCHEMA, EXIT_DIMENSION, EXIT_EMPTY_KERNEL, EXIT_INTERNAL = 0, 2, 3, 4, 5

# lets "-0.5,2" through as a positional value rather than an unknown option
_NEGATIVE_LIST = re.compile(r"^-\d*\.?\d+([eE][-+]?\d+)?(,\s*-?\d*\.?\d+([eE][-+]?\d+)?)*$")


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def parse_vector(text: str) -> np.ndarray:
    try:
        vals = [float(t) for t in text.replace(" ", "").split(",") if t != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty vector")
    return np.array(vals)


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._negative_number_matcher = _NEGATIVE_LIST


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest(command, argv, spec_path, cfg, started, wall, diagnostics, extra=None) -> dict:
    out = {
        "tool": "nullfiber",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "inputs": {"spec": str(spec_path), "spec_sha256": _sha256(spec_path)},
        "config": cfg.to_dict() if cfg is not None else None,
        "started_at": started,
        "wall_time_s": wall,
        "diagnostics": diagnostics,
    }
    if extra:
        out.update(extra)
    return out


def _emit_json(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def _trace_diagnostics(trace) -> dict:
    return {
        "vertices": int(trace.n_vertices),
        "max_drift": float(trace.max_drift),
        "max_corrector_iterations": int(trace.corrector_iterations.max(initial=0)),
        "total_corrector_iterations": int(trace.corrector_iterations.sum()),
        "pseudolength_estimate": float(trace.pseudolength_estimate),
        "truncated": bool(trace.truncated),
        "message": trace.message,
    }


def _csv_text(header, rows, truncated=False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    if truncated:
        writer.writerow(["truncated"] + [""] * (len(header) - 1))
    return buf.getvalue()


def trace_csv(trace) -> str:
    d0 = trace.vertices.shape[1]
    dn = trace.outputs.shape[1]
    header = ["t"] + [f"x_{i}" for i in range(d0)] + [f"out_{i}" for i in range(dn)] + ["drift"]
    rows = (
        [t, *v, *o, d]
        for t, v, o, d in zip(trace.params, trace.vertices, trace.outputs, trace.drift)
    )
    return _csv_text(header, rows, trace.truncated)


def weight_trace_csv(trace, wmap: WeightMap) -> str:
    k = trace.vertices.shape[1]
    dn = trace.outputs.shape[1]
    header = (
        ["t"]
        + [f"w_{i}" for i in range(k)]
        + [f"layer1_{i}" for i in range(wmap.d1)]
        + [f"out_{i}" for i in range(dn)]
        + ["drift"]
    )
    rows = (
        [t, *v, *wmap.first_layer(v), *o, d]
        for t, v, o, d in zip(trace.params, trace.vertices, trace.outputs, trace.drift)
    )
    return _csv_text(header, rows, trace.truncated)


def _write_output(args, argv, text, command, cfg, started, t0, trace, extra=None) -> None:
    if args.out is None:
        sys.stdout.write(text)
        return
    out = Path(args.out)
    _atomic_write(out, text)
    manifest = _manifest(
        command, argv, args.spec, cfg, started, time.perf_counter() - t0, _trace_diagnostics(trace), extra
    )
    _atomic_write(out.with_name(out.name + ".manifest.json"), json.dumps(manifest, indent=2) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


# --- commands -----------------------------------------------------------------


def cmd_eval(args, argv) -> int:
    net = load_network(args.spec)
    values = forward_all(net, args.x)
    _emit_json({"output": values[-1].tolist(), "layers": [v.tolist() for v in values[1:]]})
    return EXIT_OK


def cmd_kernel(args, argv) -> int:
    net = load_network(args.spec)
    kb = kernel_basis(net, args.layer, args.x, args.tol)
    _emit_json(
        {
            "point": kb.point.tolist(),
            "layer": args.layer,
            "rank": kb.rank,
            "kernel_dim": kb.r,
            "basis": kb.vectors.T.tolist(),
            "singular_values": kb.singular_values.tolist(),
            "tol_used": kb.tol_used,
        }
    )
    return EXIT_OK


def _trace_config(args) -> TraceConfig:
    return TraceConfig(
        step_size=args.h,
        n_steps=args.steps,
        corrector_tol=args.corrector_tol,
        corrector_max_iters=args.max_iters,
        kernel_coeffs=None if args.coeffs is None else tuple(args.coeffs),
        seed_direction=None if getattr(args, "seed_direction", None) is None else tuple(args.seed_direction),
    )


def _run_trace(net, p, cfg):
    try:
        return trace_leaf(net, p, cfg), None
    except StepRejected as exc:
        return exc.partial, exc
    except EmptyKernel as exc:
        return exc.partial, exc


def _trace_job(spec_path, p, cfg):
    net = load_network(spec_path)
    trace, exc = _run_trace(net, p, cfg)
    return trace, (type(exc).__name__, str(exc)) if exc is not None else None


def cmd_trace(args, argv) -> int:
    cfg = _trace_config(args)
    if args.seeds is not None:
        return _trace_batch(args, argv, cfg)
    if args.p is None:
        raise SpecError("trace needs a start point or --seeds")
    started, t0 = _now(), time.perf_counter()
    net = load_network(args.spec)
    trace, exc = _run_trace(net, args.p, cfg)
    if isinstance(exc, EmptyKernel) and (trace is None or trace.n_vertices <= 1):
        raise exc
    _write_output(args, argv, trace_csv(trace), "trace", cfg, started, t0, trace, {"start": args.p.tolist()})
    if exc is not None:
        print(f"nullfiber: trace truncated: {exc}", file=sys.stderr)
        if isinstance(exc, EmptyKernel):
            return EXIT_EMPTY_KERNEL
    return EXIT_OK


def _read_seeds(path) -> list[np.ndarray]:
    seeds = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            seeds.append(parse_vector(line))
        except argparse.ArgumentTypeError as exc:
            raise SpecError(f"{path}: line {lineno}: {exc}") from None
    if not seeds:
        raise SpecError(f"{path}: no seed points")
    return seeds


def _trace_batch(args, argv, cfg) -> int:
    if args.out is None:
        raise SpecError("--seeds requires --out <directory>")
    started, t0 = _now(), time.perf_counter()
    seeds = _read_seeds(args.seeds)
    load_network(args.spec)  # validate once before fanning out
    outdir = Path(args.out)
    jobs = max(1, args.jobs)
    if jobs == 1:
        results = [_trace_job(args.spec, p, cfg) for p in seeds]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_trace_job, [args.spec] * len(seeds), seeds, [cfg] * len(seeds)))
    status = EXIT_OK
    summary = []
    for i, (p, (trace, err)) in enumerate(zip(seeds, results)):
        name = f"trace_{i:04d}.csv"
        entry = {"file": name, "start": p.tolist()}
        if trace is None:
            entry["error"] = err[1]
            status = EXIT_EMPTY_KERNEL
        else:
            _atomic_write(outdir / name, trace_csv(trace))
            entry["diagnostics"] = _trace_diagnostics(trace)
            if err is not None and err[0] == "EmptyKernel":
                status = EXIT_EMPTY_KERNEL
        summary.append(entry)
    manifest = _manifest(
        "trace", argv, args.spec, cfg, started, time.perf_counter() - t0,
        {"traces": summary}, {"seeds": str(args.seeds)},
    )
    _atomic_write(outdir / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return status


def cmd_weight_trace(args, argv) -> int:
    started, t0 = _now(), time.perf_counter()
    net = load_network(args.spec)
    cfg = _trace_config(args)
    w = WeightPoint.from_network(net)
    wmap = WeightMap(net, args.x)
    try:
        trace = trace_weight_class(net, args.x, w, None, cfg)
        exc = None
    except (StepRejected, EmptyKernel) as err:
        trace, exc = err.partial, err
        if trace is None or isinstance(err, EmptyKernel) and trace.n_vertices <= 1:
            raise
    _write_output(
        args, argv, weight_trace_csv(trace, wmap), "weight-trace", cfg, started, t0, trace,
        {"input": args.x.tolist(), "flattening": "row-major weights, then bias"},
    )
    if exc is not None:
        print(f"nullfiber: trace truncated: {exc}", file=sys.stderr)
        if isinstance(exc, EmptyKernel):
            return EXIT_EMPTY_KERNEL
    return EXIT_OK


def cmd_certify(args, argv) -> int:
    net = load_network(args.spec)
    cfg = TraceConfig(
        step_size=args.h, n_steps=args.budget, corrector_tol=args.corrector_tol,
        corrector_max_iters=args.max_iters,
    )
    cert = same_class_certificate(net, args.x, args.y, cfg, out_tol=args.out_tol, space_tol=args.space_tol)
    ev = cert.evidence
    _emit_json(
        {
            "verdict": cert.verdict.value,
            "output_mismatch": cert.output_mismatch,
            "distance": cert.distance,
            "evidence": None
            if ev is None
            else {
                "vertices": ev.vertices.tolist(),
                "max_drift": ev.max_drift,
                "pseudolength_estimate": ev.pseudolength_estimate,
            },
            "details": cert.details,
        }
    )
    return EXIT_OK


def cmd_check(args, argv) -> int:
    net = load_network(args.spec)
    reports = check_full_rank(net, args.tol)
    failed = [r.index for r in reports if not r.passed]
    _emit_json(
        {
            "dims": list(net.dims),
            "layers": [
                {
                    "index": r.index,
                    "rank": r.rank,
                    "expected_rank": r.expected_rank,
                    "smallest_singular_value": r.smallest_singular_value,
                    "pass": r.passed,
                }
                for r in reports
            ],
            "all_pass": not failed,
            "failed_layers": failed,
        }
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nullfiber", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("eval", help="evaluate the network and every intermediate layer")
    p.add_argument("spec")
    p.add_argument("x", type=parse_vector)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("kernel", help="kernel basis of the pulled-back metric")
    p.add_argument("spec")
    p.add_argument("x", type=parse_vector)
    p.add_argument("--layer", type=int, default=0, help="manifold index (0 = input)")
    p.add_argument("--tol", type=float, default=None, help="relative singular-value threshold")
    p.set_defaults(func=cmd_kernel)

    def tracing(p, steps, h):
        p.add_argument("--steps", type=int, default=steps, help="number of steps; negative reverses")
        p.add_argument("--h", type=float, default=h, help="step size")
        p.add_argument("--coeffs", type=parse_vector, default=None, help="kernel combination coefficients")
        p.add_argument("--corrector-tol", type=float, default=1e-10)
        p.add_argument("--max-iters", type=int, default=20)
        p.add_argument("--out", default=None, help="output CSV (stdout if omitted)")

    p = sub.add_parser("trace", help="trace the equivalence class of a point in input space")
    p.add_argument("spec")
    p.add_argument("p", type=parse_vector, nargs="?")
    tracing(p, 100, 0.01)
    p.add_argument("--seed-direction", type=parse_vector, default=None)
    p.add_argument("--seeds", default=None, help="file with one start point per line")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for --seeds")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("weight-trace", help="trace first-layer weights that keep the output at x fixed")
    p.add_argument("spec")
    p.add_argument("x", type=parse_vector)
    tracing(p, 100, 0.01)
    p.set_defaults(func=cmd_weight_trace)

    p = sub.add_parser("certify", help="decide whether x and y lie in the same class")
    p.add_argument("spec")
    p.add_argument("x", type=parse_vector)
    p.add_argument("y", type=parse_vector)
    p.add_argument("--budget", type=int, default=1000, help="maximum tracing steps")
    p.add_argument("--h", type=float, default=0.05)
    p.add_argument("--out-tol", type=float, default=1e-8)
    p.add_argument("--space-tol", type=float, default=1e-6)
    p.add_argument("--corrector-tol", type=float, default=1e-10)
    p.add_argument("--max-iters", type=int, default=20)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("check", help="full-rank report for every layer")
    p.add_argument("spec")
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except (DimensionMismatch, InvalidRange) as exc:
        print(f"nullfiber: dimension error: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except SpecError as exc:
        print(f"nullfiber: spec error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except EmptyKernel as exc:
        print(f"nullfiber: empty kernel: {exc}", file=sys.stderr)
        return EXIT_EMPTY_KERNEL
    except (OSError, ValueError) as exc:
        print(f"nullfiber: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except Exception as exc:  # noqa: BLE001
        print(f"nullfiber: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
