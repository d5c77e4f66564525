"""Command-line front end.

Exit codes: 0 success, 1 verification or domain failure, 2 usage or I/O
failure. Every command writes ``manifest.json`` next to its outputs; the
``run`` command replays such a manifest.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import corpus as cp
from . import expr as ex
from .decomp import POLICIES, QuadratureConfig, decompose_many
from .dynamics import SCHEMES, IntegratorConfig, simulate
from .model import DocumentParseError, SchemaError, SystemDefinition, audit, load_system, sample_points

DEFAULT_TOL = 1e-9
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or unreadable input; maps to exit code 2."""


# --------------------------------------------------------------------------
# Serialization helpers


def _clean(obj: Any) -> Any:
    """Replace non-finite floats by ``None`` and numpy scalars by Python ones."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _dumps(obj: Any, indent: int | None = 2) -> str:
    return json.dumps(_clean(obj), indent=indent, sort_keys=True, allow_nan=False)


def _fmt(x: float) -> str:
    x = float(x)
    return format(x, ".17g") if math.isfinite(x) else "nan"


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as handle:
            handle.write(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from None


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


# --------------------------------------------------------------------------
# Argument parsing


def _vector(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or not all(math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected finite numbers, got {text!r}")
    return vals


def _interval(text: str) -> list[float]:
    vals = _vector(text)
    if len(vals) != 2 or not vals[0] < vals[1]:
        raise argparse.ArgumentTypeError(f"expected LO,HI with LO < HI, got {text!r}")
    return vals


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


def _add_system_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--system", metavar="PATH", help="system definition JSON file")
    src.add_argument("--corpus", choices=sorted(cp.CORPUS), help="built-in system id")
    p.add_argument("--param", action="append", default=[], metavar="K=V",
                   help="corpus parameter (repeatable); matrices as 0,1;-1,-1")
    p.add_argument("--out", default=".", metavar="DIR", help="output directory (default: .)")


def _add_decomp_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--policy", choices=POLICIES, default="auto")
    p.add_argument("--quad-nodes", type=_positive_int, default=32, metavar="N")
    p.add_argument("--quad-path", choices=("state-ray", "eta-ray"), default="state-ray")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phforge",
        description="Audit, decompose and simulate port-Hamiltonian systems.",
        epilog="Set PHFORGE_TOL to override the default tolerance 1e-9.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="sample-based passivity and well-posedness audit")
    _add_system_args(p)
    p.add_argument("--samples", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--box", type=_interval, metavar="LO,HI", help="sampling interval for every coordinate")

    p = sub.add_parser("decompose", help="J/R decomposition at points")
    _add_system_args(p)
    _add_decomp_args(p)
    p.add_argument("--at", type=_vector, action="append", default=[], metavar="Z", help="point (repeatable)")
    p.add_argument("--grid", type=_positive_int, metavar="K", help="K points per axis over the box")
    p.add_argument("--random", type=_positive_int, metavar="N", help="N uniform points in the box")
    p.add_argument("--box", type=_interval, metavar="LO,HI")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--csv", action="store_true", help="also write summary.csv")

    p = sub.add_parser("simulate", help="energy-consistent time integration")
    _add_system_args(p)
    _add_decomp_args(p)
    p.add_argument("--z0", type=_vector, metavar="Z")
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--scheme", choices=SCHEMES, default="discrete-gradient-jr")
    p.add_argument("--u", type=_vector, metavar="U", help="constant input (default: zero)")
    p.add_argument("--ledger-bound", type=float, default=None,
                   help="max |ledger residual| for exit 0 (default: the tolerance)")

    p = sub.add_parser("export", help="write a corpus system as a JSON document")
    _add_system_args(p)

    p = sub.add_parser("run", help="replay a manifest.json")
    p.add_argument("manifest", metavar="MANIFEST")
    p.add_argument("--out", default=None, metavar="DIR", help="override the output directory")
    return parser


# --------------------------------------------------------------------------
# Shared steps


def _tolerance() -> float:
    raw = os.environ.get("PHFORGE_TOL")
    if raw is None or raw == "":
        return DEFAULT_TOL
    try:
        tol = float(raw)
    except ValueError:
        raise UsageError(f"PHFORGE_TOL: not a number: {raw!r}") from None
    if not (tol > 0 and math.isfinite(tol)):
        raise UsageError("PHFORGE_TOL must be positive")
    return tol


def _corpus_params(args) -> dict[str, Any]:
    if args.param and not args.corpus:
        raise UsageError("--param applies to --corpus only")
    params = {}
    for text in args.param:
        key, value = cp.parse_param(args.corpus, text)
        params[key] = value
    return params


def _document(args) -> dict[str, Any]:
    if args.corpus:
        return cp.build(args.corpus, _corpus_params(args))
    _corpus_params(args)
    try:
        text = Path(args.system).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {args.system}: {exc.strerror or exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.system}: invalid JSON: {exc}") from None
    return doc


def _load(args) -> SystemDefinition:
    doc = _document(args)
    try:
        return load_system(doc)
    except (SchemaError, DocumentParseError, ex.ExprError) as exc:
        raise UsageError(f"cannot load system: {exc}") from None


def _box(s: SystemDefinition, args):
    return None if args.box is None else [tuple(args.box)] * s.n


def _manifest(args, outputs: list[str], tol: float) -> dict[str, Any]:
    keys = [k for k in vars(args) if k not in ("command", "out", "manifest")]
    return {
        "tool": "phforge",
        "version": __version__,
        "command": args.command,
        "tol": tol,
        "args": {k: getattr(args, k) for k in sorted(keys)},
        "outputs": outputs,
    }


def _finish(args, out: Path, outputs: list[str], tol: float) -> None:
    _write_text(out / "manifest.json", _dumps(_manifest(args, outputs, tol)) + "\n")


# --------------------------------------------------------------------------
# Commands


def cmd_audit(args) -> int:
    tol = _tolerance()
    s = _load(args)
    out = Path(args.out)
    pts = sample_points(s, args.samples, args.seed, _box(s, args))
    report = audit(s, pts, tol)
    _write_text(out / "audit.json", _dumps(report.to_dict()) + "\n")
    _finish(args, out, ["audit.json"], tol)
    if report.passed:
        print(f"audit passed ({args.samples} samples)")
        return EXIT_OK
    print(f"audit failed: {', '.join(report.failing())}", file=sys.stderr)
    return EXIT_FAIL


def _points(s: SystemDefinition, args) -> list[np.ndarray]:
    pts = []
    for z in args.at:
        if len(z) != s.n:
            raise UsageError(f"--at expects {s.n} coordinates, got {len(z)}")
        pts.append(np.array(z))
    box = np.asarray(_box(s, args) or s.default_box(), dtype=float)
    if args.grid:
        axes = [np.linspace(lo, hi, args.grid) for lo, hi in box]
        pts.extend(np.array(p) for p in itertools.product(*axes))
    if args.random:
        pts.extend(sample_points(s, args.random, args.seed, box))
    if not pts:
        raise UsageError("no points given; use --at, --grid or --random")
    return pts


def cmd_decompose(args) -> int:
    tol = _tolerance()
    s = _load(args)
    out = Path(args.out)
    pts = _points(s, args)
    q = QuadratureConfig(nodes=args.quad_nodes, path=args.quad_path)
    results = decompose_many(s, pts, args.policy, q, tol, workers=args.workers)
    lines, rows, failed = [], [], 0
    for i, (z, r) in enumerate(zip(pts, results)):
        if isinstance(r, Exception):
            failed += 1
            rec = {"index": i, "z": z, "error": type(r).__name__, "message": str(r)}
            rows.append([i, *map(_fmt, z), "error", "nan", "nan"])
        else:
            rec = {"index": i, **r.to_dict()}
            rows.append([i, *map(_fmt, z), r.strategy, _fmt(r.residuals["recon"]), _fmt(r.residuals["psd"])])
        lines.append(_dumps(rec, indent=None))
    _write_text(out / "decompositions.jsonl", "\n".join(lines) + "\n")
    outputs = ["decompositions.jsonl"]
    if args.csv:
        header = ["point", *[f"z{k + 1}" for k in range(s.n)], "strategy", "recon", "lambda_min_R"]
        _write_text(out / "summary.csv", _csv_text(header, rows))
        outputs.append("summary.csv")
    _finish(args, out, outputs, tol)
    if failed:
        print(f"{failed} of {len(pts)} points failed", file=sys.stderr)
        return EXIT_FAIL
    print(f"decomposed {len(pts)} points")
    return EXIT_OK


def cmd_simulate(args) -> int:
    tol = _tolerance()
    s = _load(args)
    out = Path(args.out)
    if not (args.dt > 0 and math.isfinite(args.dt)):
        raise UsageError("--dt must be positive")
    if not (args.T > 0 and math.isfinite(args.T)):
        raise UsageError("--T must be positive")
    z0 = args.z0 if args.z0 is not None else s.z0
    if z0 is None:
        raise UsageError("no initial state: pass --z0")
    if len(z0) != s.n:
        raise UsageError(f"--z0 expects {s.n} coordinates, got {len(z0)}")
    u = args.u if args.u is not None else [0.0] * s.m
    if len(u) != s.m:
        raise UsageError(f"--u expects {s.m} entries, got {len(u)}")
    bound = tol if args.ledger_bound is None else args.ledger_bound
    cfg = IntegratorConfig(dt=args.dt, scheme=args.scheme)
    q = QuadratureConfig(nodes=args.quad_nodes, path=args.quad_path)
    tr = simulate(s, z0, u, args.T, cfg, args.policy, q, tol)

    header = ["t", *[f"z{k + 1}" for k in range(s.n)], *[f"y{k + 1}" for k in range(s.m)], "H"]
    rows = (
        [_fmt(t), *map(_fmt, z), *map(_fmt, y), _fmt(H)]
        for t, z, y, H in zip(tr.times, tr.states, tr.outputs, tr.energies)
    )
    _write_text(out / "trajectory.csv", _csv_text(header, rows))
    rows = (
        [i, _fmt(e.dH), _fmt(e.dissipation), _fmt(e.supply), _fmt(e.residual)]
        for i, e in enumerate(tr.ledger)
    )
    _write_text(out / "ledger.csv", _csv_text(["step", "dH", "dissipation", "supply", "residual"], rows))
    _finish(args, out, ["trajectory.csv", "ledger.csv"], tol)

    if tr.failed_at is not None:
        last = tr.failed_at - 1
        print(f"solver failed at step {tr.failed_at} (last good step {last}): {tr.error}", file=sys.stderr)
        return EXIT_FAIL
    worst = float(np.max(np.abs(tr.residuals))) if tr.ledger else 0.0
    drift = float(np.max(np.abs(tr.energies - tr.energies[0])))
    if not worst <= bound:
        print(f"ledger residual {worst:.3g} exceeds bound {bound:.3g}", file=sys.stderr)
        return EXIT_FAIL
    print(f"{len(tr.ledger)} steps, max |residual| {worst:.3g}, max |H - H0| {drift:.3g}")
    return EXIT_OK


def cmd_export(args) -> int:
    doc = _document(args)
    try:
        load_system(doc)
    except (SchemaError, DocumentParseError, ex.ExprError) as exc:
        raise UsageError(f"cannot load system: {exc}") from None
    name = (args.corpus or Path(args.system).stem) + ".json"
    out = Path(args.out)
    _write_text(out / name, _dumps(doc) + "\n")
    print(str(out / name))
    return EXIT_OK


COMMANDS = {
    "audit": cmd_audit,
    "decompose": cmd_decompose,
    "simulate": cmd_simulate,
    "export": cmd_export,
}


def _replay(args, parser: argparse.ArgumentParser) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read {args.manifest}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.manifest}: invalid JSON: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("command") not in COMMANDS:
        raise UsageError(f"{args.manifest}: not a phforge manifest")
    command = manifest["command"]
    # start from the parser defaults so manifests from older versions still replay
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    ns = sub.parse_args(_required_stub(manifest))
    for key, value in (manifest.get("args") or {}).items():
        setattr(ns, key, value)
    ns.command = command
    ns.out = args.out if args.out is not None else str(Path(args.manifest).parent)
    return COMMANDS[command](ns)


def _required_stub(manifest: dict) -> list[str]:
    a = manifest.get("args") or {}
    stub = ["--corpus", a["corpus"]] if a.get("corpus") else ["--system", str(a.get("system") or "")]
    if manifest["command"] == "simulate":
        stub += ["--T", "1", "--dt", "1"]
    return stub


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "run":
            return _replay(args, parser)
        return COMMANDS[args.command](args)
    except (UsageError, cp.CorpusError) as exc:
        print(f"phforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ex.DomainError, ValueError) as exc:
        print(f"phforge: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
