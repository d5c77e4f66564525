"""System definitions, field evaluation and passivity audits."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Sequence

import numpy as np

from . import expr as ex
from .expr import Compiled, Expr


class SchemaError(ValueError):
    """The system document does not have the expected shape."""


class DocumentParseError(ValueError):
    """An expression in the document failed to parse; ``path`` names the field."""

    def __init__(self, path: str, cause: ex.ParseError):
        self.path = path
        self.cause = cause
        super().__init__(f"{path}: {cause}")


_RESERVED = set(ex.FUNCTIONS)
_PARAM_NAME = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")


def substitute_params(text: str, params: Mapping[str, float]) -> str:
    """Replace whole-word parameter names by parenthesised literals."""
    if not params:
        return text

    def repl(mt: re.Match) -> str:
        name = mt.group(0)
        if name in params:
            return f"({float(params[name])!r})"
        return name

    return _PARAM_NAME.sub(repl, text)


@dataclass(frozen=True)
class SystemDefinition:
    """Input-affine system ``z' = f(z) + B(z) u`` with storage ``H``.

    ``eta``, ``Df`` and ``Deta`` are derived symbolically at load time.
    """

    name: str
    n: int
    m: int
    f: tuple[Expr, ...]
    H: Expr
    B: tuple[tuple[Expr, ...], ...]
    h: tuple[Expr, ...] | None = None
    description: str = ""
    params: Mapping[str, float] = field(default_factory=dict)
    box: tuple[tuple[float, float], ...] | None = None
    z0: tuple[float, ...] | None = None
    document: Mapping[str, Any] | None = field(default=None, compare=False, repr=False)

    @cached_property
    def eta(self) -> tuple[Expr, ...]:
        return tuple(ex.gradient(self.H, self.n))

    @cached_property
    def Df(self) -> tuple[tuple[Expr, ...], ...]:
        return tuple(tuple(row) for row in ex.jacobian(self.f, self.n))

    @cached_property
    def Deta(self) -> tuple[tuple[Expr, ...], ...]:
        return tuple(tuple(row) for row in ex.jacobian(self.eta, self.n))

    # compiled evaluators; batch axis trails the state axis on input and leads on output

    @cached_property
    def _f(self) -> Compiled:
        return Compiled(self.f, (self.n,))

    @cached_property
    def _H(self) -> Compiled:
        return Compiled([self.H], (1,))

    @cached_property
    def _eta(self) -> Compiled:
        return Compiled(self.eta, (self.n,))

    @cached_property
    def _Df(self) -> Compiled:
        return Compiled(self.Df, (self.n, self.n))

    @cached_property
    def _Deta(self) -> Compiled:
        return Compiled(self.Deta, (self.n, self.n))

    @cached_property
    def _B(self) -> Compiled:
        return Compiled(self.B, (self.n, self.m))

    @cached_property
    def _h(self) -> Compiled | None:
        return None if self.h is None else Compiled(self.h, (self.m,))

    def f_at(self, z) -> np.ndarray:
        return self._f(z)

    def H_at(self, z) -> float:
        return float(self._H(z)[0])

    def eta_at(self, z) -> np.ndarray:
        return self._eta(z)

    def Df_at(self, z) -> np.ndarray:
        return self._Df(z)

    def Deta_at(self, z) -> np.ndarray:
        return self._Deta(z)

    def B_at(self, z) -> np.ndarray:
        return self._B(z)

    def h_at(self, z) -> np.ndarray | None:
        return None if self._h is None else self._h(z)

    def output(self, z, eta=None) -> np.ndarray:
        """Passive output ``y = B(z)^T eta``; uses ``eta(z)`` unless given."""
        e = self.eta_at(z) if eta is None else eta
        return self.B_at(z).T @ e

    def default_box(self) -> list[tuple[float, float]]:
        if self.box is not None:
            return list(self.box)
        return [(-2.0, 2.0)] * self.n


def _as_list(doc: Mapping, key: str, length: int, path: str) -> list:
    value = doc[key]
    if not isinstance(value, list) or len(value) != length:
        raise SchemaError(f"{path}: expected a list of length {length}")
    return value


def _parse_field(text: Any, n: int, path: str, params: Mapping[str, float]) -> Expr:
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        text = repr(float(text))
    if not isinstance(text, str):
        raise SchemaError(f"{path}: expected an expression string")
    try:
        return ex.parse(substitute_params(text, params), n, 0)
    except ex.ParseError as exc:
        raise DocumentParseError(path, exc) from exc


def system_from_document(doc: Mapping[str, Any]) -> SystemDefinition:
    """Build a :class:`SystemDefinition` from an already-decoded document."""
    if not isinstance(doc, Mapping):
        raise SchemaError("document must be a JSON object")
    for key in ("n", "H", "f"):
        if key not in doc:
            raise SchemaError(f"missing required field {key!r}")
    n = doc["n"]
    m = doc.get("m", 0)
    for key, value in (("n", n), ("m", m)):
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise SchemaError(f"{key}: expected a nonnegative integer")
    if n < 1:
        raise SchemaError("n: state dimension must be positive")
    params = doc.get("params", {}) or {}
    if not isinstance(params, Mapping):
        raise SchemaError("params: expected an object")
    for pname, pval in params.items():
        if not _PARAM_NAME.fullmatch(pname) or pname in _RESERVED or re.fullmatch(r"[zu][0-9]+", pname):
            raise SchemaError(f"params: invalid parameter name {pname!r}")
        if not isinstance(pval, (int, float)) or isinstance(pval, bool) or not math.isfinite(pval):
            raise SchemaError(f"params.{pname}: expected a finite number")

    f = tuple(_parse_field(t, n, f"f[{i}]", params) for i, t in enumerate(_as_list(doc, "f", n, "f")))
    H = _parse_field(doc["H"], n, "H", params)

    if "B" in doc and doc["B"] is not None:
        rows = _as_list(doc, "B", n, "B")
        B = []
        for i, row in enumerate(rows):
            if not isinstance(row, list) or len(row) != m:
                raise SchemaError(f"B[{i}]: expected a list of length {m}")
            B.append(tuple(_parse_field(t, n, f"B[{i}][{j}]", params) for j, t in enumerate(row)))
        B = tuple(B)
    else:
        B = tuple(tuple(ex.ZERO for _ in range(m)) for _ in range(n))

    h = None
    if doc.get("h") is not None:
        h = tuple(_parse_field(t, n, f"h[{j}]", params) for j, t in enumerate(_as_list(doc, "h", m, "h")))

    box = None
    if doc.get("box") is not None:
        raw = _as_list(doc, "box", n, "box")
        try:
            box = tuple((float(lo), float(hi)) for lo, hi in raw)
        except (TypeError, ValueError):
            raise SchemaError("box: expected [[lo, hi], ...]") from None
        if any(not lo < hi for lo, hi in box):
            raise SchemaError("box: each interval needs lo < hi")

    z0 = None
    if doc.get("z0") is not None:
        z0 = tuple(float(v) for v in _as_list(doc, "z0", n, "z0"))

    return SystemDefinition(
        name=str(doc.get("name", "")),
        n=n,
        m=m,
        f=f,
        H=H,
        B=B,
        h=h,
        description=str(doc.get("description", "")),
        params=dict(params),
        box=box,
        z0=z0,
        document=dict(doc),
    )


def load_system(document: str | bytes | Mapping[str, Any]) -> SystemDefinition:
    """Parse a JSON system document (text or decoded mapping)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}") from exc
    return system_from_document(document)


@dataclass
class Fields:
    f: np.ndarray
    eta: np.ndarray
    H: float
    B: np.ndarray
    Df: np.ndarray
    Deta: np.ndarray
    y: np.ndarray


def eval_fields(s: SystemDefinition, z: Sequence[float]) -> Fields:
    z = np.asarray(z, dtype=float)
    if z.shape != (s.n,):
        raise ValueError(f"expected a state of length {s.n}, got shape {z.shape}")
    eta = s.eta_at(z)
    B = s.B_at(z)
    return Fields(
        f=s.f_at(z),
        eta=eta,
        H=s.H_at(z),
        B=B,
        Df=s.Df_at(z),
        Deta=s.Deta_at(z),
        y=B.T @ eta,
    )


# --------------------------------------------------------------------------
# Audit


@dataclass
class PointRecord:
    z: list[float]
    H: float
    eta_dot_f: float
    dissipation: float
    sigma_min_Deta: float
    hessian_asymmetry: float
    output_mismatch: float | None
    error: str | None = None


@dataclass
class AuditReport:
    """Per-point checks of the standing assumptions plus global flags.

    Flags are conjunctions over the records. ``eta_root_status`` is one of
    ``"pass"``, ``"fail"`` or ``"indeterminate"`` (Newton did not converge).
    Injectivity of eta is only checked through proxies (invertible Hessian,
    monotone pairs), listed under ``proxy_checks``.
    """

    system: str
    tol: float
    records: list[PointRecord]
    flags: dict[str, bool]
    eta_root: list[float] | None
    eta_root_residual: float | None
    eta_root_status: str
    proxy_checks: dict[str, bool | None]

    @property
    def passed(self) -> bool:
        return all(self.flags.values()) and self.eta_root_status != "fail"

    def failing(self) -> list[str]:
        out = [k for k, v in self.flags.items() if not v]
        if self.eta_root_status == "fail":
            out.append("eta_root")
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "system": self.system,
            "tol": self.tol,
            "passed": self.passed,
            "failing": self.failing(),
            "flags": dict(self.flags),
            "proxy_checks": dict(self.proxy_checks),
            "eta_root": {
                "status": self.eta_root_status,
                "z": self.eta_root,
                "f_norm": self.eta_root_residual,
            },
            "records": [_record_dict(r) for r in self.records],
        }


def _record_dict(r: PointRecord) -> dict[str, Any]:
    return {
        "z": r.z,
        "H": r.H,
        "eta_dot_f": r.eta_dot_f,
        "dissipation": r.dissipation,
        "sigma_min_Deta": r.sigma_min_Deta,
        "hessian_asymmetry": r.hessian_asymmetry,
        "output_mismatch": r.output_mismatch,
        "error": r.error,
    }


HESSIAN_SYMMETRY_TOL = 1e-10


def sample_points(s: SystemDefinition, count: int, seed: int, box=None) -> np.ndarray:
    """Uniform samples in ``box`` (default: the system's documented box)."""
    rng = np.random.default_rng(seed)
    box = np.asarray(box if box is not None else s.default_box(), dtype=float)
    if box.ndim == 1:
        box = np.tile(box, (s.n, 1))
    lo, hi = box[:, 0], box[:, 1]
    return lo + (hi - lo) * rng.random((count, s.n))


def _audit_point(s: SystemDefinition, z: np.ndarray) -> PointRecord:
    nan = float("nan")
    try:
        fl = eval_fields(s, z)
    except ex.DomainError as exc:
        return PointRecord(list(map(float, z)), nan, nan, nan, nan, nan, None, error=str(exc))
    etf = float(fl.eta @ fl.f)
    sig = float(np.linalg.svd(fl.Deta, compute_uv=False)[-1])
    asym = float(np.max(np.abs(fl.Deta - fl.Deta.T)))
    mismatch = None
    if s.h is not None:
        mismatch = float(np.linalg.norm(fl.y - s.h_at(z)))
    return PointRecord(list(map(float, z)), fl.H, etf, -etf, sig, asym, mismatch)


def audit(s: SystemDefinition, samples, tol: float = 1e-9) -> AuditReport:
    """Check the standing assumptions at every sample point.

    Per point: ``H >= -tol``; ``eta^T f <= tol * (1 + |eta| |f|)``; the
    smallest singular value of ``Deta`` exceeds ``tol``; Hessian symmetry;
    and, when ``h`` is given, ``|B^T eta - h| <= tol``. A root of ``eta`` is
    located by Newton from the origin and ``|f|`` is checked there.
    """
    from .decomp import NewtonConfig, NewtonError, invert_eta

    pts = np.atleast_2d(np.asarray(samples, dtype=float))
    if pts.shape[0] == 0:
        raise ValueError("audit needs at least one sample point")
    records = [_audit_point(s, z) for z in pts]

    ok = [r for r in records if r.error is None]
    flags = {"evaluable": len(ok) == len(records)}
    flags["H_nonneg"] = all(r.H >= -tol for r in ok)
    passive = True
    for r, z in zip(records, pts):
        if r.error is not None:
            continue
        scale = 1.0 + float(np.linalg.norm(s.eta_at(z)) * np.linalg.norm(s.f_at(z)))
        passive &= r.eta_dot_f <= tol * scale
    flags["passivity_sample"] = bool(passive)
    flags["deta_invertible_sample"] = all(r.sigma_min_Deta > tol for r in ok)
    flags["hessian_symmetric"] = all(r.hessian_asymmetry <= HESSIAN_SYMMETRY_TOL for r in ok)
    if s.h is not None:
        flags["output_matches_h"] = all(r.output_mismatch <= tol for r in ok)

    # injectivity proxies
    proxies: dict[str, bool | None] = {"deta_invertible": flags["deta_invertible_sample"]}
    posdef = bool(ok) and all(
        np.linalg.eigvalsh(0.5 * (D + D.T))[0] > 0 for D in (s.Deta_at(np.asarray(r.z)) for r in ok)
    )
    if posdef and len(ok) >= 2:
        zs = np.array([r.z for r in ok])
        etas = np.array([s.eta_at(z) for z in zs])
        dz = zs[1:] - zs[:-1]
        de = etas[1:] - etas[:-1]
        proxies["monotone_pairs"] = bool(np.all(np.einsum("ij,ij->i", de, dz) > 0))
    else:
        proxies["monotone_pairs"] = None

    root, residual, status = None, None, "indeterminate"
    try:
        zr = invert_eta(s, np.zeros(s.n), NewtonConfig(tol=min(tol, 1e-12), initial=np.zeros(s.n)))
        root = [float(v) for v in zr]
        residual = float(np.linalg.norm(s.f_at(zr)))
        status = "pass" if residual <= tol else "fail"
    except (NewtonError, ex.DomainError):
        pass

    return AuditReport(
        system=s.name,
        tol=tol,
        records=records,
        flags=flags,
        eta_root=root,
        eta_root_residual=residual,
        eta_root_status=status,
        proxy_checks=proxies,
    )
