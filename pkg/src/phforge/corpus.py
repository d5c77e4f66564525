"""Built-in parameterized systems.

Each builder returns a plain JSON-compatible document accepted by
:func:`phforge.model.load_system`. Reference facts are closed-form matrices
(as callables of the state) against which :mod:`phforge.decomp` results can
be checked.

``wave-fd`` port convention: the inputs are the boundary velocities
``u = (v(0), v(l))`` and the conjugate outputs are ``y = (p(rho_1), -p(rho_N))``
so that ``y.u`` is the power entering through both ends.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import expr as ex

__all__ = [
    "CORPUS",
    "CorpusEntry",
    "CorpusError",
    "build",
    "build_linear_kq",
    "build_rigid_body",
    "build_wave_fd",
    "parse_param",
    "reference_facts",
    "RIGID_BODY_TEMPLATES",
]


class CorpusError(ValueError):
    pass


def _num(x: float) -> str:
    return repr(float(x))


def _linear_form(coeffs: Sequence[float], names: Sequence[str]) -> str:
    terms = []
    for c, name in zip(coeffs, names):
        c = float(c)
        if c == 0.0:
            continue
        sign = "-" if c < 0 else "+"
        mag = abs(c)
        body = name if mag == 1.0 else f"{_num(mag)}*{name}"
        terms.append((sign, body))
    if not terms:
        return "0"
    first_sign, first = terms[0]
    out = ("-" if first_sign == "-" else "") + first
    for sign, body in terms[1:]:
        out += f" {sign} {body}"
    return out


def _zs(n: int) -> list[str]:
    return [f"z{i + 1}" for i in range(n)]


# --------------------------------------------------------------------------
# Linear K Q


def _as_square(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise CorpusError(f"{name} must be a nonempty square matrix")
    if not np.all(np.isfinite(a)):
        raise CorpusError(f"{name} must be finite")
    return a


def build_linear_kq(K, Q) -> dict[str, Any]:
    """``f(z) = K Q z`` with ``H(z) = z^T Q z / 2``.

    Raises
    ------
    CorpusError
        ``Q`` is not symmetric positive definite, or shapes disagree.
    """
    K = _as_square(K, "K")
    Q = _as_square(Q, "Q")
    if K.shape != Q.shape:
        raise CorpusError("K and Q must have the same shape")
    if not np.array_equal(Q, Q.T):
        raise CorpusError("Q must be symmetric")
    try:
        np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        raise CorpusError("Q must be positive definite") from None
    n = Q.shape[0]
    z = _zs(n)
    KQ = K @ Q
    f = [_linear_form(KQ[i], z) for i in range(n)]
    quad_terms, quad_names = [], []
    for i in range(n):
        for j in range(i, n):
            c = Q[i, i] / 2.0 if i == j else Q[i, j]
            quad_terms.append(c)
            quad_names.append(f"{z[i]}^2" if i == j else f"{z[i]}*{z[j]}")
    return {
        "name": "linear-kq",
        "description": "linear system f = K Q z with quadratic energy",
        "n": n,
        "m": 0,
        "f": f,
        "H": _linear_form(quad_terms, quad_names),
        "params": {},
        "K": K.tolist(),
        "Q": Q.tolist(),
    }


def _linear_facts(K, Q) -> dict[str, Callable]:
    K = np.asarray(K, dtype=float)
    J, R = 0.5 * (K - K.T), -0.5 * (K + K.T)
    return {"M": lambda z: K.copy(), "J": lambda z: J.copy(), "R": lambda z: R.copy()}


# --------------------------------------------------------------------------
# Rigid body

# Closed forms in terms of z1..z3 and I1..I3; entries are row-major 3x3.
RIGID_BODY_TEMPLATES: dict[str, tuple[tuple[str, ...], ...]] = {
    "S": (
        ("0", "-z3*(1 - I2/I3)", "z2*(1 - I3/I2)"),
        ("z3*(1 - I1/I3)", "0", "-z1*(1 - I3/I1)"),
        ("-z2*(1 - I1/I2)", "z1*(1 - I2/I1)", "0"),
    ),
    "M": (
        ("0", "-z3*(1 - I2/I3)/2", "z2*(1 - I3/I2)/2"),
        ("z3*(1 - I1/I3)/2", "0", "-z1*(1 - I3/I1)/2"),
        ("-z2*(1 - I1/I2)/2", "z1*(1 - I2/I1)/2", "0"),
    ),
    "P_skew": (
        ("0", "z3*(I2 - I3)/I3/4", "0"),
        ("-z3*(I2 - I3)/I3/4", "0", "z1*(I2 - I1)/I1/4"),
        ("0", "-z1*(I2 - I1)/I1/4", "0"),
    ),
    "M+P": (
        ("0", "z3*(I1 + 2*I2 - 3*I3)/I3/4", "-z2*(I1 - 2*I2 + I3)/I2/4"),
        ("-z3*(I1 + 2*I2 - 3*I3)/I3/4", "0", "-z1*(3*I1 - 2*I2 - I3)/I1/4"),
        ("z2*(I1 - 2*I2 + I3)/I2/4", "z1*(3*I1 - 2*I2 - I3)/I1/4", "0"),
    ),
    "J_usual": (
        ("0", "-z3", "z2"),
        ("z3", "0", "-z1"),
        ("-z2", "z1", "0"),
    ),
}


def _inertia(I1, I2, I3) -> dict[str, float]:
    vals = {"I1": float(I1), "I2": float(I2), "I3": float(I3)}
    for k, v in vals.items():
        if not (v > 0 and math.isfinite(v)):
            raise CorpusError(f"{k} must be a positive finite number")
    return vals


def build_rigid_body(I1: float = 1.0, I2: float = 2.0, I3: float = 3.0) -> dict[str, Any]:
    """Free rigid body with angular momenta ``z`` and principal moments ``I``."""
    return {
        "name": "rigid-body",
        "description": "torque-free rigid body (Euler equations)",
        "n": 3,
        "m": 0,
        "f": ["z2*z3*(1/I3 - 1/I2)", "z1*z3*(1/I1 - 1/I3)", "z1*z2*(1/I2 - 1/I1)"],
        "H": "0.5*(z1^2/I1 + z2^2/I2 + z3^2/I3)",
        "params": _inertia(I1, I2, I3),
        "z0": [1.0, 1.0, 1.0],
    }


def _template_fn(rows, params: Mapping[str, float]) -> Callable[[np.ndarray], np.ndarray]:
    from .model import substitute_params

    exprs = [ex.parse(substitute_params(t, params), 3) for row in rows for t in row]
    comp = ex.Compiled(exprs, (3, 3))
    return lambda z: comp(np.asarray(z, dtype=float))


def _rigid_facts(I1=1.0, I2=2.0, I3=3.0) -> dict[str, Callable]:
    params = _inertia(I1, I2, I3)
    return {k: _template_fn(v, params) for k, v in RIGID_BODY_TEMPLATES.items()}


# --------------------------------------------------------------------------
# Wave equation on a staggered grid

_V_WORD = re.compile(r"(?<![A-Za-z_0-9])v(?![A-Za-z_0-9])")
SERIES_SWITCH = 1e-8


@dataclass(frozen=True)
class PressureLaw:
    """``p(rho)`` and its potential ``P`` with ``P' = p``, ``P(0) = 0``."""

    kind: str
    c: float = 1.0
    kappa: float = 1.0
    gamma_exp: float = 1.4

    def __post_init__(self):
        if self.kind == "linear":
            if not (self.c > 0 and math.isfinite(self.c)):
                raise CorpusError("linear pressure law needs c > 0")
        elif self.kind == "gamma-law":
            if not (self.kappa > 0 and math.isfinite(self.kappa)):
                raise CorpusError("gamma-law needs kappa > 0")
            if not (self.gamma_exp > 0 and math.isfinite(self.gamma_exp)):
                raise CorpusError("gamma-law needs an exponent > 0")
        else:
            raise CorpusError(f"unknown pressure law {self.kind!r}; use 'linear' or 'gamma-law'")

    def p(self, rho: str) -> str:
        if self.kind == "linear":
            return f"{_num(self.c ** 2)}*{rho}"
        return f"{_num(self.kappa)}*{rho}^{_num(self.gamma_exp)}"

    def P(self, rho: str) -> str:
        if self.kind == "linear":
            return f"{_num(self.c ** 2 / 2)}*{rho}^2"
        g1 = self.gamma_exp + 1.0
        return f"{_num(self.kappa / g1)}*{rho}^{_num(g1)}"

    def p_num(self, rho: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return self.c ** 2 * rho
        return self.kappa * np.power(rho, self.gamma_exp)


def _friction_expr(friction: str) -> ex.Expr:
    try:
        return ex.parse(_V_WORD.sub("z1", friction), 1)
    except ex.ParseError as exc:
        raise CorpusError(f"friction: {exc} (use the variable 'v')") from None


def build_wave_fd(
    ncells: int = 20,
    law: str = "linear",
    c: float = 1.0,
    kappa: float = 1.0,
    gamma_exp: float = 1.4,
    gamma: float = 0.1,
    nu: float = 0.01,
    length: float = 1.0,
    friction: str = "v",
) -> dict[str, Any]:
    """Damped quasilinear wave equation on ``N = ncells`` cells.

    State ``(rho_1..rho_N, v_1..v_{N-1})`` with densities on cells and
    velocities on interior faces, ``dx = length / N`` and

    ``H = dx * sum P(rho_i) + dx * sum v_k^2 / 2``.

    Momentum carries friction ``-gamma F(v_k)`` and viscosity
    ``-nu (D^T D v)_k`` with ``D`` the interior face difference. The two
    inputs are the boundary velocities. Sampling boxes keep ``rho`` in
    ``[0.5, 1.5]`` so the gamma law stays injective.
    """
    if not isinstance(ncells, int) or isinstance(ncells, bool) or ncells < 2:
        raise CorpusError("ncells must be an integer >= 2")
    for name, val in (("gamma", gamma), ("nu", nu)):
        if not (val >= 0 and math.isfinite(val)):
            raise CorpusError(f"{name} must be a finite number >= 0")
    if not (length > 0 and math.isfinite(length)):
        raise CorpusError("length must be positive")
    pl = PressureLaw(law, c, kappa, gamma_exp)
    _friction_expr(friction)

    N = ncells
    dx = length / N
    rho = [f"z{i + 1}" for i in range(N)]
    vel = [f"z{N + k + 1}" for k in range(N - 1)]
    inv = _num(1.0 / dx)
    inv2 = _num(1.0 / dx ** 2)

    f = []
    for i in range(N):
        if i == 0:
            f.append(f"-{inv}*{vel[0]}")
        elif i == N - 1:
            f.append(f"{inv}*{vel[N - 2]}")
        else:
            f.append(f"-{inv}*({vel[i]} - {vel[i - 1]})")
    for k in range(N - 1):
        terms = [f"-{inv}*({pl.p(rho[k + 1])} - {pl.p(rho[k])})"]
        if gamma:
            terms.append(f"{_num(gamma)}*({_V_WORD.sub(vel[k], friction)})")
            terms[-1] = "-" + terms[-1]
        if nu and N > 2:
            # (D^T D v)_k with free ends: one-sided at k = 0 and k = N-2
            if k == 0:
                lap = f"{vel[1]} - {vel[0]}"
            elif k == N - 2:
                lap = f"{vel[k - 1]} - {vel[k]}"
            else:
                lap = f"{vel[k + 1]} - 2*{vel[k]} + {vel[k - 1]}"
            terms.append(f"{_num(nu)}*{inv2}*({lap})")
        f.append(" + ".join(terms).replace("+ -", "- "))

    H = _num(dx) + "*(" + " + ".join([pl.P(r) for r in rho] + [f"0.5*{v}^2" for v in vel]) + ")"
    B = [["0", "0"] for _ in range(2 * N - 1)]
    B[0][0] = inv
    B[N - 1][1] = f"-{inv}"

    x = (np.arange(N) + 0.5) * dx
    bump = 1.0 + 0.1 * np.exp(-(((x - 0.5 * length) / (0.1 * length)) ** 2))
    z0 = [float(r) for r in bump] + [0.0] * (N - 1)
    box = [[0.5, 1.5]] * N + [[-0.5, 0.5]] * (N - 1)
    return {
        "name": "wave-fd",
        "description": f"staggered finite-difference wave equation, {N} cells, {law} pressure",
        "n": 2 * N - 1,
        "m": 2,
        "f": f,
        "H": H,
        "B": B,
        "params": {},
        "box": box,
        "z0": z0,
        "grid": {"ncells": N, "dx": dx, "length": length},
    }


def friction_ratio(friction: str, v: np.ndarray) -> np.ndarray:
    """``F(v)/v`` with the limit ``F'(0)`` below ``|v| < 1e-8``."""
    F = _friction_expr(friction)
    dF0 = ex.evaluate(ex.differentiate(F, "z1"), [0.0])
    out = np.empty(len(v))
    for k, vk in enumerate(np.asarray(v, dtype=float)):
        out[k] = dF0 if abs(vk) < SERIES_SWITCH else ex.evaluate(F, [vk]) / vk
    return out


def wave_operators(ncells: int, length: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Cell-to-face incidence ``A`` (N x N-1) and interior difference ``D``.

    ``drho/dt = -A v / dx`` and ``(D v)_j = (v_{j+1} - v_j) / dx``.
    """
    N = ncells
    dx = length / N
    A = np.zeros((N, N - 1))
    A[np.arange(N - 1), np.arange(N - 1)] = 1.0
    A[np.arange(1, N), np.arange(N - 1)] = -1.0
    D = np.zeros((max(N - 2, 0), N - 1))
    D[np.arange(N - 2), np.arange(N - 2)] = -1.0 / dx
    D[np.arange(N - 2), np.arange(1, N - 1)] = 1.0 / dx
    return A, D


def _wave_facts(ncells=20, law="linear", c=1.0, kappa=1.0, gamma_exp=1.4, gamma=0.1,
                nu=0.01, length=1.0, friction="v") -> dict[str, Callable]:
    N = ncells
    dx = length / N
    A, D = wave_operators(N, length)
    J = np.zeros((2 * N - 1, 2 * N - 1))
    J[:N, N:] = -A / dx ** 2
    J[N:, :N] = A.T / dx ** 2

    def R(z):
        z = np.asarray(z, dtype=float)
        out = np.zeros((2 * N - 1, 2 * N - 1))
        out[N:, N:] = (gamma * np.diag(friction_ratio(friction, z[N:])) + nu * D.T @ D) / dx
        return out

    return {"J": lambda z: J.copy(), "R": R}


# --------------------------------------------------------------------------
# Registry


@dataclass(frozen=True)
class CorpusEntry:
    id: str
    builder: Callable[..., dict]
    facts: Callable[..., dict]
    defaults: Mapping[str, Any] = field(default_factory=dict)
    description: str = ""


CORPUS: dict[str, CorpusEntry] = {
    "linear-kq": CorpusEntry(
        "linear-kq",
        build_linear_kq,
        _linear_facts,
        {"K": [[0.0, 1.0], [-1.0, -1.0]], "Q": [[1.0, 0.0], [0.0, 1.0]]},
        "f = K Q z, H = z^T Q z / 2",
    ),
    "rigid-body": CorpusEntry(
        "rigid-body",
        build_rigid_body,
        _rigid_facts,
        {"I1": 1.0, "I2": 2.0, "I3": 3.0},
        "torque-free rigid body",
    ),
    "wave-fd": CorpusEntry(
        "wave-fd",
        build_wave_fd,
        _wave_facts,
        {
            "ncells": 20,
            "law": "linear",
            "c": 1.0,
            "kappa": 1.0,
            "gamma_exp": 1.4,
            "gamma": 0.1,
            "nu": 0.01,
            "length": 1.0,
            "friction": "v",
        },
        "damped wave equation, staggered finite differences",
    ),
}


def _entry(corpus_id: str) -> CorpusEntry:
    try:
        return CORPUS[corpus_id]
    except KeyError:
        raise CorpusError(f"unknown corpus id {corpus_id!r}; choose from {sorted(CORPUS)}") from None


def _merged(entry: CorpusEntry, params: Mapping[str, Any] | None) -> dict[str, Any]:
    params = dict(params or {})
    unknown = set(params) - set(entry.defaults)
    if unknown:
        raise CorpusError(f"{entry.id}: unknown parameter(s) {sorted(unknown)}")
    merged = dict(entry.defaults)
    merged.update(params)
    return merged


def build(corpus_id: str, params: Mapping[str, Any] | None = None) -> dict[str, Any]:
    """Document for ``corpus_id`` with ``params`` overriding the defaults."""
    entry = _entry(corpus_id)
    try:
        return entry.builder(**_merged(entry, params))
    except TypeError as exc:
        raise CorpusError(f"{corpus_id}: {exc}") from None


def reference_facts(corpus_id: str, params: Mapping[str, Any] | None = None) -> dict[str, Callable]:
    """Closed-form matrices ``name -> (z -> ndarray)`` for ``corpus_id``."""
    entry = _entry(corpus_id)
    return entry.facts(**_merged(entry, params))


def parse_param(corpus_id: str, text: str) -> tuple[str, Any]:
    """Parse ``KEY=VALUE`` against the defaults of ``corpus_id``.

    Matrices are written row by row: ``K=0,1;-1,-1``.
    """
    entry = _entry(corpus_id)
    if "=" not in text:
        raise CorpusError(f"parameter {text!r} is not of the form KEY=VALUE")
    key, value = (s.strip() for s in text.split("=", 1))
    if key not in entry.defaults:
        raise CorpusError(f"{corpus_id}: unknown parameter {key!r}; known: {sorted(entry.defaults)}")
    ref = entry.defaults[key]
    try:
        if isinstance(ref, list):
            rows = [[float(x) for x in row.split(",")] for row in value.split(";")]
            if len({len(r) for r in rows}) != 1:
                raise ValueError("ragged matrix")
            return key, rows
        if isinstance(ref, bool) or isinstance(ref, str):
            return key, value
        if isinstance(ref, int):
            return key, int(value)
        return key, float(value)
    except ValueError as exc:
        raise CorpusError(f"parameter {key}: cannot parse {value!r} ({exc})") from None
