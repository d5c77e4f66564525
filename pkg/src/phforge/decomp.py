"""Pointwise construction of ``f(z) = (J(z) - R(z)) eta(z)``.

The base matrix ``M(z)`` comes from Gauss-Legendre quadrature of
``Df(sz) Deta(sz)^{-1}`` over ``s in (0, 1)``. When ``-M_H`` is not positive
semidefinite a correction ``P`` with ``P eta = 0`` and ``M_H + P_H <= 0`` is
added, and the representation is ``J = (M + P)_skew``, ``R = -(M + P)_H``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Sequence

import math

import numpy as np

from . import expr as ex
from .model import SystemDefinition

STRATEGIES = (
    "raw",
    "conservative-tridiagonal",
    "general-canonical",
    "general-energy-aligned",
    "eta-zero-fallback",
)
POLICIES = ("auto", "raw", "conservative", "canonical", "energy-aligned")

SINGULAR_GUARD = 1e-12
SVD_CUTOFF = 1e-12
ANNIHILATION_TOL = 1e-9


class DecompositionError(Exception):
    pass


class SingularJacobianError(DecompositionError):
    pass


class QuadratureError(DecompositionError):
    pass


class InfeasibleCorrectionError(DecompositionError):
    """The tridiagonal ansatz cannot annihilate eta at this point."""


class DegenerateStrategyError(DecompositionError):
    pass


class ReconstructionError(DecompositionError):
    pass


class NewtonError(DecompositionError):
    pass


@dataclass(frozen=True)
class QuadratureConfig:
    """Gauss-Legendre rule on (0, 1).

    ``path="state-ray"`` integrates along ``s*z``. ``path="eta-ray"``
    integrates along ``eta^{-1}(s*eta(z))``, which keeps ``f = M eta``
    exact for nonlinear ``eta`` at the price of one Newton solve per node.
    """

    nodes: int = 32
    adaptive: bool = False
    max_depth: int = 10
    abs_tol: float = 1e-12
    rel_tol: float = 1e-10
    path: str = "state-ray"

    def __post_init__(self):
        if self.nodes < 1:
            raise ValueError("quadrature needs at least one node")
        if self.path not in ("state-ray", "eta-ray"):
            raise ValueError(f"unknown quadrature path {self.path!r}")


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-12
    max_iter: int = 50
    initial: Any = None


@lru_cache(maxsize=64)
def _gauss_legendre_unit(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (x + 1.0), 0.5 * w


def _integrand(s: SystemDefinition, z: np.ndarray, svals: np.ndarray, path: str) -> np.ndarray:
    if path == "state-ray":
        pts = z[:, None] * svals[None, :]
    else:
        target = s.eta_at(z)
        cols = []
        guess = svals[0] * z
        for sv in svals:
            guess = invert_eta(s, sv * target, NewtonConfig(initial=guess))
            cols.append(guess)
        pts = np.array(cols).T
    Df = s.Df_at(pts)
    De = s.Deta_at(pts)
    n = De.shape[1]
    diag = np.einsum("kii->ki", De)
    off = De.copy()
    off[:, np.arange(n), np.arange(n)] = 0.0
    if not off.any():
        # diagonal Hessian: column scaling is what an LU solve would do
        smin = np.min(np.abs(diag), axis=1)
        if np.any(smin <= SINGULAR_GUARD):
            raise SingularJacobianError(f"Deta singular along the ray (sigma_min={smin.min():.3g})")
        return Df / diag[:, None, :]
    smin = np.linalg.svd(De, compute_uv=False)[:, -1]
    if np.any(smin <= SINGULAR_GUARD):
        raise SingularJacobianError(f"Deta singular along the ray (sigma_min={smin.min():.3g})")
    # S = Df De^{-1}  <=>  De^T S^T = Df^T
    return np.linalg.solve(De.transpose(0, 2, 1), Df.transpose(0, 2, 1)).transpose(0, 2, 1)


def _rule(s, z, a, b, q: QuadratureConfig) -> np.ndarray:
    x, w = _gauss_legendre_unit(q.nodes)
    S = _integrand(s, z, a + (b - a) * x, q.path)
    k, n, _ = S.shape
    return (b - a) * (w @ S.reshape(k, n * n)).reshape(n, n)


def _adaptive(s, z, a, b, q, whole, depth) -> tuple[np.ndarray, float]:
    mid = 0.5 * (a + b)
    left = _rule(s, z, a, mid, q)
    right = _rule(s, z, mid, b, q)
    refined = left + right
    err = float(np.max(np.abs(refined - whole)))
    if err <= max(q.abs_tol, q.rel_tol * float(np.max(np.abs(refined)))):
        return refined, err
    if depth >= q.max_depth:
        raise QuadratureError(f"quadrature error estimate {err:.3g} above tolerance at max depth")
    lv, le = _adaptive(s, z, a, mid, q, left, depth + 1)
    rv, re_ = _adaptive(s, z, mid, b, q, right, depth + 1)
    return lv + rv, le + re_


def compute_M(s: SystemDefinition, z: Sequence[float], q: QuadratureConfig = QuadratureConfig()) -> np.ndarray:
    """Quadrature approximation of ``M(z)`` with ``f(z) = M(z) eta(z)``.

    Raises
    ------
    SingularJacobianError
        ``Deta`` is (numerically) singular at a quadrature node.
    QuadratureError
        Adaptive refinement ran out of depth, or the result fails the
        consistency check ``|f - M eta| <= rel_tol * scale + abs_tol``.
    """
    return _checked_M(s, np.asarray(z, dtype=float), q)[0]


def _checked_M(s, z, q):
    whole = _rule(s, z, 0.0, 1.0, q)
    M = _adaptive(s, z, 0.0, 1.0, q, whole, 1)[0] if q.adaptive else whole
    f = s.f_at(z)
    eta = s.eta_at(z)
    gap = _norm(f - M @ eta)
    scale = 1.0 + _norm(f) + _norm(np.abs(M) @ np.abs(eta))
    if gap > q.rel_tol * scale + q.abs_tol:
        hint = " (eta is nonlinear along the ray; try path='eta-ray')" if q.path == "state-ray" else ""
        raise QuadratureError(f"|f - M eta| = {gap:.3g} exceeds quadrature tolerance{hint}")
    return M, f, eta


def split(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Skew-symmetric and symmetric parts of ``M``."""
    M = np.asarray(M, dtype=float)
    return 0.5 * (M - M.T), 0.5 * (M + M.T)


@dataclass
class PSDDiagnosis:
    lambda_min: float
    is_psd: bool


def psd_diagnose(R: np.ndarray, tol: float = 1e-9) -> PSDDiagnosis:
    R = np.asarray(R, dtype=float)
    scale = max(1.0, float(np.max(np.abs(R)))) if R.size else 1.0
    if R.size and float(np.max(np.abs(R - R.T))) > 1e-12 * scale:
        raise ValueError("psd_diagnose expects a symmetric matrix")
    if R.size == 0:
        return PSDDiagnosis(0.0, True)
    lam = float(np.linalg.eigvalsh(R)[0])
    return PSDDiagnosis(lam, lam >= -tol)


# --------------------------------------------------------------------------
# Corrections


def tridiagonal_T(eta: np.ndarray) -> np.ndarray:
    """``T(eta)`` with ``T p = P_skew eta`` for superdiagonal ``p`` of ``P_skew``."""
    eta = np.asarray(eta, dtype=float)
    n = eta.size
    T = np.zeros((n, max(n - 1, 0)))
    idx = np.arange(n - 1)
    T[idx, idx] = eta[1:]
    T[idx + 1, idx] = -eta[:-1]
    return T


def upper_T(eta: np.ndarray) -> np.ndarray:
    """Full strict-upper-triangle system, columns ordered (1,2),(1,3),...,(2,3),..."""
    eta = np.asarray(eta, dtype=float)
    n = eta.size
    iu, ju = np.triu_indices(n, k=1)
    T = np.zeros((n, iu.size))
    cols = np.arange(iu.size)
    T[iu, cols] = eta[ju]
    T[ju, cols] = -eta[iu]
    return T


def skew_from_upper(p: np.ndarray, n: int) -> np.ndarray:
    S = np.zeros((n, n))
    S[np.triu_indices(n, k=1)] = p
    return S - S.T


def skew_from_superdiagonal(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.diag(p, 1) - np.diag(p, -1)


def _min_norm(T: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if T.shape[1] == 0:
        return np.zeros(0)
    return np.linalg.lstsq(T, rhs, rcond=SVD_CUTOFF)[0]


def conservative_superdiagonal(M_H: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Minimum-norm solution ``p`` of ``T(eta) p = M_H eta``."""
    eta = np.asarray(eta, dtype=float)
    return _min_norm(tridiagonal_T(eta), np.asarray(M_H, dtype=float) @ eta)


def _norm(v: np.ndarray) -> float:
    return math.sqrt(float(np.vdot(v, v)))


def _annihilation_bound(M_H: np.ndarray, eta: np.ndarray) -> float:
    return ANNIHILATION_TOL * (1.0 + _norm(M_H @ eta))


def _conservative_parts(M_H: np.ndarray, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = conservative_superdiagonal(M_H, eta)
    P_H, P_skew = -M_H, skew_from_superdiagonal(p)
    gap = _norm(P_H @ eta + P_skew @ eta)
    if gap > _annihilation_bound(M_H, eta):
        raise InfeasibleCorrectionError(
            f"tridiagonal ansatz infeasible: |P eta| = {gap:.3g}; use a general correction"
        )
    return P_H, P_skew


def conservative_correction(M_H: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """``P = -M_H + P_skew`` with tridiagonal ``P_skew`` and ``P eta = 0``.

    Raises :class:`InfeasibleCorrectionError` when the least-squares
    residual is too large for the tridiagonal ansatz.
    """
    P_H, P_skew = _conservative_parts(np.asarray(M_H, dtype=float), np.asarray(eta, dtype=float))
    return P_H + P_skew


def _conservativeness(M_H: np.ndarray, eta: np.ndarray) -> tuple[float, float]:
    """Return ``eta^T M_H eta`` and its relative scale ``|M_H|_F |eta|^2``."""
    return float(eta @ M_H @ eta), _norm(M_H) * float(eta @ eta)


def general_correction(
    M: np.ndarray,
    eta: np.ndarray,
    strategy: str = "canonical",
    w: np.ndarray | None = None,
    tol: float = 1e-9,
) -> np.ndarray:
    """Projection-based correction with ``P eta = 0`` and ``M_H + P_H <= 0``.

    ``P_H = -M_H + Pr^T M_H Pr`` with the oblique projector
    ``Pr = eta w^T / (w^T eta)``; ``P_skew`` is the minimum-norm solution
    of the strict-upper-triangle system against ``(I - Pr)^T M_H eta``.

    strategy
        ``"canonical"`` (``w = eta``), ``"energy-aligned"``
        (``w = M_H eta``, no skew part) or ``"custom"`` (caller's ``w``).
    """
    P_H, P_skew = _general_parts(np.asarray(M, dtype=float), np.asarray(eta, dtype=float), strategy, w, tol)
    return P_H + P_skew


def _general_parts(M, eta, strategy, w, tol) -> tuple[np.ndarray, np.ndarray]:
    M_H = 0.5 * (M + M.T)
    if not np.any(eta):
        raise DegenerateStrategyError("general correction needs eta != 0")
    MHeta = M_H @ eta
    if strategy == "canonical":
        w = eta
    elif strategy == "energy-aligned":
        c, scale = _conservativeness(M_H, eta)
        if abs(c) <= tol * scale:
            raise DegenerateStrategyError("energy-aligned correction needs eta^T M_H eta != 0")
        w = MHeta
    elif strategy == "custom":
        if w is None:
            raise ValueError("custom strategy needs a vector w")
        w = np.asarray(w, dtype=float)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    wn = float(w @ eta)
    if abs(wn) <= tol * float(np.linalg.norm(w)) * float(np.linalg.norm(eta)):
        raise DegenerateStrategyError("w^T eta = 0: projection along W is undefined")

    c = float(eta @ MHeta)
    P_H = -M_H + np.outer(w, w) * (c / (wn * wn))
    P_H = 0.5 * (P_H + P_H.T)
    if strategy == "energy-aligned":
        P_skew = np.zeros_like(P_H)
    else:
        rhs = MHeta - w * (c / wn)
        P_skew = skew_from_upper(_min_norm(upper_T(eta), rhs), eta.size)
    gap = _norm(P_H @ eta + P_skew @ eta)
    if gap > _annihilation_bound(M_H, eta):
        raise DegenerateStrategyError(f"correction does not annihilate eta: |P eta| = {gap:.3g}")
    return P_H, P_skew


# --------------------------------------------------------------------------
# Assembly


@dataclass
class Decomposition:
    z: np.ndarray
    M: np.ndarray
    P: np.ndarray
    J: np.ndarray
    R: np.ndarray
    strategy: str
    residuals: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "z": self.z.tolist(),
            "strategy": self.strategy,
            "M": self.M.tolist(),
            "P": self.P.tolist(),
            "J": self.J.tolist(),
            "R": self.R.tolist(),
            "residuals": dict(self.residuals),
        }


def _assemble(z, M, M_skew, M_H, P_H, P_skew, strategy, f, eta) -> Decomposition:
    # summing the parts keeps J exactly skew and R exactly symmetric, and
    # gives R = 0 exactly when P_H = -M_H
    P = P_H + P_skew
    J = M_skew + P_skew
    R = -(M_H + P_H) + 0.0
    recon = _norm(f - (J - R) @ eta)
    lam = float(np.linalg.eigvalsh(R)[0])
    residuals = {
        "recon": recon,
        "skew": float(np.max(np.abs(J + J.T))),
        "Peta": _norm(P @ eta),
        "psd": lam,
    }
    return Decomposition(z=z, M=M, P=P, J=J, R=R, strategy=strategy, residuals=residuals)


def decompose(
    s: SystemDefinition,
    z: Sequence[float],
    policy: str = "auto",
    q: QuadratureConfig = QuadratureConfig(),
    tol: float = 1e-9,
    recon_tol: float = 1e-8,
) -> Decomposition:
    """Build ``J(z)`` and ``R(z)`` at one point.

    Policy ``auto``: return the raw split when ``-M_H`` is PSD; otherwise
    use the tridiagonal correction when ``eta^T M_H eta`` is negligible
    relative to ``|M_H| |eta|^2`` (falling back to canonical when the
    tridiagonal system is infeasible) and the energy-aligned correction
    otherwise (falling back to canonical when degenerate). Any policy but
    ``raw`` returns ``P = -M_H`` when ``eta(z)`` vanishes.

    Raises :class:`ReconstructionError` when
    ``|f - (J - R) eta| > recon_tol * (1 + |f|)``.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    z = np.asarray(z, dtype=float)
    M, f, eta = _checked_M(s, z, q)
    M_skew, M_H = split(M)
    n = s.n
    zero = np.zeros((n, n))

    if policy == "raw":
        parts, strategy = (zero, zero), "raw"
    elif _norm(eta) <= 1e-10 * (1.0 + _norm(z)):
        parts, strategy = (-M_H, zero), "eta-zero-fallback"
    elif policy == "conservative":
        parts, strategy = _conservative_parts(M_H, eta), "conservative-tridiagonal"
    elif policy == "canonical":
        parts, strategy = _general_parts(M, eta, "canonical", None, tol), "general-canonical"
    elif policy == "energy-aligned":
        parts, strategy = _general_parts(M, eta, "energy-aligned", None, tol), "general-energy-aligned"
    elif np.linalg.eigvalsh(-M_H)[0] >= -tol:
        parts, strategy = (zero, zero), "raw"
    else:
        c, scale = _conservativeness(M_H, eta)
        try:
            if abs(c) <= tol * scale:
                parts, strategy = _conservative_parts(M_H, eta), "conservative-tridiagonal"
            else:
                parts, strategy = _general_parts(M, eta, "energy-aligned", None, tol), "general-energy-aligned"
        except (InfeasibleCorrectionError, DegenerateStrategyError):
            parts, strategy = _general_parts(M, eta, "canonical", None, tol), "general-canonical"

    d = _assemble(z, M, M_skew, M_H, *parts, strategy, f, eta)
    if d.residuals["recon"] > recon_tol * (1.0 + _norm(f)):
        raise ReconstructionError(
            f"|f - (J - R) eta| = {d.residuals['recon']:.3g} above tolerance at z={z.tolist()}"
        )
    return d


def decompose_many(
    s: SystemDefinition,
    points,
    policy: str = "auto",
    q: QuadratureConfig = QuadratureConfig(),
    tol: float = 1e-9,
    workers: int = 1,
) -> list[Decomposition | Exception]:
    """Decompose at each point; failures come back in place as exceptions."""

    def one(z):
        try:
            return decompose(s, z, policy, q, tol)
        except (DecompositionError, ex.DomainError) as exc:
            return exc

    pts = [np.asarray(p, dtype=float) for p in points]
    if workers <= 1:
        return [one(p) for p in pts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, pts))


# --------------------------------------------------------------------------
# eta inversion and (b)-forms


def invert_eta(s: SystemDefinition, v: Sequence[float], newton: NewtonConfig = NewtonConfig()) -> np.ndarray:
    """Solve ``eta(z) = v`` by Newton's method."""
    v = np.asarray(v, dtype=float)
    z = np.zeros(s.n) if newton.initial is None else np.array(newton.initial, dtype=float)
    target = newton.tol * (1.0 + float(np.linalg.norm(v)))
    try:
        for _ in range(newton.max_iter + 1):
            r = s.eta_at(z) - v
            if float(np.linalg.norm(r)) <= target:
                return z
            D = s.Deta_at(z)
            if np.linalg.svd(D, compute_uv=False)[-1] <= SINGULAR_GUARD * max(1.0, float(np.max(np.abs(D)))):
                raise NewtonError(f"Deta singular at Newton iterate z={z.tolist()}")
            z = z - np.linalg.solve(D, r)
            if not np.all(np.isfinite(z)):
                break
    except ex.DomainError as exc:
        raise NewtonError(f"eta inversion left the domain: {exc}") from exc
    raise NewtonError(f"eta inversion did not converge in {newton.max_iter} iterations")


@dataclass
class BForms:
    v: np.ndarray
    z: np.ndarray
    j: np.ndarray
    r: np.ndarray


def ph_b_forms(
    s: SystemDefinition,
    v: Sequence[float],
    source: str = "from-f",
    newton: NewtonConfig = NewtonConfig(),
    policy: str = "auto",
    q: QuadratureConfig = QuadratureConfig(),
    tol: float = 1e-9,
) -> BForms:
    """Conservative and resistive parts ``j(v)``, ``r(v)`` acting on ``v = eta(z)``.

    ``from-f``: ``j = 0`` and ``r = -f(eta^{-1}(v))``.
    ``from-JR``: ``j = J(z) v`` and ``r = R(z) v`` with ``z = eta^{-1}(v)``
    and ``J, R`` from :func:`decompose` under ``policy``.
    """
    v = np.asarray(v, dtype=float)
    z = invert_eta(s, v, newton)
    if source == "from-f":
        return BForms(v, z, np.zeros(s.n), -s.f_at(z))
    if source == "from-JR":
        d = decompose(s, z, policy, q, tol)
        return BForms(v, z, d.J @ v, d.R @ v)
    raise ValueError(f"unknown source {source!r}")
