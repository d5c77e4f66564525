"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see the lines
interleaved with pytest's own output; they are printed either way).
"""

import time

import numpy as np
import pytest

from phforge import corpus
from phforge import expr as ex
from phforge.cli import main
from phforge.decomp import (
    compute_M,
    conservative_superdiagonal,
    decompose,
    general_correction,
    psd_diagnose,
    split,
    tridiagonal_T,
)
from phforge.dynamics import IntegratorConfig, discrete_gradient, simulate
from phforge.model import load_system, sample_points

EPS = np.finfo(float).eps


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def _sym(A):
    return 0.5 * (A + A.T)


# --------------------------------------------------------------------------


def test_criterion_01_constant_K(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_M = worst_JR = 0.0
    strategies = set()
    for case in range(20):
        n = (2, 3, 4)[case % 3]
        A = rng.normal(size=(n, n))
        G = rng.normal(size=(n, n))
        K = (A - A.T) - G @ G.T  # constant J - R with R >= 0
        B = rng.normal(size=(n, n))
        Q = B @ B.T + n * np.eye(n)
        Q = _sym(Q)
        s = load_system(corpus.build_linear_kq(K, Q))
        for z in rng.uniform(-2, 2, size=(10, n)):
            d = decompose(s, z, "auto")
            strategies.add(d.strategy)
            worst_M = max(worst_M, np.max(np.abs(d.M - K)))
            worst_JR = max(worst_JR, np.max(np.abs(d.J - 0.5 * (K - K.T))), np.max(np.abs(d.R + 0.5 * (K + K.T))))
    elapsed = time.perf_counter() - t0
    ok = strategies == {"raw"} and worst_M <= 1e-12 and worst_JR <= 1e-12 and elapsed < 5
    report(1, ok, f"strategies={sorted(strategies)} max|M-K|={worst_M:.2e} max J/R err={worst_JR:.2e} t={elapsed:.2f}s")


def test_criterion_02_rigid_body_closed_forms(report):
    t0 = time.perf_counter()
    params = {"I1": 1.0, "I2": 2.0, "I3": 3.0}
    s = load_system(corpus.build("rigid-body", params))
    facts = corpus.reference_facts("rigid-body", params)
    rng = np.random.default_rng(202)
    worst = 0.0
    count = 0
    while count < 50:
        z = rng.uniform(-2, 2, 3)
        if np.min(np.abs(s.eta_at(z))) < 1e-3:
            continue
        count += 1
        d = decompose(s, z, "auto")
        P_skew, _ = split(d.P)
        worst = max(
            worst,
            np.max(np.abs(d.M - facts["M"](z))),
            np.max(np.abs(P_skew - facts["P_skew"](z))),
            np.max(np.abs(d.M + d.P - facts["M+P"](z))),
        )
    ones = np.ones(3)
    M1 = compute_M(s, ones)
    want = 0.5 * np.array([[0, -1 / 3, -1 / 2], [2 / 3, 0, 2], [-1 / 2, -1, 0]])
    p = conservative_superdiagonal(split(M1)[1], s.eta_at(ones))
    err_M1 = np.max(np.abs(M1 - want))
    err_p = np.max(np.abs(p - np.array([-1 / 12, 1 / 4])))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and err_M1 <= 1e-9 and err_p <= 1e-9 and elapsed < 5
    report(2, ok, f"template err={worst:.2e} M(1,1,1) err={err_M1:.2e} p err={err_p:.2e} t={elapsed:.2f}s")


def test_criterion_03_indefiniteness_and_repair(report):
    s = load_system(corpus.build_rigid_body(1.0, 2.0, 3.0))
    rng = np.random.default_rng(303)
    worst_raw = -np.inf
    worst_R = np.inf
    checked = 0
    for z in rng.uniform(-2, 2, size=(50, 3)):
        M = compute_M(s, z)
        lam = psd_diagnose(-split(M)[1]).lambda_min
        if abs(z[2]) >= 0.1:
            worst_raw = max(worst_raw, lam)
            checked += 1
        worst_R = min(worst_R, decompose(s, z).residuals["psd"])
    ok = checked > 0 and worst_raw < -1e-6 and worst_R >= -1e-10
    report(3, ok, f"{checked} points with |z3|>=0.1: max lambda_min(-M_H)={worst_raw:.3e}; min lambda_min(R)={worst_R:.2e}")


def test_criterion_04_general_correction_closed_forms(report):
    rng = np.random.default_rng(404)
    worst_can = worst_ea = worst_peta = 0.0
    worst_lmin = worst_lmax = -np.inf
    cases = 0
    while cases < 200:
        n = int(rng.integers(2, 7))
        M = rng.normal(size=(n, n))
        eta = rng.normal(size=n)
        M_H = _sym(M)
        c = eta @ M_H @ eta
        if not c < 0:
            continue
        cases += 1
        g = M_H @ eta
        targets = {
            "canonical": np.outer(eta, eta) * c / (eta @ eta) ** 2,
            "energy-aligned": np.outer(g, g) / c,
        }
        for strategy, target in targets.items():
            P = general_correction(M, eta, strategy)
            N = M_H + _sym(P)
            err = np.linalg.norm(N - target)
            if strategy == "canonical":
                worst_can = max(worst_can, err)
            else:
                worst_ea = max(worst_ea, err)
            worst_peta = max(worst_peta, np.linalg.norm(P @ eta) / np.linalg.norm(g))
            lams = np.linalg.eigvalsh(N)
            worst_lmin = max(worst_lmin, lams[0])
            worst_lmax = max(worst_lmax, lams[-1])
    ok = (
        worst_can <= 1e-10
        and worst_ea <= 1e-10
        and worst_peta <= 1e-10
        and worst_lmin <= 1e-10
        and worst_lmax <= 1e-10
    )
    report(
        4,
        ok,
        f"canonical err={worst_can:.2e} energy-aligned err={worst_ea:.2e} "
        f"|P eta|/|M_H eta|={worst_peta:.2e} max lambda_min={worst_lmin:.2e} max lambda_max={worst_lmax:.2e}",
    )


def test_criterion_05_tridiagonal_vs_pseudoinverse(report):
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 5))
        eta = rng.normal(size=n)
        A = rng.normal(size=(n, n))
        A = A + A.T
        u = eta / np.linalg.norm(eta)
        M_H = A - (u @ A @ u) * np.outer(u, u)
        T = tridiagonal_T(eta)
        U, sv, Vt = np.linalg.svd(T, full_matrices=False)
        keep = sv > 1e-12 * sv[0]
        oracle = Vt[keep].T @ ((U[:, keep].T @ (M_H @ eta)) / sv[keep])
        p = conservative_superdiagonal(M_H, eta)
        worst = max(worst, np.max(np.abs(p - oracle)))
    report(5, worst <= 1e-10, f"max |p - pinv| over 500 instances = {worst:.2e}")


def test_criterion_06_energy_exact_integration(report):
    t0 = time.perf_counter()
    rigid = load_system(corpus.build_rigid_body(1.0, 2.0, 3.0))
    tr = simulate(rigid, [1.0, 1.0, 1.0], None, 100.0, IntegratorConfig(0.01))
    drift = np.max(np.abs(tr.energies - tr.energies[0])) if tr.failed_at is None else np.inf
    lin = load_system(corpus.build("linear-kq"))
    tl = simulate(lin, [1.0, 0.0], None, 10.0, IntegratorConfig(0.01))
    resid = np.max(np.abs(tl.residuals))
    monotone = bool(np.all(np.diff(tl.energies) <= 0))
    elapsed = time.perf_counter() - t0
    ok = drift <= 1e-10 and resid <= 1e-11 and monotone and tl.failed_at is None and elapsed < 30
    report(
        6,
        ok,
        f"rigid body {len(tr.ledger)} steps drift={drift:.2e}; linear residual={resid:.2e} "
        f"nonincreasing={monotone}; t={elapsed:.1f}s",
    )


def test_criterion_07_wave(report):
    t0 = time.perf_counter()
    params = {"ncells": 20, "law": "linear", "c": 1.0, "gamma": 0.1, "nu": 0.01}
    doc = corpus.build("wave-fd", params)
    s = load_system(doc)
    tr = simulate(s, doc["z0"], [0.0, 0.0], 10.0, IntegratorConfig(0.005))
    diss = min(e.dissipation for e in tr.ledger)
    resid = float(np.max(np.abs(tr.residuals)))
    N = params["ncells"]
    idx = np.linspace(0, len(tr.states) - 1, 20).round().astype(int)
    lam_min = np.inf
    off_block = 0.0
    for i in idx:
        d = decompose(s, tr.states[i])
        lam_min = min(lam_min, d.residuals["psd"])
        mask = np.ones_like(d.R, dtype=bool)
        mask[N:, N:] = False
        off_block = max(off_block, np.max(np.abs(d.R[mask])))
    elapsed = time.perf_counter() - t0
    ok = (
        tr.failed_at is None
        and len(tr.ledger) == 2000
        and diss >= -1e-10
        and resid <= 1e-9
        and lam_min >= -1e-9
        and off_block == 0.0
        and elapsed < 60
    )
    report(
        7,
        ok,
        f"{len(tr.ledger)} steps min dissipation={diss:.2e} max residual={resid:.2e} "
        f"min lambda_min(R)={lam_min:.2e} R outside velocity block={off_block:.1e} t={elapsed:.1f}s",
    )


def _corpus_systems():
    return {
        "linear-kq": corpus.build("linear-kq"),
        "linear-kq(3x3)": corpus.build_linear_kq(
            [[0, 1, 0], [-1, -0.5, 2], [0, -2, -1]], [[2, 0.5, 0], [0.5, 1, 0.2], [0, 0.2, 3]]
        ),
        "rigid-body": corpus.build("rigid-body"),
        "wave-fd": corpus.build("wave-fd"),
        "wave-fd(gamma-law)": corpus.build("wave-fd", {"law": "gamma-law", "friction": "v + v^3"}),
    }


def test_criterion_08_discrete_gradient(report):
    worst_id = 0.0
    worst_quad = 0.0
    for name, doc in _corpus_systems().items():
        s = load_system(doc)
        pts = sample_points(s, 2000, seed=808)
        quadratic = not name.endswith("(gamma-law)")
        for z1, z2 in zip(pts[:1000], pts[1000:]):
            g = discrete_gradient(s, z1, z2)
            H1, H2 = s.H_at(z1), s.H_at(z2)
            worst_id = max(worst_id, abs(g @ (z2 - z1) - (H2 - H1)) / (1 + abs(H1) + abs(H2)))
            if quadratic:
                want = s.Deta_at(z1) @ (0.5 * (z1 + z2))
                worst_quad = max(worst_quad, np.max(np.abs(g - want) / (1 + np.abs(want))))
    ok = worst_id <= 1e-13 and worst_quad <= 4 * EPS
    report(8, ok, f"identity rel err={worst_id:.2e}; quadratic exactness err={worst_quad:.2e} (4 eps={4 * EPS:.1e})")


def test_criterion_09_symbolic_vs_fd(report):
    worst = 0.0
    count = 0
    for name, doc in _corpus_systems().items():
        s = load_system(doc)
        exprs = list(s.f) + [s.H] + [e for row in s.B for e in row]
        pts = sample_points(s, 100, seed=909)  # (100, n)
        Z = pts.T
        for e in exprs:
            grad = ex.Compiled(ex.gradient(e, s.n), (s.n,))(Z)  # (100, n)
            fn = ex.Compiled([e], (1,))
            for k in sorted(v.index for v in ex.variables(e) if v.kind == "z"):
                h = 1e-5 * (np.abs(Z[k - 1]) + 1)
                Zp, Zm = Z.copy(), Z.copy()
                Zp[k - 1] += h
                Zm[k - 1] -= h
                fd = (fn(Zp)[:, 0] - fn(Zm)[:, 0]) / (2 * h)
                err = np.abs(grad[:, k - 1] - fd) / np.maximum(1.0, np.abs(fd))
                worst = max(worst, float(np.max(err)))
                count += 100
    report(9, worst <= 1e-6, f"{count} partial derivatives, max relative error={worst:.2e}")


def test_criterion_10_determinism(report, tmp_path):
    commands = {
        "audit": ["audit", "--corpus", "rigid-body", "--samples", "50", "--seed", "7"],
        "decompose": ["decompose", "--corpus", "wave-fd", "--param", "ncells=6", "--random", "20",
                      "--seed", "3", "--workers", "4", "--csv"],
        "simulate": ["simulate", "--corpus", "wave-fd", "--param", "ncells=6", "--T", "0.5", "--dt", "0.01",
                     "--u", "0.1,0"],
        "export": ["export", "--corpus", "linear-kq", "--param", "K=0,1;-1,-2"],
    }
    mismatches = []
    for name, argv in commands.items():
        dirs = [tmp_path / f"{name}-{k}" for k in range(2)]
        codes = [main([*argv, "--out", str(d)]) for d in dirs]
        if name != "export":
            replay = tmp_path / f"{name}-replay"
            codes.append(main(["run", str(dirs[0] / "manifest.json"), "--out", str(replay)]))
            dirs.append(replay)
        if any(codes):
            mismatches.append(f"{name}: exit codes {codes}")
            continue
        files = sorted(p.name for p in dirs[0].iterdir())
        for d in dirs[1:]:
            for f in files:
                if (dirs[0] / f).read_bytes() != (d / f).read_bytes():
                    mismatches.append(f"{name}/{f}")
    report(10, not mismatches, "byte-identical reruns and replays" if not mismatches else f"differ: {mismatches}")
