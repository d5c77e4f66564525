import json

import numpy as np
import pytest

from phforge import corpus
from phforge.corpus import CorpusError
from phforge.decomp import decompose, split
from phforge.dynamics import IntegratorConfig, simulate
from phforge.model import audit, load_system, sample_points


def _random_spd(rng, n):
    A = rng.normal(size=(n, n))
    Q = A @ A.T + n * np.eye(n)
    return 0.5 * (Q + Q.T)


# --------------------------------------------------------------------------
# linear K Q


def test_linear_example_raw_with_expected_R():
    s = load_system(corpus.build_linear_kq([[0, 1], [-1, -1]], np.eye(2)))
    d = decompose(s, [0.4, 1.3])
    assert d.strategy == "raw"
    assert np.max(np.abs(d.R - np.diag([0.0, 1.0]))) <= 1e-15


def test_skew_K_is_lossless():
    K = np.array([[0.0, 2.0, -1.0], [-2.0, 0.0, 0.5], [1.0, -0.5, 0.0]])
    s = load_system(corpus.build_linear_kq(K, np.eye(3)))
    d = decompose(s, [0.3, -0.7, 1.1], "conservative")
    assert d.strategy == "conservative-tridiagonal"
    assert np.array_equal(d.R, np.zeros((3, 3)))
    assert np.max(np.abs(decompose(s, [0.3, -0.7, 1.1]).R)) == 0.0


@pytest.mark.parametrize(
    "Q",
    [[[1.0, 0.5], [0.0, 1.0]], [[1.0, 0.0], [0.0, -1.0]], [[1.0, 2.0], [2.0, 1.0]]],
)
def test_Q_must_be_spd(Q):
    with pytest.raises(CorpusError):
        corpus.build_linear_kq(np.eye(2), Q)


def test_shape_mismatch():
    with pytest.raises(CorpusError):
        corpus.build_linear_kq(np.eye(3), np.eye(2))


def test_linear_facts_match_decomposition():
    rng = np.random.default_rng(17)
    for _ in range(20):
        n = int(rng.integers(2, 5))
        K = rng.normal(size=(n, n))
        Q = _random_spd(rng, n)
        s = load_system(corpus.build_linear_kq(K, Q))
        facts = corpus.reference_facts("linear-kq", {"K": K.tolist(), "Q": Q.tolist()})
        for z in rng.uniform(-2, 2, size=(5, n)):
            d = decompose(s, z, "raw")
            for name, got in (("M", d.M), ("J", d.J), ("R", d.R)):
                assert np.max(np.abs(got - facts[name](z))) <= 1e-9


# --------------------------------------------------------------------------
# rigid body


def test_rigid_body_templates_match_decomposition():
    rng = np.random.default_rng(23)
    for _ in range(100):
        I = rng.uniform(0.5, 4.0, 3)
        z = rng.uniform(-2, 2, 3)
        params = dict(zip(("I1", "I2", "I3"), I))
        s = load_system(corpus.build("rigid-body", params))
        facts = corpus.reference_facts("rigid-body", params)
        d = decompose(s, z, "conservative")
        P_skew, _ = split(d.P)
        assert np.max(np.abs(d.M - facts["M"](z))) <= 1e-9
        assert np.max(np.abs(P_skew - facts["P_skew"](z))) <= 1e-9
        assert np.max(np.abs(d.M + d.P - facts["M+P"](z))) <= 1e-9
        S = s.Df_at(z) @ np.linalg.inv(s.Deta_at(z))
        assert np.max(np.abs(S - facts["S"](z))) <= 1e-9
        assert s.f_at(z) == pytest.approx(facts["J_usual"](z) @ s.eta_at(z), abs=1e-12)


def test_symmetric_body_is_trivial():
    s = load_system(corpus.build_rigid_body(2.0, 2.0, 2.0))
    for z in sample_points(s, 10, seed=1):
        assert np.array_equal(s.f_at(z), np.zeros(3))
        d = decompose(s, z, "conservative")
        assert np.array_equal(d.M, np.zeros((3, 3)))
        assert np.max(np.abs(d.P)) == 0.0


def test_rigid_body_conservative_at_random_points():
    s = load_system(corpus.build_rigid_body(1.0, 2.0, 3.0))
    for z in sample_points(s, 100, seed=5):
        assert abs(s.eta_at(z) @ s.f_at(z)) <= 1e-15


@pytest.mark.parametrize("bad", [(0.0, 1.0, 1.0), (1.0, -2.0, 1.0), (1.0, 1.0, float("inf"))])
def test_nonpositive_inertia(bad):
    with pytest.raises(CorpusError):
        corpus.build_rigid_body(*bad)


# --------------------------------------------------------------------------
# wave


def _oracle_velocity_block(N, dx, gamma, nu, ratio):
    """Friction diagonal plus the viscous stiffness matrix with free ends."""
    L = np.zeros((N - 1, N - 1))
    for j in range(N - 2):  # each interior cell couples faces j, j+1
        L[j, j] += 1
        L[j + 1, j + 1] += 1
        L[j, j + 1] -= 1
        L[j + 1, j] -= 1
    return (gamma * np.diag(ratio) + nu * L / dx**2) / dx


def test_wave_R_block_linear_friction():
    N, gamma, nu = 7, 0.3, 0.02
    doc = corpus.build("wave-fd", {"ncells": N, "gamma": gamma, "nu": nu})
    s = load_system(doc)
    z = sample_points(s, 1, seed=3)[0]
    d = decompose(s, z)
    want = _oracle_velocity_block(N, 1.0 / N, gamma, nu, np.ones(N - 1))
    assert np.max(np.abs(d.R[N:, N:] - want)) <= 1e-9 * np.max(np.abs(want))
    assert np.max(np.abs(d.R[:N, :])) == 0.0
    assert d.residuals["psd"] >= -1e-10


def test_wave_R_block_nonlinear_friction_with_series_switch():
    N, gamma = 5, 0.5
    friction = "v + v^3"
    doc = corpus.build("wave-fd", {"ncells": N, "gamma": gamma, "nu": 0.0, "friction": friction})
    s = load_system(doc)
    z = np.array([1.0] * N + [0.3, 0.0, -0.2, 1e-12])
    d = decompose(s, z)
    v = z[N:]
    want = _oracle_velocity_block(N, 1.0 / N, gamma, 0.0, 1.0 + v**2)
    assert np.max(np.abs(d.R[N:, N:] - want)) <= 1e-9
    facts = corpus.reference_facts("wave-fd", {"ncells": N, "gamma": gamma, "nu": 0.0, "friction": friction})
    assert np.max(np.abs(d.R - facts["R"](z))) <= 1e-9
    assert np.max(np.abs(d.J - facts["J"](z))) <= 1e-9


def test_friction_ratio_limit():
    assert corpus.friction_ratio("sin(v)", np.array([0.0, 1e-9, 0.5])) == pytest.approx(
        [1.0, 1.0, np.sin(0.5) / 0.5], rel=1e-15
    )


def test_wave_facts_random_samples():
    rng = np.random.default_rng(31)
    for _ in range(10):
        params = {
            "ncells": int(rng.integers(2, 8)),
            "gamma": float(rng.uniform(0, 1)),
            "nu": float(rng.uniform(0, 0.1)),
            "c": float(rng.uniform(0.5, 2)),
        }
        s = load_system(corpus.build("wave-fd", params))
        facts = corpus.reference_facts("wave-fd", params)
        for z in sample_points(s, 10, seed=int(rng.integers(1000))):
            d = decompose(s, z)
            scale = 1 + np.max(np.abs(facts["J"](z)))
            assert np.max(np.abs(d.J - facts["J"](z))) <= 1e-9 * scale
            assert np.max(np.abs(d.R - facts["R"](z))) <= 1e-9 * scale


def test_lossless_wave_conserves_energy():
    doc = corpus.build("wave-fd", {"ncells": 8, "gamma": 0.0, "nu": 0.0})
    s = load_system(doc)
    tr = simulate(s, doc["z0"], None, 10.0, IntegratorConfig(0.02))
    assert tr.failed_at is None
    assert np.max(np.abs(tr.energies - tr.energies[0])) <= 1e-9


@pytest.mark.parametrize("law", ["linear", "gamma-law"])
def test_wave_audit_passes_in_box(law):
    s = load_system(corpus.build("wave-fd", {"ncells": 6, "law": law}))
    rep = audit(s, sample_points(s, 200, seed=2))
    assert rep.passed, rep.failing()


def test_gamma_law_domain_outside_box():
    s = load_system(corpus.build("wave-fd", {"ncells": 3, "law": "gamma-law"}))
    z = np.array([-0.5, 1.0, 1.0, 0.0, 0.0])
    rep = audit(s, [z])
    assert not rep.flags["evaluable"]


def test_wave_ports():
    N = 4
    s = load_system(corpus.build("wave-fd", {"ncells": N, "c": 2.0}))
    z = np.array([1.0, 1.1, 1.2, 1.3, 0.0, 0.0, 0.0])
    # y = (p(rho_1), -p(rho_N)) with p = c^2 rho
    assert s.output(z) == pytest.approx([4.0, -5.2], rel=1e-14)


@pytest.mark.parametrize(
    "params",
    [{"ncells": 1}, {"law": "cubic"}, {"c": 0.0}, {"law": "gamma-law", "kappa": -1.0}, {"gamma": -0.1}, {"length": 0.0}],
)
def test_wave_invalid_parameters(params):
    with pytest.raises(CorpusError):
        corpus.build("wave-fd", params)


# --------------------------------------------------------------------------
# registry


@pytest.mark.parametrize("cid", sorted(corpus.CORPUS))
def test_documents_are_json_and_load(cid):
    doc = corpus.build(cid)
    text = json.dumps(doc)
    s = load_system(text)
    rep = audit(s, sample_points(s, 50, seed=0))
    assert rep.passed, rep.failing()


def test_parse_param_forms():
    assert corpus.parse_param("linear-kq", "K=0,1;-1,-1") == ("K", [[0.0, 1.0], [-1.0, -1.0]])
    assert corpus.parse_param("wave-fd", "ncells=12") == ("ncells", 12)
    assert corpus.parse_param("wave-fd", "law=gamma-law") == ("law", "gamma-law")
    assert corpus.parse_param("rigid-body", "I2=2.5") == ("I2", 2.5)


@pytest.mark.parametrize("text", ["I4=1", "I1", "I1=abc"])
def test_parse_param_errors(text):
    with pytest.raises(CorpusError):
        corpus.parse_param("rigid-body", text)


def test_unknown_corpus_id():
    with pytest.raises(CorpusError):
        corpus.build("pendulum")


def test_builders_are_pure():
    assert corpus.build("wave-fd") == corpus.build("wave-fd")
