"""Exact finite-chain reference computations."""
import numpy as np
import pytest

from kickflow.errors import ChainFormatError, DegeneracyError
from kickflow.oracle import (
    FiniteChain,
    bundled_five_state,
    eigen_deviation_curve,
    exact_eigen_triple,
    exact_fk_apply,
    exact_Q,
    exact_rate_function,
    load_chain,
    save_chain,
    two_state_rate_at_point_mass,
)
from kickflow.streams import substream


def two_state(p=0.8):
    return FiniteChain.from_matrix([[p, 1 - p], [1 - p, p]])


def test_chain_validation_rejects_bad_matrices():
    with pytest.raises(ChainFormatError):
        FiniteChain.from_matrix(np.ones((2, 3)))
    with pytest.raises(ChainFormatError):
        FiniteChain.from_matrix([[0.5, 0.5], [-0.1, 1.1]])
    with pytest.raises(ChainFormatError):
        FiniteChain.from_matrix([[0.6, 0.3], [0.5, 0.5]])  # row sum 0.9
    with pytest.raises(ChainFormatError):
        FiniteChain(P=np.eye(2), coords=np.zeros((3, 1)))
    with pytest.raises(ChainFormatError):
        FiniteChain.from_matrix(np.eye(2), potential=np.zeros(3))


def test_reducible_chain_detected():
    P = np.array([[1.0, 0.0], [0.5, 0.5]])
    with pytest.raises(ChainFormatError):
        FiniteChain.from_matrix(P)
    c = FiniteChain.from_matrix(P, require_irreducible=False)
    assert c.size == 2


def test_fk_apply_matches_matrix_power():
    c = bundled_five_state()
    V = c.potential
    f = np.linspace(-1.0, 1.0, 5)
    assert np.array_equal(exact_fk_apply(c, V, f, 0), f)
    M = c.P * np.exp(V)[None, :]
    want = M @ (M @ f)
    got = exact_fk_apply(c, V, f, 2)
    assert np.allclose(got, want, rtol=1e-14, atol=0.0)
    with pytest.raises(ChainFormatError):
        exact_fk_apply(c, V, f, -1)
    with pytest.raises(ChainFormatError):
        exact_fk_apply(c, V, np.zeros(3), 1)


def test_eigen_triple_is_a_perron_triple():
    c = bundled_five_state()
    V = c.potential
    lam, h, mu = exact_eigen_triple(c, V)
    M = c.P * np.exp(V)[None, :]
    assert lam > 0
    assert np.all(h > 0)
    assert np.all(mu >= 0) and abs(mu.sum() - 1.0) < 1e-12
    assert abs(float(h @ mu) - 1.0) < 1e-12
    assert np.allclose(M @ h, lam * h, rtol=1e-10, atol=1e-12)
    assert np.allclose(mu @ M, lam * mu, rtol=1e-10, atol=1e-12)


def test_growth_rate_zero_potential_and_constant_shift():
    c = bundled_five_state()
    assert abs(exact_Q(c, np.zeros(5))) < 1e-12
    V = c.potential
    q0 = exact_Q(c, V)
    q1 = exact_Q(c, V + 0.7)
    assert abs((q1 - q0) - 0.7) < 1e-12


def test_eigen_deviation_curve_collapses():
    c = bundled_five_state()
    V = c.potential
    f = np.array([1.0, 0.0, 2.0, -1.0, 0.5])
    curve = eigen_deviation_curve(c, V, f, 40)
    lam, h, mu = exact_eigen_triple(c, V)
    assert curve.shape == (41,)
    assert abs(curve[0] - np.max(np.abs(f - float(f @ mu) * h))) < 1e-12
    assert curve[-1] < 1e-12 * max(1.0, curve[0])
    # geometric decay from some point on
    tail = curve[5:20]
    assert np.all(tail[1:] <= tail[:-1] * 0.95 + 1e-15)


def test_rate_function_vanishes_at_stationary():
    c = bundled_five_state()
    mu = c.stationary()
    grid = np.vstack([np.zeros(5), np.eye(5), -np.eye(5), c.potential])
    val, arg = exact_rate_function(c, mu, grid)
    assert abs(val) < 1e-10
    assert arg == 0  # the zero potential attains the supremum
    with pytest.raises(ChainFormatError):
        exact_rate_function(c, np.array([0.5, 0.5, 0.2, -0.1, -0.1]), grid)


def test_rate_function_positive_off_stationary():
    c = two_state(0.8)
    sigma = np.array([1.0, 0.0])  # point mass
    ts = np.linspace(-1.0, 30.0, 400)
    grid = np.stack([ts, np.zeros_like(ts)], axis=1)
    val, _ = exact_rate_function(c, sigma, grid)
    want = two_state_rate_at_point_mass(0.8)
    assert want == pytest.approx(-np.log(0.8), abs=1e-15)
    assert val <= want + 1e-12
    assert val >= want - 0.05  # grid resolution gap only


def test_two_state_closed_form_validation():
    with pytest.raises(ChainFormatError):
        two_state_rate_at_point_mass(0.0)
    with pytest.raises(ChainFormatError):
        two_state_rate_at_point_mass(1.5)


def test_bundled_chain_has_strong_gap():
    c = bundled_five_state()
    vals = np.sort(np.abs(np.linalg.eigvals(c.P)))[::-1]
    assert abs(vals[0] - 1.0) < 1e-12
    assert vals[1] < 0.2
    assert c.potential is not None


def test_sample_steps_follows_rows():
    c = bundled_five_state()
    rng = substream(123)
    states = np.zeros(4000, dtype=np.int64)
    nxt = c.sample_steps(states, rng)
    freq = np.bincount(nxt, minlength=5) / len(nxt)
    assert np.max(np.abs(freq - c.P[0])) < 0.03


def test_chain_file_round_trip(tmp_path):
    c = bundled_five_state()
    p = tmp_path / "chain.txt"
    save_chain(c, p)
    c2 = load_chain(p)
    assert np.array_equal(c.P, c2.P)
    assert np.array_equal(c.coords, c2.coords)
    assert np.array_equal(c.potential, c2.potential)


def test_chain_file_rejects_garbage(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("just some text\n")
    with pytest.raises(ChainFormatError):
        load_chain(p)
    p2 = tmp_path / "trunc.txt"
    p2.write_text("# finite-chain definition v1\nstates 3\nmatrix\n0.5 0.5\n")
    with pytest.raises(ChainFormatError):
        load_chain(p2)


def test_degenerate_spectrum_raises():
    # permutation chain: eigenvalues on the unit circle, Perron root not simple
    P = np.array([[0.0, 1.0], [1.0, 0.0]])
    c = FiniteChain.from_matrix(P)
    with pytest.raises(DegeneracyError):
        exact_eigen_triple(c, np.zeros(2))
