import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import eigh

from darcyinv.errors import FormatError, MemoryBudgetError
from darcyinv.grid import build_grid
from darcyinv.random_field import (
    CovarianceSpec,
    build_kl_basis,
    compute_kl_basis,
    covariance_matrix,
    load_basis,
    realize_log_permeability,
    sample_coefficients,
    save_basis,
)

EXP_MINUS_ONE = 0.36787944117144233


def test_kernel_values():
    c = CovarianceSpec(1.0, 100.0)
    assert c(0.0) == 1.0
    assert c(100.0) == pytest.approx(EXP_MINUS_ONE, abs=1e-15)


def test_small_covariance_psd():
    cov = covariance_matrix(build_grid(3, 3, 20, 20), CovarianceSpec(1.0, 10.0))
    assert cov.shape == (9, 9)
    assert np.linalg.eigvalsh(cov).min() >= -1e-10


def test_covariance_budget():
    with pytest.raises(MemoryBudgetError):
        covariance_matrix(build_grid(70, 70, 1, 1), CovarianceSpec(), max_nodes=4096)


def test_identity_basis():
    b = compute_kl_basis(np.eye(5), 3)
    assert np.allclose(b.eigenvalues, 1.0)
    v = b.eigenvectors
    assert np.allclose(v.T @ v, np.eye(3), atol=1e-12)
    for i in range(3):
        assert v[np.argmax(np.abs(v[:, i])), i] > 0


def test_rank_one_basis():
    v = np.array([2.0, -6.0, 3.0])
    b = compute_kl_basis(np.outer(v, v), 1)
    assert b.eigenvalues[0] == pytest.approx(49.0)
    # sign rule: largest |entry| positive, so phi = -v/|v|
    assert np.allclose(b.eigenvectors[:, 0], -v / 7.0)


def test_desk_basis_properties(desk_grid, desk_basis):
    lam, phi = desk_basis.eigenvalues, desk_basis.eigenvectors
    assert np.all(np.diff(lam) <= 0) and lam[-1] > 0
    assert np.abs(phi.T @ phi - np.eye(20)).max() < 1e-8
    cov = covariance_matrix(desk_grid, CovarianceSpec(1.0, 100.0))
    resid = np.linalg.norm(cov @ phi - phi * lam, axis=0)
    assert resid.max() <= 1e-8 * np.linalg.norm(cov, 2)


def test_energy_fraction_51():
    # oracle: full spectrum of the same covariance, summed independently
    g = build_grid(51, 51, 200, 200)
    cov = covariance_matrix(g, CovarianceSpec(1.0, 100.0))
    full = eigh(cov, eigvals_only=True)
    retained = np.sort(full)[::-1][:200].sum() / full.sum()
    b = compute_kl_basis(cov, 200)
    assert b.energy_fraction == pytest.approx(retained, rel=1e-10)
    assert b.energy_fraction > 0.95


def test_realize_definitions(desk_basis):
    assert np.all(realize_log_permeability(desk_basis, np.zeros(20)).log_k == 0.0)
    e1 = np.zeros(20)
    e1[0] = 1.0
    f = realize_log_permeability(desk_basis, e1).log_k
    assert np.allclose(f, np.sqrt(desk_basis.eigenvalues[0]) * desk_basis.eigenvectors[:, 0])
    shifted = desk_basis.with_mean(1.5)
    assert np.allclose(realize_log_permeability(shifted, e1).log_k, 1.5 + f)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_realize_linear(a, b, seed):
    g = build_grid(6, 6, 1, 1)
    basis = build_kl_basis(g, CovarianceSpec(1.0, 0.5), 5)
    r = np.random.default_rng(seed)
    k1, k2 = r.standard_normal(5), r.standard_normal(5)
    lhs = realize_log_permeability(basis, a * k1 + b * k2).log_k
    rhs = a * realize_log_permeability(basis, k1).log_k + b * realize_log_permeability(basis, k2).log_k
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_sample_coefficients_stats():
    r = np.random.default_rng(0)
    assert np.array_equal(sample_coefficients(5, np.random.default_rng(3)),
                          sample_coefficients(5, np.random.default_rng(3)))
    k1 = sample_coefficients(200, r, size=100_000)[:, 0]
    assert abs(k1.mean()) < 0.02 and abs(k1.var() - 1) < 0.05
    assert sample_coefficients(200, r).shape == (200,)


def test_field_variance_trace(desk_basis):
    r = np.random.default_rng(1)
    f = realize_log_permeability(desk_basis, r.standard_normal((10_000, 20))).log_k
    expected = desk_basis.eigenvalues.sum() / desk_basis.n_nodes
    assert np.mean(f.var(axis=0)) == pytest.approx(expected, rel=0.05)


def test_basis_file_roundtrip(tmp_path, desk_basis):
    p = tmp_path / "b.klb"
    save_basis(desk_basis, p)
    again = load_basis(p)
    assert np.array_equal(again.eigenvalues, desk_basis.eigenvalues)
    assert np.array_equal(again.eigenvectors, desk_basis.eigenvectors)
    q = tmp_path / "c.klb"
    save_basis(again, q)
    assert p.read_bytes() == q.read_bytes()
    q.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_basis(q)
