import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import cholesky

from darcyinv.darcy import ForwardModel, Stencil, assemble_system, dirichlet_values, solve_pressure
from darcyinv.errors import DimensionMismatch, NonPositivePermeability
from darcyinv.grid import BoundaryConditions, build_grid, linear_profile_boundary, sample_observation_nodes


def observed_direct(ctx, coeffs):
    """Independent route: hand-built log-k, assemble, solve, pick monitors."""
    b = ctx.basis
    log_k = b.mean_log_k + b.eigenvectors @ (np.sqrt(b.eigenvalues) * coeffs)
    system = assemble_system(ctx.grid, np.exp(log_k), ctx.bc)
    return solve_pressure(system).p[ctx.obs_nodes]


def test_homogeneous_stencil_row():
    g = build_grid(5, 5, 4, 4)
    s = assemble_system(g, np.ones(g.n_nodes), BoundaryConditions(0, 0, 0, 0))
    a = s.matrix.toarray()
    centre = list(s.interior).index(g.idx(2, 2))
    row = a[centre]
    assert row[centre] == 4.0
    assert sorted(row[row != 0].tolist()) == [-1.0, -1.0, -1.0, -1.0, 4.0]


def test_harmonic_barrier():
    g = build_grid(4, 3, 3, 2)
    st_ = Stencil(g, dirichlet_values(g, BoundaryConditions()))
    k = np.ones(g.n_nodes)
    k[g.idx(1, 1)] = 1e-12
    t, _, _ = st_.transmissibility(k)
    touching = (st_.ea == g.idx(1, 1)) | (st_.eb == g.idx(1, 1))
    assert np.all(t[touching] < 1e-11)
    assert np.all(t[~touching] == 1.0)


def test_random_field_symmetric_spd(rng):
    g = build_grid(12, 9, 110, 80)
    s = assemble_system(g, np.exp(rng.standard_normal(g.n_nodes)), BoundaryConditions())
    a = s.matrix.toarray()
    assert np.abs(a - a.T).max() == 0.0
    cholesky(a)
    off = np.abs(a - np.diag(np.diag(a))).sum(axis=1)
    assert np.all(off <= np.diag(a) + 1e-12)


# CG stops at a 1e-10 relative residual, so its error bound is looser
@pytest.mark.parametrize("solver, tol", [("cholesky", 1e-10), ("cg", 1e-8)])
def test_linear_profile_exact(solver, tol):
    g = build_grid(26, 26, 200, 200)
    bc = linear_profile_boundary(g, 10.0, 0.0)
    p = solve_pressure(assemble_system(g, np.ones(g.n_nodes), bc), solver=solver).p
    x = g.coordinates()[:, 0]
    assert np.abs(p - 10.0 * (1 - x / 200.0)).max() < tol


@given(st.floats(-5, 5), st.integers(0, 10_000))
def test_constant_bc_constant_pressure(c, seed):
    g = build_grid(7, 6, 1, 1)
    k = np.exp(np.random.default_rng(seed).standard_normal(g.n_nodes))
    p = solve_pressure(assemble_system(g, k, BoundaryConditions(c, c, c, c))).p
    assert np.allclose(p, c, atol=1e-10 * max(1, abs(c)))


def test_table2_homogeneous_max_principle():
    g = build_grid(51, 51, 200, 200)
    p = solve_pressure(assemble_system(g, np.ones(g.n_nodes), BoundaryConditions())).p
    assert p.max() == 10.0 and p.min() == 0.0
    inner = p[~g.is_boundary()]
    assert inner.min() >= 0.0 and inner.max() <= 10.0


def test_rejects_bad_permeability(desk_grid):
    k = np.ones(desk_grid.n_nodes)
    k[3] = 0.0
    with pytest.raises(NonPositivePermeability):
        assemble_system(desk_grid, k, BoundaryConditions())
    with pytest.raises(DimensionMismatch):
        assemble_system(desk_grid, np.ones(5), BoundaryConditions())


def test_cg_matches_cholesky(desk_grid, rng):
    s = assemble_system(desk_grid, np.exp(rng.standard_normal(desk_grid.n_nodes)), BoundaryConditions())
    a = solve_pressure(s, solver="cholesky").p
    b = solve_pressure(s, solver="cg").p
    assert np.abs(a - b).max() < 1e-8


def test_forward_zero_coeffs_is_homogeneous(desk_ctx):
    g = desk_ctx.grid
    hom = solve_pressure(assemble_system(g, np.ones(g.n_nodes), BoundaryConditions())).p
    assert np.allclose(desk_ctx.forward(np.zeros(20)).observed, hom[desk_ctx.obs_nodes], atol=1e-12)


def test_forward_matches_direct_route(desk_ctx, rng):
    k = rng.standard_normal(20)
    assert np.allclose(desk_ctx.forward(k).observed, observed_direct(desk_ctx, k), rtol=0, atol=1e-11)


def test_global_scale_invariance(desk_ctx, rng):
    k = rng.standard_normal(20)
    shifted = ForwardModel(desk_ctx.grid, desk_ctx.basis.with_mean(np.log(10.0)), desk_ctx.bc, desk_ctx.obs)
    assert np.allclose(desk_ctx.forward(k).observed, shifted.forward(k).observed, atol=1e-10)


def test_max_principle_random(desk_ctx, rng):
    p = desk_ctx.pressure_batch(2.0 * rng.standard_normal((50, 20)))
    assert p.min() >= -1e-12 and p.max() <= 10.0 + 1e-12


def test_batch_matches_single(desk_ctx, rng):
    k = rng.standard_normal((4, 20))
    batch = desk_ctx.observe_batch(k)
    for i in range(4):
        assert np.allclose(batch[i], desk_ctx.forward(k[i]).observed, rtol=0, atol=1e-12)


def test_zero_seed_zero_gradient(desk_ctx, rng):
    assert np.all(desk_ctx.adjoint_gradient(rng.standard_normal(20), np.zeros(200)) == 0)


def test_adjoint_against_fd_components(desk_ctx, rng):
    k = rng.standard_normal(20)
    g = rng.standard_normal(200)
    grad = desk_ctx.adjoint_gradient(k, g)
    eps = 1e-5
    fd = np.empty(20)
    for i in range(20):
        e = np.zeros(20)
        e[i] = eps
        fd[i] = (g @ observed_direct(desk_ctx, k + e) - g @ observed_direct(desk_ctx, k - e)) / (2 * eps)
    assert np.abs(grad - fd).max() <= 1e-5 * np.abs(fd).max()


def test_node_gradient_fd(desk_ctx, rng):
    k = rng.standard_normal(20)
    node = desk_ctx.grid.nearest_node(150, 150)
    grad = desk_ctx.node_gradient(k, node)
    d = rng.standard_normal(20)
    eps = 1e-5
    fd = (desk_ctx.pressure_batch(k + eps * d)[0, node] - desk_ctx.pressure_batch(k - eps * d)[0, node]) / (2 * eps)
    assert grad @ d == pytest.approx(fd, rel=1e-5)


def test_mirror_symmetry():
    # symmetric bc (left = right) and a mirror-symmetric monitor pair: the
    # homogeneous-state gradient of p(a) + p(b) sees only even modes
    g = build_grid(11, 11, 100, 100)
    from darcyinv.random_field import CovarianceSpec, build_kl_basis
    from darcyinv.grid import ObservationSet

    basis = build_kl_basis(g, CovarianceSpec(1.0, 40.0), 6)
    obs = ObservationSet(np.array([g.idx(3, 4), g.idx(7, 4)]), 0)
    ctx = ForwardModel(g, basis, BoundaryConditions(5, 5, 0, 0), obs)
    grad = ctx.adjoint_gradient(np.zeros(6), np.ones(2))
    single_a = ctx.adjoint_gradient(np.zeros(6), np.array([1.0, 0.0]))
    single_b = ctx.adjoint_gradient(np.zeros(6), np.array([0.0, 1.0]))
    phi = basis.eigenvectors.reshape(11, 11, 6)
    checked = 0
    for i in range(6):
        # degenerate pairs on a square can mix; only pure-parity modes are checked
        even = np.allclose(phi[:, ::-1, i], phi[:, :, i], atol=1e-8)
        odd = np.allclose(phi[:, ::-1, i], -phi[:, :, i], atol=1e-8)
        if odd:
            assert abs(grad[i]) < 1e-10
            assert single_a[i] == pytest.approx(-single_b[i], abs=1e-10)
        if even:
            assert single_a[i] == pytest.approx(single_b[i], abs=1e-10)
        checked += even or odd
    assert checked >= 2


def test_observation_node_must_be_interior(desk_grid, desk_basis):
    from darcyinv.grid import ObservationSet

    with pytest.raises(DimensionMismatch):
        ForwardModel(desk_grid, desk_basis, BoundaryConditions(), ObservationSet(np.array([0]), 0))
    obs = sample_observation_nodes(desk_grid, 5, 0)
    ctx = ForwardModel(desk_grid, desk_basis, BoundaryConditions(), obs)
    with pytest.raises(DimensionMismatch):
        ctx.forward(np.zeros(3))
