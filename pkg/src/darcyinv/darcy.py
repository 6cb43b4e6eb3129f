"""Steady Darcy flow on the node lattice and its discrete adjoint.

Interior node ``a`` satisfies ``sum_b T_ab (p_a - p_b) = q_a`` over its four
neighbours, with the edge transmissibility ``T_ab`` the harmonic mean of the
two nodal permeabilities divided by the squared spacing. Dirichlet neighbours
move to the right-hand side. Unknowns are the interior nodes in linear-index
order, so the operator is banded with half-bandwidth ``nx - 2`` and is
factorised with LAPACK's banded Cholesky.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded

from .errors import DimensionMismatch, NonPositivePermeability, SolverDivergence
from .grid import BoundaryConditions, GridSpec, ObservationSet, boundary_mask
from .random_field import KLBasis, PermeabilityField, realize_log_permeability

log = logging.getLogger(__name__)

RESIDUAL_RTOL = 1e-10
# Above this many unknowns the "auto" solver switches to Jacobi-preconditioned CG.
MAX_BANDED_UNKNOWNS = 20_000
LOG_K_CLIP = 30.0


def dirichlet_values(grid: GridSpec, bc) -> np.ndarray:
    """Per-node Dirichlet data from a :class:`BoundaryConditions` or an explicit array."""
    if isinstance(bc, BoundaryConditions):
        return boundary_mask(grid, bc)
    vals = np.asarray(bc, dtype=float)
    if vals.shape != (grid.n_nodes,):
        raise DimensionMismatch(f"boundary values need shape ({grid.n_nodes},), got {vals.shape}")
    on_boundary = grid.is_boundary()
    if np.any(np.isnan(vals[on_boundary])) or np.any(~np.isnan(vals[~on_boundary])):
        raise DimensionMismatch("boundary values must be set exactly on the boundary nodes")
    return vals


class Stencil:
    """Index bookkeeping for assembling the five-point operator on one grid.

    Everything that maps edge quantities onto unknowns or nodes is stored as a
    sparse ``(n, n_edges)`` matrix so a whole batch is assembled with one product.
    """

    def __init__(self, grid: GridSpec, dirichlet: np.ndarray):
        self.grid = grid
        self.dirichlet = np.asarray(dirichlet, dtype=float)
        nx, ny = grid.nx, grid.ny
        node = np.arange(grid.n_nodes).reshape(ny, nx)

        ea = np.concatenate([node[:, :-1].ravel(), node[:-1, :].ravel()])
        eb = np.concatenate([node[:, 1:].ravel(), node[1:, :].ravel()])
        inv_h2 = np.concatenate([
            np.full(ny * (nx - 1), 1.0 / grid.dx**2),
            np.full((ny - 1) * nx, 1.0 / grid.dy**2),
        ])
        self.ea, self.eb, self.inv_h2 = ea, eb, inv_h2
        n_edges = len(ea)
        n_nodes = grid.n_nodes

        self.interior = grid.interior_nodes()
        self.n = n = len(self.interior)
        self.bandwidth = nx - 2
        unknown = np.full(n_nodes, -1)
        unknown[self.interior] = np.arange(n)
        self.unknown = unknown
        ua, ub = unknown[ea], unknown[eb]

        def incidence(rows, cols, vals, ncols):
            # stored transposed: (ncols, n_edges), applied as M @ edge_values.T
            return sp.csr_matrix((vals, (cols, rows)), shape=(ncols, n_edges))

        sa, sb = np.flatnonzero(ua >= 0), np.flatnonzero(ub >= 0)
        self.to_diag = incidence(
            np.concatenate([sa, sb]), np.concatenate([ua[sa], ub[sb]]),
            np.ones(len(sa) + len(sb)), n,
        )
        ra = np.flatnonzero((ua >= 0) & (ub < 0))
        rb = np.flatnonzero((ub >= 0) & (ua < 0))
        pd = self.dirichlet
        self.to_rhs = incidence(
            np.concatenate([ra, rb]), np.concatenate([ua[ra], ub[rb]]),
            np.concatenate([pd[eb[ra]], pd[ea[rb]]]), n,
        )
        self.node_a = incidence(np.arange(n_edges), ea, np.ones(n_edges), n_nodes)
        self.node_b = incidence(np.arange(n_edges), eb, np.ones(n_edges), n_nodes)

        both = (ua >= 0) & (ub >= 0)
        self.off = np.flatnonzero(both)
        lo = np.minimum(ua[both], ub[both])
        hi = np.maximum(ua[both], ub[both])
        self.off_rows, self.off_cols = lo, hi
        # flat position of A[lo, hi] in LAPACK upper banded storage (bandwidth+1, n)
        self.off_flat = (self.bandwidth + lo - hi) * n + hi
        self.diag_flat = self.bandwidth * n + np.arange(n)

    def transmissibility(self, k: np.ndarray):
        """Harmonic-mean edge transmissibility and its partials wrt each endpoint."""
        ka, kb = k[..., self.ea], k[..., self.eb]
        s = ka + kb
        t = 2.0 * ka * kb / s * self.inv_h2
        w = 2.0 * self.inv_h2 / s**2
        return t, w * kb**2, w * ka**2

    def diagonal(self, t: np.ndarray) -> np.ndarray:
        return (self.to_diag @ t.T).T

    def rhs(self, t: np.ndarray) -> np.ndarray:
        return (self.to_rhs @ t.T).T

    def banded(self, t: np.ndarray) -> np.ndarray:
        """Upper banded storage; ``t`` of shape ``(n_edges,)`` or ``(batch, n_edges)``."""
        lead = t.shape[:-1]
        ab = np.zeros(lead + ((self.bandwidth + 1) * self.n,))
        ab[..., self.diag_flat] = self.diagonal(t)
        ab[..., self.off_flat] = -t[..., self.off]
        return ab.reshape(lead + (self.bandwidth + 1, self.n))

    def sparse(self, t: np.ndarray) -> sp.csr_matrix:
        rows = np.concatenate([np.arange(self.n), self.off_rows, self.off_cols])
        cols = np.concatenate([np.arange(self.n), self.off_cols, self.off_rows])
        vals = np.concatenate([self.diagonal(t), -t[self.off], -t[self.off]])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))

    def scatter_edges(self, ga: np.ndarray, gb: np.ndarray) -> np.ndarray:
        """Sum per-edge contributions onto their endpoint nodes."""
        return (self.node_a @ ga.T + self.node_b @ gb.T).T

    def full_field(self, interior_values: np.ndarray, fill) -> np.ndarray:
        out = np.empty(interior_values.shape[:-1] + (self.grid.n_nodes,))
        out[...] = fill
        out[..., self.interior] = interior_values
        return out


@dataclass
class LinearSystem:
    """Interior-node operator ``A`` and right-hand side ``b`` for one field."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    interior: np.ndarray
    banded: np.ndarray
    dirichlet: np.ndarray
    transmissibility: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class PressureField:
    p: np.ndarray


def _pcg(a: sp.csr_matrix, b: np.ndarray) -> np.ndarray:
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    m = sp.diags(1.0 / a.diagonal())
    x, info = spla.cg(a, b, rtol=RESIDUAL_RTOL, atol=0.0, M=m, maxiter=20 * len(b))
    res = np.linalg.norm(a @ x - b)
    if info != 0 or res > 10 * RESIDUAL_RTOL * bnorm:
        raise SolverDivergence(f"CG stopped with relative residual {res / bnorm:.3e}", residual=res)
    return x


class _Factor:
    """Reusable solver for one operator: banded Cholesky, else Jacobi-PCG."""

    def __init__(self, banded: np.ndarray, stencil: Stencil, t: np.ndarray, method: str):
        self._chol = None
        self._stencil = stencil
        self._t = t
        if method == "cholesky":
            try:
                self._chol = cholesky_banded(banded, lower=False, check_finite=False)
            except LinAlgError:
                log.warning("banded Cholesky failed; falling back to conjugate gradients")

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self._chol is not None:
            return cho_solve_banded((self._chol, False), b, check_finite=False)
        return _pcg(self._stencil.sparse(self._t), b)


def _choose_method(solver: str, n: int) -> str:
    if solver == "auto":
        return "cholesky" if n <= MAX_BANDED_UNKNOWNS else "cg"
    if solver not in ("cholesky", "cg"):
        raise ValueError(f"unknown solver {solver!r}")
    return solver


def assemble_system(grid: GridSpec, field: PermeabilityField | np.ndarray, bc, q=None) -> LinearSystem:
    """Assemble ``A p = b`` for the interior nodes.

    ``field`` is a :class:`PermeabilityField` or a per-node permeability array;
    ``bc`` is a :class:`BoundaryConditions` or a per-node Dirichlet array (NaN
    inside). ``q`` is an optional per-node source, zero by default.
    """
    k = field.k if isinstance(field, PermeabilityField) else np.asarray(field, dtype=float)
    if k.shape != (grid.n_nodes,):
        raise DimensionMismatch(f"permeability needs shape ({grid.n_nodes},), got {k.shape}")
    if not np.all(np.isfinite(k)) or np.any(k <= 0):
        raise NonPositivePermeability("permeability must be finite and strictly positive")
    stencil = Stencil(grid, dirichlet_values(grid, bc))
    t, _, _ = stencil.transmissibility(k)
    b = stencil.rhs(t)
    if q is not None:
        b = b - np.asarray(q, dtype=float)[stencil.interior]
    return LinearSystem(
        matrix=stencil.sparse(t),
        rhs=b,
        interior=stencil.interior,
        banded=stencil.banded(t),
        dirichlet=stencil.dirichlet,
        transmissibility=t,
    )


def solve_pressure(system: LinearSystem, grid: GridSpec | None = None, bc=None, solver: str = "auto") -> PressureField:
    """Solve an assembled system; returns the full nodal pressure.

    ``grid`` and ``bc`` are accepted for symmetry with :func:`assemble_system`;
    the system already carries the Dirichlet data.
    """
    b = system.rhs
    if _choose_method(solver, len(b)) == "cholesky":
        try:
            chol = cholesky_banded(system.banded, lower=False, check_finite=False)
            x = cho_solve_banded((chol, False), b, check_finite=False)
        except LinAlgError:
            log.warning("banded Cholesky failed; falling back to conjugate gradients")
            x = _pcg(system.matrix, b)
    else:
        x = _pcg(system.matrix, b)
    res = np.linalg.norm(system.matrix @ x - b)
    scale = max(np.linalg.norm(b), np.finfo(float).tiny)
    if not np.isfinite(res) or res > RESIDUAL_RTOL * scale:
        raise SolverDivergence(f"linear solve residual {res:.3e} exceeds tolerance", residual=res)
    p = system.dirichlet.copy()
    p[system.interior] = x
    return PressureField(p)


@dataclass
class BatchState:
    """Forward solutions for a batch, kept for adjoint reuse."""

    log_k: np.ndarray
    k: np.ndarray
    pressure: np.ndarray
    factors: list = field(repr=False)
    dta: np.ndarray = field(repr=False)
    dtb: np.ndarray = field(repr=False)


@dataclass
class ForwardResult:
    pressure: PressureField
    observed: np.ndarray
    log_k: np.ndarray = field(repr=False)
    state: BatchState | None = field(default=None, repr=False)


class ForwardModel:
    """Coefficient-to-observation map with exact discrete-adjoint gradients.

    Bundles grid, KL basis, boundary data and monitoring nodes. Methods are
    pure; factorisations live only inside the returned states.
    """

    def __init__(self, grid: GridSpec, basis: KLBasis, bc, obs: ObservationSet, solver: str = "auto"):
        if basis.n_nodes != grid.n_nodes:
            raise DimensionMismatch("basis and grid disagree on node count")
        self.grid = grid
        self.basis = basis
        self.bc = bc
        self.obs = obs
        self.stencil = Stencil(grid, dirichlet_values(grid, bc))
        self.method = _choose_method(solver, self.stencil.n)
        obs_unknown = self.stencil.unknown[obs.node_indices]
        if np.any(obs_unknown < 0):
            raise DimensionMismatch("observation nodes must be interior")
        self.obs_nodes = np.asarray(obs.node_indices)

    @property
    def n_modes(self) -> int:
        return self.basis.n_modes

    @property
    def n_obs(self) -> int:
        return self.obs.n_obs

    def log_k(self, coeffs) -> np.ndarray:
        return realize_log_permeability(self.basis, coeffs).log_k

    def solve_batch(self, coeffs) -> BatchState:
        """Solve for every row of a ``(batch, n_modes)`` coefficient array."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.ndim != 2 or coeffs.shape[1] != self.n_modes:
            raise DimensionMismatch(f"expected (batch, {self.n_modes}) coefficients, got {coeffs.shape}")
        st = self.stencil
        log_k = self.log_k(coeffs)
        k = np.exp(np.clip(log_k, -LOG_K_CLIP, LOG_K_CLIP))
        t, dta, dtb = st.transmissibility(k)
        bands = st.banded(t)
        rhs = st.rhs(t)
        factors = []
        x = np.empty_like(rhs)
        for i in range(len(coeffs)):
            f = _Factor(bands[i], st, t[i], self.method)
            x[i] = f.solve(rhs[i])
            factors.append(f)
        if not np.all(np.isfinite(x)):
            raise SolverDivergence("non-finite pressure solution")
        return BatchState(log_k, k, st.full_field(x, st.dirichlet), factors, dta, dtb)

    def gradient_batch(self, state: BatchState, seeds: np.ndarray) -> np.ndarray:
        """Pull back nodal pressure sensitivities ``dL/dp`` to ``dL/dcoeffs``.

        ``seeds`` has shape ``(batch, n_nodes)``; entries on Dirichlet nodes are
        ignored. Solves ``A lam = seed`` with the forward factor (A symmetric),
        then ``dL/dT_e = -(lam_a - lam_b)(p_a - p_b)`` with ``lam = 0`` on the
        boundary, chained through the harmonic mean, ``dk/dlogk = k`` and the KL
        map.
        """
        st = self.stencil
        seeds = np.asarray(seeds, dtype=float)[:, st.interior]
        lam = np.empty_like(seeds)
        for i, f in enumerate(state.factors):
            lam[i] = f.solve(seeds[i])
        lam = st.full_field(lam, 0.0)
        p = state.pressure
        g_t = -(lam[:, st.ea] - lam[:, st.eb]) * (p[:, st.ea] - p[:, st.eb])
        g_logk = st.scatter_edges(g_t * state.dta, g_t * state.dtb) * state.k
        g_logk[np.abs(state.log_k) > LOG_K_CLIP] = 0.0
        return g_logk @ self.basis.scaled_modes

    def observe_batch(self, coeffs) -> np.ndarray:
        return self.solve_batch(np.atleast_2d(coeffs)).pressure[:, self.obs_nodes]

    def pressure_batch(self, coeffs) -> np.ndarray:
        return self.solve_batch(np.atleast_2d(coeffs)).pressure

    def obs_seeds(self, grad_wrt_observed: np.ndarray) -> np.ndarray:
        g = np.atleast_2d(np.asarray(grad_wrt_observed, dtype=float))
        if g.shape[1] != self.n_obs:
            raise DimensionMismatch(f"expected {self.n_obs} observation gradients, got {g.shape[1]}")
        seeds = np.zeros((len(g), self.grid.n_nodes))
        seeds[:, self.obs_nodes] = g
        return seeds

    def forward(self, coeffs) -> ForwardResult:
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.n_modes,):
            raise DimensionMismatch(f"expected {self.n_modes} coefficients, got {coeffs.shape}")
        state = self.solve_batch(coeffs[None])
        p = state.pressure[0]
        return ForwardResult(PressureField(p), p[self.obs_nodes], state.log_k[0], state)

    def adjoint_gradient(self, coeffs, grad_wrt_observed, result: ForwardResult | None = None) -> np.ndarray:
        if result is None:
            result = self.forward(coeffs)
        return self.gradient_batch(result.state, self.obs_seeds(grad_wrt_observed))[0]

    def node_gradient(self, coeffs, node: int, result: ForwardResult | None = None) -> np.ndarray:
        """Gradient of the pressure at one interior node."""
        if self.stencil.unknown[node] < 0:
            raise DimensionMismatch(f"node {node} is a Dirichlet node")
        if result is None:
            result = self.forward(coeffs)
        seeds = np.zeros((1, self.grid.n_nodes))
        seeds[0, node] = 1.0
        return self.gradient_batch(result.state, seeds)[0]


def forward(coeffs, ctx: ForwardModel) -> ForwardResult:
    return ctx.forward(coeffs)


def adjoint_gradient(coeffs, grad_wrt_observed, ctx: ForwardModel) -> np.ndarray:
    return ctx.adjoint_gradient(coeffs, grad_wrt_observed)
