"""Structured 2D node lattice, Dirichlet boundary data and monitoring nodes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridError, ObservationError


@dataclass(frozen=True)
class GridSpec:
    """Node-centred lattice of ``nx * ny`` nodes covering ``[0, lx] x [0, ly]``.

    Node ``(i, j)`` sits at ``(i * dx, j * dy)`` and has linear index
    ``j * nx + i``.
    """

    nx: int
    ny: int
    lx: float
    ly: float

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise GridError(f"grid needs at least 3x3 nodes, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise GridError(f"domain extents must be positive, got {self.lx}x{self.ly}")

    @property
    def dx(self) -> float:
        return self.lx / (self.nx - 1)

    @property
    def dy(self) -> float:
        return self.ly / (self.ny - 1)

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def n_interior(self) -> int:
        return (self.nx - 2) * (self.ny - 2)

    def idx(self, i, j):
        return np.asarray(j) * self.nx + np.asarray(i)

    def ij(self, index):
        """Inverse of :meth:`idx`."""
        return index % self.nx, index // self.nx

    def coordinates(self) -> np.ndarray:
        """``(n_nodes, 2)`` array of node coordinates in linear-index order."""
        jj, ii = np.meshgrid(np.arange(self.ny), np.arange(self.nx), indexing="ij")
        return np.column_stack([ii.ravel() * self.dx, jj.ravel() * self.dy])

    def is_boundary(self) -> np.ndarray:
        i, j = self.ij(np.arange(self.n_nodes))
        return (i == 0) | (i == self.nx - 1) | (j == 0) | (j == self.ny - 1)

    def interior_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.is_boundary())

    def nearest_node(self, x: float, y: float) -> int:
        i = int(np.clip(round(x / self.dx), 0, self.nx - 1))
        j = int(np.clip(round(y / self.dy), 0, self.ny - 1))
        return int(self.idx(i, j))


def build_grid(nx: int, ny: int, lx: float, ly: float) -> GridSpec:
    return GridSpec(int(nx), int(ny), float(lx), float(ly))


@dataclass(frozen=True)
class BoundaryConditions:
    """Constant Dirichlet pressure (MPa) on each side.

    ``top`` is the ``j = ny - 1`` row, ``bottom`` the ``j = 0`` row. At the four
    corners the left/right values win.
    """

    left: float = 10.0
    right: float = 0.0
    top: float = 0.5
    bottom: float = 0.0

    def __post_init__(self):
        vals = np.array([self.left, self.right, self.top, self.bottom], dtype=float)
        if not np.all(np.isfinite(vals)):
            raise GridError("boundary pressures must be finite")

    @property
    def values(self) -> tuple[float, float, float, float]:
        return (self.left, self.right, self.top, self.bottom)


def boundary_mask(grid: GridSpec, bc: BoundaryConditions) -> np.ndarray:
    """Per-node Dirichlet value; interior nodes hold NaN.

    Top/bottom are written first so left/right overwrite the corners.
    """
    p = np.full((grid.ny, grid.nx), np.nan)
    p[0, :] = bc.bottom
    p[-1, :] = bc.top
    p[:, 0] = bc.left
    p[:, -1] = bc.right
    return p.ravel()


def linear_profile_boundary(grid: GridSpec, p_left: float, p_right: float) -> np.ndarray:
    """Dirichlet data following ``p_left + (p_right - p_left) * x / lx`` on every side."""
    x = grid.coordinates()[:, 0]
    vals = p_left + (p_right - p_left) * x / grid.lx
    vals[~grid.is_boundary()] = np.nan
    return vals


@dataclass(frozen=True)
class ObservationSet:
    node_indices: np.ndarray
    seed: int

    def __post_init__(self):
        idx = np.asarray(self.node_indices, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "node_indices", idx)

    @property
    def n_obs(self) -> int:
        return len(self.node_indices)


def sample_observation_nodes(grid: GridSpec, n_obs: int, seed: int) -> ObservationSet:
    interior = grid.interior_nodes()
    if n_obs < 1 or n_obs > len(interior):
        raise ObservationError(
            f"cannot place {n_obs} observations on {len(interior)} interior nodes"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(interior, size=n_obs, replace=False)
    return ObservationSet(np.sort(chosen), int(seed))
