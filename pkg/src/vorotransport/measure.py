"""Finite atomic measures standing in for a bounded domain with a density."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class EmptyMeasureError(ValueError):
    """Raised when a density has no strictly positive cell."""


class InvalidDensityError(ValueError):
    """Raised for negative or non-finite density values."""


@dataclass(frozen=True)
class GridInfo:
    """Provenance of a measure built from a regular 2-D raster.

    ``cells[k]`` holds the ``(row, col)`` of atom ``k``; row 0 is the lowest y.
    """

    shape: tuple[int, int]
    cell_size: float
    origin: tuple[float, float]
    cells: np.ndarray

    def centers(self) -> np.ndarray:
        """Centers of every raster cell, shape ``(rows * cols, 2)`` in row-major order."""
        rows, cols = self.shape
        x = self.origin[0] + (np.arange(cols) + 0.5) * self.cell_size
        y = self.origin[1] + (np.arange(rows) + 0.5) * self.cell_size
        xx, yy = np.meshgrid(x, y)
        return np.column_stack([xx.ravel(), yy.ravel()])


@dataclass(frozen=True)
class AtomicMeasure:
    """Point atoms with positive masses.

    Arrays are frozen after construction so a measure can be shared freely.
    ``connected`` records whether the underlying domain is pathwise connected
    (``None`` when unknown).
    """

    positions: np.ndarray
    masses: np.ndarray
    connected: bool | None = None
    grid: GridInfo | None = None
    total_mass: float = field(init=False)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        w = np.array(self.masses, dtype=float).ravel()
        if pos.ndim != 2 or pos.shape[0] != w.shape[0]:
            raise ValueError("positions and masses disagree in length")
        if w.size == 0:
            raise EmptyMeasureError("empty measure")
        if not np.all(np.isfinite(pos)):
            raise ValueError("atom positions must be finite")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise InvalidDensityError("invalid density: atom masses must be finite and > 0")
        pos.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "masses", w)
        object.__setattr__(self, "total_mass", math.fsum(w))

    @property
    def dimension(self) -> int:
        return self.positions.shape[1]

    def __len__(self) -> int:
        return self.masses.shape[0]


def from_grid(density_grid, cell_size: float, origin=(0.0, 0.0), connected: bool | None = None) -> AtomicMeasure:
    """One atom per strictly positive cell, at the cell center, with mass ``density * cell_size**2``.

    ``density_grid[r][c]`` covers ``[ox + c*h, ox + (c+1)*h] x [oy + r*h, oy + (r+1)*h]``.
    When ``connected`` is not given it is inferred from edge-adjacency of the
    positive cells.
    """
    grid = np.array(density_grid, dtype=float)
    if grid.ndim != 2:
        raise InvalidDensityError("invalid density: grid must be 2-D")
    if not np.all(np.isfinite(grid)) or np.any(grid < 0):
        raise InvalidDensityError("invalid density: values must be finite and nonnegative")
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    rows, cols = np.nonzero(grid > 0)
    if rows.size == 0:
        raise EmptyMeasureError("empty measure")
    ox, oy = float(origin[0]), float(origin[1])
    h = float(cell_size)
    pos = np.column_stack([ox + (cols + 0.5) * h, oy + (rows + 0.5) * h])
    masses = grid[rows, cols] * h * h
    if connected is None:
        _, ncomp = ndimage.label(grid > 0)
        connected = ncomp == 1
    info = GridInfo(shape=grid.shape, cell_size=h, origin=(ox, oy), cells=np.column_stack([rows, cols]))
    return AtomicMeasure(pos, masses, connected=connected, grid=info)


def uniform_grid(k: int, extent: float = 1.0, origin=(0.0, 0.0)) -> AtomicMeasure:
    """Uniform density on a ``k x k`` raster covering ``[0, extent]^2`` (shifted by ``origin``)."""
    return from_grid(np.ones((k, k)), extent / k, origin)


def normalize(m: AtomicMeasure) -> AtomicMeasure:
    """Rescale masses to total 1; positions and metadata unchanged."""
    if not m.total_mass > 0:
        raise ValueError("cannot normalize a measure with zero mass")
    return AtomicMeasure(m.positions, m.masses / m.total_mass, connected=m.connected, grid=m.grid)


def scaled(m: AtomicMeasure, factor: float) -> AtomicMeasure:
    return AtomicMeasure(m.positions, m.masses * factor, connected=m.connected, grid=m.grid)
