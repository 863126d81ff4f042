"""Uniform node grids on the unit square/cube, time axes, and discrete norms.

Nodal fields are plain numpy arrays of shape ``grid.shape`` indexed ``[i, j]``
or ``[i, j, k]``.  Whenever a field is flattened (linear systems, CSV files)
the node ordering is x fastest, i.e. ``field.ravel(order="F")``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

NORM_RULES = ("trapezoidal", "nodal")


@dataclass(frozen=True)
class Grid:
    """Tensor-product node grid over [0, 1]^dim with ``n[a]`` cells on axis ``a``."""

    dim: int
    n: tuple[int, ...]

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(1.0 / k for k in self.n)

    @property
    def h(self) -> float:
        """Largest spacing."""
        return max(self.spacing)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(k + 1 for k in self.n)

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(np.arange(k + 1) * d for k, d in zip(self.n, self.spacing))

    @cached_property
    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    def index(self, *ijk: int) -> int:
        """Flat index of node ``ijk`` (x fastest)."""
        if len(ijk) != self.dim:
            raise ValueError(f"expected {self.dim} indices, got {len(ijk)}")
        flat, stride = 0, 1
        for i, m in zip(ijk, self.shape):
            if not 0 <= i < m:
                raise IndexError(f"node index {ijk} out of range for shape {self.shape}")
            flat += i * stride
            stride *= m
        return flat

    def unravel(self, flat: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(flat, self.shape, order="F"))

    def coords(self, flat: int) -> tuple[float, ...]:
        return tuple(i * d for i, d in zip(self.unravel(flat), self.spacing))

    def quadrature_weights(self, rule: str = "trapezoidal") -> np.ndarray:
        """Nodal weights of the discrete L2 inner product (read-only, cached).

        ``trapezoidal`` halves the weight once per boundary axis a node sits
        on; ``nodal`` is the plain cell-volume-weighted l2 sum.
        """
        return _weights(self, rule)


@lru_cache(maxsize=64)
def _weights(grid: Grid, rule: str) -> np.ndarray:
    if rule not in NORM_RULES:
        raise ValueError(f"unknown norm rule {rule!r}; expected one of {NORM_RULES}")
    w = np.ones(grid.shape)
    for axis, (k, d) in enumerate(zip(grid.n, grid.spacing)):
        w1 = np.full(k + 1, d)
        if rule == "trapezoidal":
            w1[0] *= 0.5
            w1[-1] *= 0.5
        w = w * w1.reshape([-1 if a == axis else 1 for a in range(grid.dim)])
    w.flags.writeable = False
    return w


def make_grid(dim: int, n_per_axis) -> Grid:
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    n = tuple(int(k) for k in np.broadcast_to(np.asarray(n_per_axis), (dim,)))
    if any(k < 2 for k in n):
        raise ValueError(f"each axis needs at least 2 cells, got {n}")
    return Grid(dim, n)


@dataclass(frozen=True)
class TimeAxis:
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"final time must be positive, got {self.T}")
        if self.n_steps < 1:
            raise ValueError(f"need at least one time step, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @cached_property
    def levels(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @cached_property
    def weights(self) -> np.ndarray:
        """Composite trapezoidal weights over the time levels."""
        w = np.full(self.n_steps + 1, self.dt)
        w[0] *= 0.5
        w[-1] *= 0.5
        return w


def integrate_time(time: TimeAxis, f: np.ndarray) -> np.ndarray:
    """Trapezoidal time integral of a field whose leading axis is time."""
    return np.tensordot(time.weights, f, axes=(0, 0))


def inner(grid: Grid, f: np.ndarray, g: np.ndarray, rule: str = "trapezoidal") -> float:
    return float(np.sum(grid.quadrature_weights(rule) * f * g))


def discrete_l2_norm(grid: Grid, f: np.ndarray, rule: str = "trapezoidal") -> float:
    f = np.asarray(f, dtype=float)
    if f.shape != grid.shape:
        raise ValueError(f"field shape {f.shape} does not match grid {grid.shape}")
    return float(np.sqrt(np.sum(grid.quadrature_weights(rule) * f * f)))


def relative_error(grid: Grid, f_rec, f_exact, rule: str = "trapezoidal") -> float:
    """Theta = ||f_exact - f_rec|| / ||f_exact||."""
    ref = discrete_l2_norm(grid, f_exact, rule)
    if ref == 0.0:
        raise ValueError("exact field has zero norm")
    return discrete_l2_norm(grid, np.asarray(f_exact) - np.asarray(f_rec), rule) / ref


def change_norm(grid: Grid, f_new, f_old, rule: str = "trapezoidal") -> float:
    """Relative change ||f_new - f_old|| / ||f_new|| between two iterates."""
    ref = discrete_l2_norm(grid, f_new, rule)
    if ref == 0.0:
        raise ValueError("new iterate has zero norm")
    return discrete_l2_norm(grid, np.asarray(f_new) - np.asarray(f_old), rule) / ref


def gradient_norm_sq(grid: Grid, f: np.ndarray) -> float:
    """Squared L2 norm of the forward-difference gradient.

    Each edge difference is weighted by its length times the trapezoidal
    weights of the transverse axes.
    """
    f = np.asarray(f, dtype=float)
    total = 0.0
    for axis, d in enumerate(grid.spacing):
        diff = np.diff(f, axis=axis) / d
        w = np.ones(diff.shape)
        for other, (k, do) in enumerate(zip(grid.n, grid.spacing)):
            if other == axis:
                w1 = np.full(k, do)
            else:
                w1 = np.full(k + 1, do)
                w1[0] *= 0.5
                w1[-1] *= 0.5
            w = w * w1.reshape([-1 if a == other else 1 for a in range(grid.dim)])
        total += float(np.sum(w * diff * diff))
    return total


COORD_NAMES = ("x", "y", "z")


def fmt(v: float) -> str:
    return f"{v:.17g}"


def write_field_csv(path, grid: Grid, f: np.ndarray) -> None:
    names = COORD_NAMES[: grid.dim]
    cols = [m.ravel(order="F") for m in grid.mesh]
    cols.append(np.asarray(f, dtype=float).ravel(order="F"))
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names + ("value",)) + "\n")
        for row in zip(*cols):
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_field_csv(path) -> tuple[Grid, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    dim = len(header) - 1
    if header[-1] != "value" or tuple(header[:-1]) != COORD_NAMES[:dim]:
        raise ValueError(f"{path}: unexpected header {header}")
    data = np.array([[float(c) for c in r] for r in body])
    n = [len(np.unique(data[:, a])) - 1 for a in range(dim)]
    grid = make_grid(dim, n)
    if len(body) != grid.num_nodes:
        raise ValueError(f"{path}: {len(body)} rows for a grid of {grid.num_nodes} nodes")
    return grid, data[:, -1].reshape(grid.shape, order="F")
