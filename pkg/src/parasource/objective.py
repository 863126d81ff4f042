"""Top-boundary observations, the Tikhonov functional and its adjoint gradient.

The observed boundary is the top face: ``j = N_y`` in 2D, ``k = N_z`` in 3D,
i.e. the last spatial axis.  A boundary trace has shape
``(N_t + 1, N_x + 1)`` in 2D and ``(N_t + 1, N_x + 1, N_y + 1)`` in 3D.

Spatial integrals use the trapezoidal node weights of the grid, time
integrals the trapezoidal weights of the time axis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .grid import COORD_NAMES, Grid, TimeAxis, fmt, integrate_time


@dataclass(frozen=True)
class ObservationWeights:
    """Nodal weight field standing in for the observation comb times z_delta."""

    weight_field: np.ndarray
    band_width: int = 1
    sigma: float = 1.0

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return self.weight_field.shape


def build_weights(grid: Grid, band_width: int = 1, sigma: float = 1.0) -> ObservationWeights:
    """Gaussian decay ``exp(-dist^2 / sigma^2)`` over the top ``band_width`` node layers."""
    n_layers = grid.shape[-1]
    if not 1 <= band_width <= n_layers:
        raise ValueError(f"band_width must lie in [1, {n_layers}], got {band_width}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    dist = (grid.n[-1] - np.arange(n_layers)) * grid.spacing[-1]
    layer = np.exp(-(dist**2) / sigma**2)
    layer[: n_layers - band_width] = 0.0
    layer[-1] = 1.0
    w = np.broadcast_to(layer, grid.shape).copy()
    w.flags.writeable = False
    return ObservationWeights(w, band_width, sigma)


def observe(u: np.ndarray) -> np.ndarray:
    """Restrict a space-time field (time leading) to the top node layer."""
    u = np.asarray(u)
    if u.ndim not in (3, 4):
        raise ValueError(f"expected a 2D or 3D space-time field, got {u.ndim - 1} space dims")
    return u[..., -1]


def _check_trace(u: np.ndarray, data: np.ndarray) -> None:
    if data.shape != u.shape[:-1]:
        raise ValueError(f"trace shape {data.shape} does not match field top layer {u.shape[:-1]}")


def assemble_mismatch(u: np.ndarray, data: np.ndarray, w: ObservationWeights) -> np.ndarray:
    """r(x, t) = (u(x_top, t) - data(x_top, t)) * w(x), x_top being the top node of x's column."""
    u = np.asarray(u, dtype=float)
    data = np.asarray(data, dtype=float)
    _check_trace(u, data)
    if u.shape[1:] != w.grid_shape:
        raise ValueError(f"weights shape {w.grid_shape} does not match field {u.shape[1:]}")
    return (observe(u) - data)[..., None] * w.weight_field


def column_weights(grid: Grid, w: ObservationWeights) -> np.ndarray:
    """Quadrature mass each top node carries in the misfit: sum over its column of q * w."""
    return np.sum(grid.quadrature_weights() * w.weight_field, axis=-1)


def misfit_product(grid: Grid, time: TimeAxis, w: ObservationWeights,
                   a: np.ndarray, b: np.ndarray) -> float:
    """Weighted space-time product of two top-boundary traces."""
    cw = column_weights(grid, w)
    return float(np.sum(integrate_time(time, a * b) * cw))


def tikhonov(grid: Grid, time: TimeAxis, u: np.ndarray, data: np.ndarray, F: np.ndarray,
             F0: np.ndarray, gamma: float, w: ObservationWeights) -> float:
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    _check_trace(u, data)
    res = observe(u) - data
    reg = np.sum(grid.quadrature_weights() * (F - F0) ** 2)
    return 0.5 * misfit_product(grid, time, w, res, res) + 0.5 * gamma * float(reg)


def gradient(time: TimeAxis, lam: np.ndarray, G: np.ndarray, F: np.ndarray,
             F0: np.ndarray, gamma: float) -> np.ndarray:
    """g(x) = -int_0^T G(x, t) lambda(x, t) dt + gamma (F - F0)(x)."""
    lam = np.asarray(lam, dtype=float)
    G = np.asarray(G, dtype=float)
    if lam.shape != G.shape:
        raise ValueError(f"adjoint shape {lam.shape} does not match G {G.shape}")
    if lam.shape[0] != time.n_steps + 1:
        raise ValueError("adjoint has the wrong number of time levels")
    return -integrate_time(time, G * lam) + gamma * (np.asarray(F) - np.asarray(F0))


def trace_grid_names(grid: Grid) -> tuple[str, ...]:
    return COORD_NAMES[: grid.dim - 1]


def write_trace_csv(path, grid: Grid, time: TimeAxis, trace: np.ndarray) -> None:
    """Rows ``t,<coords>,value``; time outer, nodes x fastest within a level."""
    trace = np.asarray(trace, dtype=float)
    names = trace_grid_names(grid)
    top = grid.mesh
    coords = [m[..., -1].ravel(order="F") for m in top[: grid.dim - 1]]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(("t",) + names + ("value",)) + "\n")
        for n, t in enumerate(time.levels):
            vals = trace[n].ravel(order="F")
            for row in zip(*coords, vals):
                fh.write(fmt(t) + "," + ",".join(fmt(v) for v in row) + "\n")


def read_trace_csv(path) -> tuple[TimeAxis, np.ndarray]:
    """Inverse of :func:`write_trace_csv`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    sdim = len(header) - 2
    if header[0] != "t" or header[-1] != "value" or tuple(header[1:-1]) != COORD_NAMES[:sdim]:
        raise ValueError(f"{path}: unexpected header {header}")
    data = np.array([[float(c) for c in r] for r in body])
    n_levels = len(np.unique(data[:, 0]))
    face = [len(np.unique(data[:, 1 + a])) for a in range(sdim)]
    per_level = int(np.prod(face))
    if len(body) != n_levels * per_level:
        raise ValueError(f"{path}: {len(body)} rows, expected {n_levels * per_level}")
    time = TimeAxis(float(data[-1, 0]), n_levels - 1)
    trace = data[:, -1].reshape(n_levels, per_level)
    return time, np.stack([row.reshape(face, order="F") for row in trace])
