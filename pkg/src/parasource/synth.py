"""Experiment presets, synthetic boundary data, seeded noise and smoothing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .grid import Grid, TimeAxis, make_grid
from .objective import observe
from .pde import LinearSolveParams, build_cn_operator, solve_forward

SHRINK = 0.1  # width parameter m1 of the Gaussian sources
LEVELS_2D = range(2, 7)
LEVELS_3D = range(2, 5)
DATA_MODES = ("computed", "exact_formula")


@dataclass(frozen=True)
class ProblemSpec:
    grid: Grid
    time: TimeAxis
    a: np.ndarray
    G: np.ndarray
    F0: np.ndarray
    F_true: np.ndarray | None = None
    experiment: int | None = None
    description: str = ""

    @property
    def T(self) -> float:
        return self.time.T

    @property
    def a_min(self) -> float:
        return float(self.a.min())


@dataclass(frozen=True)
class NoiseSpec:
    delta_percent: float = 1.0
    seed: int = 12345
    smooth_halfwidth: int = 2

    def __post_init__(self):
        if not 0 <= self.delta_percent < 100:
            raise ValueError(f"noise level must lie in [0, 100), got {self.delta_percent}")
        if self.smooth_halfwidth < 0:
            raise ValueError("smoothing half-width must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def _gauss_r2(X, centre):
    return sum((x - c) ** 2 for x, c in zip(X, centre))


def _disc(X):
    return (X[0] - 0.25) ** 2 + (X[1] - 0.3) ** 2 <= 0.25


def _cosines(X):
    out = np.ones_like(X[0])
    for x in X:
        out = out * np.cos(np.pi * x)
    return out


def _sample_G(X, t, profile):
    """G(x, t) = (a(x) + d pi^2 t) * prod cos(pi x_i) * profile(x), sampled on levels."""
    dim = len(X)
    a = 1.0 + np.prod(np.stack(X), axis=0)
    base = _cosines(X) * profile
    return np.stack([(a + dim * np.pi**2 * tn) * base for tn in t])


def preset(experiment: int, level: int, n_steps: int | None = None) -> tuple[ProblemSpec, NoiseSpec]:
    """Build one of the six reference experiments on the mesh h = 2**-level.

    1, 2, 3: Gaussian source centred at (0.5, 0.3), initial guesses 1, 1 and
    F + x^2 y^2 (experiment 2 differs from 1 only in how data is made).
    4, 5: piecewise-constant source on a disc, initial guesses 0.9 and F + x^2 y^2.
    6: 3D Gaussian centred at the cube midpoint, initial guess F + x^2 y^2 z^2 / 10.

    ``n_steps`` defaults to the number of cells per axis, i.e. dt = h with T = 1.
    """
    if experiment not in range(1, 7):
        raise ValueError(f"unknown experiment {experiment}; expected 1..6")
    dim = 3 if experiment == 6 else 2
    allowed = LEVELS_3D if dim == 3 else LEVELS_2D
    if level not in allowed:
        raise ValueError(f"level {level} outside {allowed.start}..{allowed.stop - 1} for experiment {experiment}")
    n = 2**level
    grid = make_grid(dim, [n] * dim)
    time = TimeAxis(1.0, n_steps or n)
    X = grid.mesh
    a = 1.0 + np.prod(np.stack(X), axis=0)

    if experiment in (1, 2, 3):
        r2 = _gauss_r2(X, (0.5, 0.3))
        F = np.exp(-r2 / SHRINK)
        G = _sample_G(X, time.levels, np.exp(r2 / SHRINK))
        F0 = F + X[0] ** 2 * X[1] ** 2 if experiment == 3 else np.ones(grid.shape)
        desc = "Gaussian source, " + ("near initial guess" if experiment == 3 else "homogeneous initial guess")
    elif experiment in (4, 5):
        inside = _disc(X)
        F = np.where(inside, 1.0, 0.5)
        G = _sample_G(X, time.levels, np.where(inside, 1.0, 2.0))
        F0 = F + X[0] ** 2 * X[1] ** 2 if experiment == 5 else np.full(grid.shape, 0.9)
        desc = "discontinuous disc source, " + ("near initial guess" if experiment == 5 else "initial guess 0.9")
    else:
        r2 = _gauss_r2(X, (0.5, 0.5, 0.5))
        F = np.exp(-r2 / SHRINK)
        G = _sample_G(X, time.levels, np.exp(r2 / SHRINK))
        F0 = F + (X[0] * X[1] * X[2]) ** 2 / 10.0
        desc = "3D Gaussian source, near initial guess"

    spec = ProblemSpec(grid, time, a, G, F0, F, experiment, desc)
    return spec, NoiseSpec()


def default_data_mode(experiment: int) -> str:
    return "exact_formula" if experiment == 2 else "computed"


def manufactured_solution(grid: Grid, time: TimeAxis) -> np.ndarray:
    """u(x, t) = t * prod cos(pi x_i), the exact state of every preset."""
    c = _cosines(grid.mesh)
    return time.levels.reshape((-1,) + (1,) * grid.dim) * c


def manufactured_source(spec: ProblemSpec) -> np.ndarray:
    """The source a u_t - lap u for the manufactured state, sampled on grid x levels."""
    c = _cosines(spec.grid.mesh)
    t = spec.time.levels.reshape((-1,) + (1,) * spec.grid.dim)
    return (spec.a + spec.grid.dim * np.pi**2 * t) * c


def supports_exact_formula(spec: ProblemSpec, F: np.ndarray) -> bool:
    """Whether F * G reproduces the manufactured source, so the closed form is the true state."""
    fg = F * spec.G
    ref = manufactured_source(spec)
    return bool(np.allclose(fg, ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max()))


def make_data(spec: ProblemSpec, F: np.ndarray, mode: str = "computed",
              params: LinearSolveParams | None = None) -> np.ndarray:
    """Clean top-boundary trace for source F, by forward solve or by the closed-form state."""
    if mode not in DATA_MODES:
        raise ValueError(f"unknown data mode {mode!r}; expected one of {DATA_MODES}")
    if mode == "exact_formula":
        if not supports_exact_formula(spec, F):
            raise ValueError("exact_formula data requires F * G to equal the manufactured source")
        return observe(manufactured_solution(spec.grid, spec.time))
    op = build_cn_operator(spec.grid, spec.a, spec.time.dt, params)
    return observe(solve_forward(op, spec.time, F, spec.G))


def gaussian_samples(seed: int, size: int) -> np.ndarray:
    """Standard normals from PCG64 uniforms through the Box-Muller transform.

    Uniform pairs (u1, u2) are drawn consecutively; each pair yields
    ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` then the matching sine sample.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    pairs = (size + 1) // 2
    u = rng.random(2 * pairs).reshape(pairs, 2)
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    angle = 2.0 * np.pi * u[:, 1]
    z = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)]).ravel()
    return z[:size]


def add_noise(trace: np.ndarray, noise: NoiseSpec) -> np.ndarray:
    """data + N(0, (delta/100)^2) per sample; samples fill nodes x-fastest, then time."""
    trace = np.asarray(trace, dtype=float)
    if noise.delta_percent == 0:
        return trace.copy()
    z = gaussian_samples(noise.seed, trace.size)
    levels = trace.shape[0]
    eps = np.stack([row.reshape(trace.shape[1:], order="F") for row in z.reshape(levels, -1)])
    return trace + (noise.delta_percent / 100.0) * eps


def smooth_data(trace: np.ndarray, halfwidth: int) -> np.ndarray:
    """Edge-renormalised moving average of width 2*halfwidth+1 along each space axis, then time."""
    if halfwidth < 0:
        raise ValueError("halfwidth must be non-negative")
    out = np.asarray(trace, dtype=float).copy()
    if halfwidth == 0:
        return out
    kernel = np.ones(2 * halfwidth + 1)
    axes = list(range(1, out.ndim)) + [0]
    for axis in axes:
        total = convolve1d(out, kernel, axis=axis, mode="constant", cval=0.0)
        count = convolve1d(np.ones(out.shape[axis]), kernel, mode="constant", cval=0.0)
        shape = [1] * out.ndim
        shape[axis] = -1
        out = total / count.reshape(shape)
    return out


def measured_data(spec: ProblemSpec, noise: NoiseSpec, mode: str = "computed",
                  params: LinearSolveParams | None = None) -> dict[str, np.ndarray]:
    """Clean, noisy and smoothed traces for the preset's true source.

    Noise-free data is passed through unsmoothed.
    """
    if spec.F_true is None:
        raise ValueError("problem has no true source to synthesise data from")
    clean = make_data(spec, spec.F_true, mode, params)
    noisy = add_noise(clean, noise)
    halfwidth = noise.smooth_halfwidth if noise.delta_percent > 0 else 0
    return {"clean": clean, "noisy": noisy, "smoothed": smooth_data(noisy, halfwidth)}
