"""Conjugate-gradient reconstruction of the source with exact line search.

One iteration: forward and adjoint solves at the current source, the
regularisation weight from its schedule, the gradient, a Fletcher-Reeves
direction, one sensitivity solve along that direction, the closed-form step
minimising the (quadratic) functional along it, and the update
``F <- F - alpha d``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .grid import change_norm, fmt, inner, relative_error
from .objective import (ObservationWeights, assemble_mismatch, gradient,
                        misfit_product, observe, tikhonov)
from .pde import LinearSolveParams, build_cn_operator, solve_adjoint, solve_forward, solve_sensitivity
from .synth import ProblemSpec

log = logging.getLogger(__name__)

TERMINATION_REASONS = ("gradient_tol", "change_tol", "max_iter")


@dataclass(frozen=True)
class RegularizationSchedule:
    gamma0: float
    p: float = 0.5
    fixed: bool = False

    def __post_init__(self):
        if self.gamma0 < 0 or (self.gamma0 == 0 and not self.fixed):
            raise ValueError(f"gamma0 must be positive, got {self.gamma0}")
        if not 0 < self.p < 1:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")


@dataclass(frozen=True)
class StoppingCriteria:
    theta1: float = 0.0
    theta2: float = 0.0
    max_iter: int = 40

    def __post_init__(self):
        if self.theta1 < 0 or self.theta2 < 0:
            raise ValueError("tolerances must be non-negative")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")


@dataclass
class IterationRecord:
    m: int
    J: float
    gnorm: float
    alpha: float
    beta: float
    gamma: float
    e_m: float
    theta_m: float


@dataclass
class ReconstructionResult:
    F_final: np.ndarray
    history: list[IterationRecord] = field(default_factory=list)
    termination_reason: str = "max_iter"

    @property
    def iterations(self) -> int:
        return len(self.history)

    @property
    def final_theta(self) -> float:
        return self.history[-1].theta_m if self.history else float("nan")


def gamma_at(schedule: RegularizationSchedule, m: int) -> float:
    """gamma0 / (m + 1)**p, or gamma0 for a fixed schedule."""
    if m < 0:
        raise ValueError("iteration index must be non-negative")
    if schedule.fixed:
        return schedule.gamma0
    return schedule.gamma0 / (m + 1) ** schedule.p


def initial_gamma(delta_percent: float, zeta: float = 0.5) -> float:
    if not 0 < delta_percent < 100:
        raise ValueError(f"noise level must lie in (0, 100), got {delta_percent}")
    if not 0 < zeta < 1:
        raise ValueError(f"zeta must lie in (0, 1), got {zeta}")
    return (delta_percent / 100.0) ** zeta


def fletcher_reeves_beta(grid, g: np.ndarray, g_prev_norm_sq: float) -> float:
    if not g_prev_norm_sq > 0:
        raise ZeroDivisionError("previous gradient vanished; the iteration has converged")
    return inner(grid, g, g) / g_prev_norm_sq


def descent_direction(g: np.ndarray, d_prev: np.ndarray | None, beta: float) -> np.ndarray:
    if d_prev is None:
        return np.array(g, dtype=float, copy=True)
    if d_prev.shape != g.shape:
        raise ValueError(f"direction shape {d_prev.shape} does not match gradient {g.shape}")
    return g + beta * d_prev


def step_size(spec: ProblemSpec, u: np.ndarray, data: np.ndarray, du: np.ndarray, F: np.ndarray,
              d: np.ndarray, gamma: float, w: ObservationWeights) -> float:
    """Minimiser of s -> J(F - s d), given the sensitivity ``du`` of the state along d."""
    grid, time = spec.grid, spec.time
    res = observe(u) - data
    dtrace = observe(du)
    num = misfit_product(grid, time, w, res, dtrace) + gamma * inner(grid, F - spec.F0, d)
    den = gamma * inner(grid, d, d) + misfit_product(grid, time, w, dtrace, dtrace)
    if den == 0.0:
        raise ZeroDivisionError("zero curvature along the search direction")
    return num / den


def run_cga(spec: ProblemSpec, data: np.ndarray, w: ObservationWeights,
            schedule: RegularizationSchedule, stop: StoppingCriteria,
            params: LinearSolveParams | None = None, norm: str = "trapezoidal",
            clamp: tuple[float, float] | None = None,
            adjoint: str = "discrete", callback=None) -> ReconstructionResult:
    """Minimise the Tikhonov functional from ``spec.F0``; see the module docstring.

    Row m of the history describes the step from F^m to F^{m+1}: the functional
    and gradient norm at F^m, the step quantities, and the relative change and
    error (when the true source is known) of F^{m+1}.  ``clamp`` optionally
    projects every iterate onto a box; ``adjoint`` selects the backward
    scheme (see :func:`parasource.pde.solve_adjoint`).  ``callback(record, F, d)``
    runs after every accepted step with the pre-update iterate.
    """
    grid, time = spec.grid, spec.time
    op = build_cn_operator(grid, spec.a, time.dt, params)
    F = np.array(spec.F0, dtype=float, copy=True)
    result = ReconstructionResult(F)
    d_prev = None
    gnorm_sq_prev = 0.0

    for m in range(stop.max_iter):
        u = solve_forward(op, time, F, spec.G)
        lam = solve_adjoint(op, time, assemble_mismatch(u, data, w), scheme=adjoint)
        gamma = gamma_at(schedule, m)
        g = gradient(time, lam, spec.G, F, spec.F0, gamma)
        J = tikhonov(grid, time, u, data, F, spec.F0, gamma, w)
        gnorm_sq = inner(grid, g, g)
        if m == 0:
            beta = 0.0
        else:
            beta = fletcher_reeves_beta(grid, g, gnorm_sq_prev)
        d = descent_direction(g, d_prev, beta)

        if np.sqrt(gnorm_sq) <= stop.theta1:
            result.termination_reason = "gradient_tol"
            break
        du = solve_sensitivity(op, time, d, spec.G)
        try:
            alpha = step_size(spec, u, data, du, F, d, gamma, w)
        except ZeroDivisionError:
            result.termination_reason = "gradient_tol"
            break

        F_new = F - alpha * d
        if clamp is not None:
            F_new = np.clip(F_new, *clamp)
        e_m = change_norm(grid, F_new, F, norm)
        theta = relative_error(grid, F_new, spec.F_true, norm) if spec.F_true is not None else float("nan")
        result.history.append(IterationRecord(m, J, float(np.sqrt(gnorm_sq)), alpha, beta, gamma, e_m, theta))
        if callback is not None:
            callback(result.history[-1], F, d)
        log.debug("m=%d J=%.6e |g|=%.3e alpha=%.3e theta=%.5f", m, J, np.sqrt(gnorm_sq), alpha, theta)

        F, d_prev, gnorm_sq_prev = F_new, d, gnorm_sq
        if e_m <= stop.theta2:
            result.termination_reason = "change_tol"
            break
    else:
        result.termination_reason = "max_iter"

    result.F_final = F
    return result


HISTORY_COLUMNS = ("m", "J", "gnorm", "alpha", "beta", "gamma", "e_m", "theta_m")


def write_history_csv(path, result: ReconstructionResult) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for rec in result.history:
            vals = [str(rec.m)] + [fmt(getattr(rec, c)) for c in HISTORY_COLUMNS[1:]]
            fh.write(",".join(vals) + "\n")


def theta_of(spec: ProblemSpec, F: np.ndarray, norm: str = "trapezoidal") -> float:
    return relative_error(spec.grid, F, spec.F_true, norm)

