"""Numerical verification studies shared by ``parasource verify`` and the test suite.

Every study returns a plain dict of measured quantities plus a ``passed``
flag evaluated against the threshold it was called with.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from .grid import change_norm, discrete_l2_norm, gradient_norm_sq, inner, integrate_time
from .objective import assemble_mismatch, build_weights, gradient, misfit_product, observe, tikhonov
from .optimizer import (RegularizationSchedule, StoppingCriteria, initial_gamma, run_cga)
from .pde import LinearSolveParams, build_cn_operator, solve_adjoint, solve_forward, solve_sensitivity
from .synth import NoiseSpec, make_data, manufactured_solution, measured_data, preset


def observed_orders(errors) -> list[float]:
    e = np.asarray(errors, dtype=float)
    return [float(v) for v in np.log2(e[:-1] / e[1:])]


def energy_constant(T: float, a_min: float) -> float:
    return 1.0 + (T / a_min) * math.exp(T / a_min)


def forward_convergence(levels=(3, 4, 5, 6), min_order: float = 1.8,
                        params: LinearSolveParams | None = None) -> dict:
    """Max-in-time L2 error of the forward march against t cos(pi x) cos(pi y), dt = h."""
    errors = []
    for level in levels:
        spec, _ = preset(2, level)
        op = build_cn_operator(spec.grid, spec.a, spec.time.dt, params)
        u = solve_forward(op, spec.time, spec.F_true, spec.G)
        exact = manufactured_solution(spec.grid, spec.time)
        errors.append(max(discrete_l2_norm(spec.grid, u[n] - exact[n]) for n in range(len(u))))
    orders = observed_orders(errors)
    return {"levels": list(levels), "errors": errors, "orders": orders,
            "passed": min(orders) >= min_order}


def smooth_directions(grid, count: int, seed: int = 0, modes: int = 3) -> list[np.ndarray]:
    """Random combinations of low Neumann cosine modes."""
    rng = np.random.default_rng(seed)
    X = grid.mesh
    out = []
    for _ in range(count):
        c = rng.standard_normal((modes + 1,) * grid.dim)
        d = np.zeros(grid.shape)
        for idx in np.ndindex(c.shape):
            mode = np.ones(grid.shape)
            for k, x in zip(idx, X):
                mode = mode * np.cos(k * np.pi * x)
            d += c[idx] * mode
        out.append(d)
    return out


def gradient_check(level: int = 4, n_directions: int = 10, eps: float = 1e-5,
                   adjoint: str = "discrete", delta: float = 1.0, seed: int = 0,
                   threshold: float = 1e-3, params: LinearSolveParams | None = None) -> dict:
    """Central differences of J along random smooth directions against <g, d>.

    Experiment-1 data with noise ``delta``; evaluated at the initial guess with
    gamma = gamma0 = (delta/100)^0.5.
    """
    spec, noise = preset(1, level)
    noise = NoiseSpec(delta, noise.seed, noise.smooth_halfwidth)
    data = measured_data(spec, noise, params=params)["smoothed"]
    grid, time = spec.grid, spec.time
    op = build_cn_operator(grid, spec.a, time.dt, params)
    w = build_weights(grid)
    gamma = initial_gamma(delta) if delta > 0 else 0.0
    F = spec.F0 + 0.2 * smooth_directions(grid, 1, seed + 1000)[0]

    def J(f):
        return tikhonov(grid, time, solve_forward(op, time, f, spec.G), data, f, spec.F0, gamma, w)

    u = solve_forward(op, time, F, spec.G)
    lam = solve_adjoint(op, time, assemble_mismatch(u, data, w), scheme=adjoint)
    g = gradient(time, lam, spec.G, F, spec.F0, gamma)
    errors = []
    for d in smooth_directions(grid, n_directions, seed):
        fd = (J(F + eps * d) - J(F - eps * d)) / (2 * eps)
        errors.append(abs(fd - inner(grid, g, d)) / abs(fd))
    return {"level": level, "adjoint": adjoint, "gamma": gamma, "errors": errors,
            "max_error": max(errors), "passed": max(errors) < threshold}


def duality_residual(level: int, scheme: str = "continuous",
                     params: LinearSolveParams | None = None) -> float:
    """Relative gap between <r, du> and -<dF G, lambda> over space-time.

    The mismatch is that of the initial guess of experiment 1 against clean
    computed data, the perturbation a fixed smooth field.
    """
    spec, _ = preset(1, level)
    grid, time = spec.grid, spec.time
    op = build_cn_operator(grid, spec.a, time.dt, params)
    data = make_data(spec, spec.F_true, params=params)
    w = build_weights(grid)
    u = solve_forward(op, time, spec.F0, spec.G)
    lam = solve_adjoint(op, time, assemble_mismatch(u, data, w), scheme=scheme)
    X = grid.mesh
    dF = np.cos(np.pi * X[0]) * X[1] + 0.5
    du = solve_sensitivity(op, time, dF, spec.G)
    lhs = misfit_product(grid, time, w, observe(u) - data, observe(du))
    rhs = -inner(grid, dF, integrate_time(time, spec.G * lam))
    return abs(lhs - rhs) / abs(lhs)


def duality_study(levels=(3, 4, 5), scheme: str = "continuous", min_ratio: float = 3.0,
                  params: LinearSolveParams | None = None) -> dict:
    residuals = [duality_residual(lv, scheme, params) for lv in levels]
    ratios = [residuals[i] / residuals[i + 1] for i in range(len(residuals) - 1)]
    return {"levels": list(levels), "scheme": scheme, "residuals": residuals, "ratios": ratios,
            "passed": min(ratios) >= min_ratio}


def line_search_check(level: int = 4, iterations: int = 10, tolerance: float = 1e-8,
                      delta: float = 1.0, params: LinearSolveParams | None = None) -> dict:
    """Fit a parabola to J(F - s d) at s in {0, a/2, a, 3a/2}; its vertex must equal a."""
    spec, noise = preset(1, level)
    noise = NoiseSpec(delta, noise.seed, noise.smooth_halfwidth)
    data = measured_data(spec, noise, params=params)["smoothed"]
    grid, time = spec.grid, spec.time
    op = build_cn_operator(grid, spec.a, time.dt, params)
    w = build_weights(grid)
    errors = []

    def check(rec, F, d):
        s = rec.alpha * np.array([0.0, 0.5, 1.0, 1.5])
        J = [tikhonov(grid, time, solve_forward(op, time, F - si * d, spec.G), data,
                      F - si * d, spec.F0, rec.gamma, w) for si in s]
        # centre and scale the abscissa so the fit is well conditioned
        c2, c1, _ = np.polyfit(s / rec.alpha - 1.0, J, 2)
        vertex = rec.alpha * (1.0 - c1 / (2 * c2))
        errors.append(abs(vertex - rec.alpha) / abs(rec.alpha))

    schedule = RegularizationSchedule(initial_gamma(delta))
    result = run_cga(spec, data, w, schedule, StoppingCriteria(max_iter=iterations), params,
                     callback=check)
    return {"level": level, "iterations": result.iterations, "errors": errors,
            "max_error": max(errors), "passed": max(errors) < tolerance and result.iterations == iterations}


def energy_terms(grid, time, field: np.ndarray, a: np.ndarray) -> float:
    """max_n ||sqrt(a) v^n||^2 + 2 int ||grad v||^2 dt, the left side of both energy bounds."""
    grads = np.array([gradient_norm_sq(grid, v) for v in field])
    peak = max(inner(grid, a * v, v) for v in field)
    return peak + 2.0 * float(np.sum(time.weights * grads))


def energy_inequalities(level: int = 4, experiments=range(1, 7), delta: float = 1.0,
                        params: LinearSolveParams | None = None) -> dict:
    """Discrete energy bounds for the state (source F_true) and the adjoint.

    state:   ||sqrt(a) u(t)||^2 + 2 int ||grad u||^2 <= C1 ||F||^2 int max|G|^2 dt
    adjoint: ||sqrt(a) lam(t)||^2 + 2 int ||grad lam||^2 <= C1 int ||r||^2 dt
    for every time level t
    with C1 = 1 + (T / a_min) exp(T / a_min) and r the weighted mismatch of
    the initial guess against noisy data.
    """
    rows = []
    for exp in experiments:
        lv = min(level, 4) if exp == 6 else level
        spec, noise = preset(exp, lv)
        grid, time = spec.grid, spec.time
        noise = NoiseSpec(delta, noise.seed, noise.smooth_halfwidth)
        op = build_cn_operator(grid, spec.a, time.dt, params)
        C1 = energy_constant(spec.T, spec.a_min)

        u = solve_forward(op, time, spec.F_true, spec.G)
        g_inf = float(np.sum(time.weights * np.max(np.abs(spec.G.reshape(len(spec.G), -1)), axis=1) ** 2))
        state_lhs = energy_terms(grid, time, u, spec.a)
        state_rhs = C1 * discrete_l2_norm(grid, spec.F_true) ** 2 * g_inf

        data = measured_data(spec, noise, params=params)["smoothed"]
        w = build_weights(grid)
        r = assemble_mismatch(solve_forward(op, time, spec.F0, spec.G), data, w)
        lam = solve_adjoint(op, time, r)
        adj_lhs = energy_terms(grid, time, lam, spec.a)
        adj_rhs = C1 * float(np.sum(time.weights * np.array([inner(grid, rn, rn) for rn in r])))
        rows.append({"experiment": exp, "level": lv, "C1": C1,
                     "state_lhs": state_lhs, "state_rhs": state_rhs,
                     "adjoint_lhs": adj_lhs, "adjoint_rhs": adj_rhs,
                     "passed": state_lhs <= state_rhs and adj_lhs <= adj_rhs})
    return {"rows": rows, "passed": all(r["passed"] for r in rows)}


def exact_start(level: int = 5, iterations: int = 5, tolerance: float = 1e-6,
                params: LinearSolveParams | None = None) -> dict:
    """Start CG at the true source with clean data and gamma = 0; F must barely move."""
    spec, _ = preset(1, level)
    spec = replace(spec, F0=spec.F_true.copy())
    data = make_data(spec, spec.F_true, params=params)
    w = build_weights(spec.grid)
    result = run_cga(spec, data, w, RegularizationSchedule(0.0, fixed=True),
                     StoppingCriteria(max_iter=iterations), params)
    change = change_norm(spec.grid, result.F_final, spec.F_true)
    return {"level": level, "iterations": result.iterations,
            "termination_reason": result.termination_reason,
            "relative_change": change, "passed": change < tolerance}


def stability_check(level: int = 4, ratio: float = 10.0,
                    params: LinearSolveParams | None = None) -> dict:
    """CN with dt = ratio * h stays bounded by the manufactured solution's scale."""
    spec, _ = preset(2, level)
    n_steps = max(1, round(1.0 / (ratio * spec.grid.h)))
    spec, _ = preset(2, level, n_steps=n_steps)
    op = build_cn_operator(spec.grid, spec.a, spec.time.dt, params)
    u = solve_forward(op, spec.time, spec.F_true, spec.G)
    exact = manufactured_solution(spec.grid, spec.time)
    peak = max(discrete_l2_norm(spec.grid, v) for v in u)
    error = max(discrete_l2_norm(spec.grid, u[n] - exact[n]) for n in range(len(u)))
    return {"level": level, "n_steps": n_steps, "peak_norm": peak, "max_error": error,
            "passed": bool(np.isfinite(peak)) and error < 1.0}


def run_all(params: LinearSolveParams | None = None) -> dict:
    return {
        "forward_convergence": forward_convergence(params=params),
        "gradient_check": gradient_check(params=params),
        "duality": duality_study(params=params),
        "line_search": line_search_check(params=params),
        "energy": energy_inequalities(params=params),
        "exact_start": exact_start(params=params),
        "stability": stability_check(params=params),
    }
