from dataclasses import replace

import numpy as np
import pytest

from parasource.grid import inner, make_grid
from parasource.objective import build_weights, tikhonov
from parasource.optimizer import (RegularizationSchedule, StoppingCriteria, descent_direction,
                                  fletcher_reeves_beta, gamma_at, initial_gamma, run_cga, step_size,
                                  write_history_csv)
from parasource.pde import LinearSolveParams, build_cn_operator, solve_forward
from parasource.synth import NoiseSpec, make_data, measured_data, preset
from parasource.verification import exact_start, line_search_check


def test_gamma_schedule():
    s = RegularizationSchedule(0.1, p=0.5)
    assert gamma_at(s, 0) == 0.1
    assert gamma_at(s, 3) == pytest.approx(0.05)
    fixed = RegularizationSchedule(0.3, fixed=True)
    assert all(gamma_at(fixed, m) == 0.3 for m in range(10))
    seq = [gamma_at(s, m) for m in range(40)]
    assert all(a >= b for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError):
        gamma_at(s, -1)


def test_schedule_validation():
    with pytest.raises(ValueError):
        RegularizationSchedule(0.0)
    RegularizationSchedule(0.0, fixed=True)
    with pytest.raises(ValueError):
        RegularizationSchedule(0.1, p=1.0)
    with pytest.raises(ValueError):
        StoppingCriteria(max_iter=0)
    with pytest.raises(ValueError):
        StoppingCriteria(theta1=-1)


def test_initial_gamma():
    assert initial_gamma(1.0, 0.5) == pytest.approx(0.1)
    assert initial_gamma(4.0, 0.5) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        initial_gamma(1.0, 1.5)
    with pytest.raises(ValueError):
        initial_gamma(0.0)


def test_fletcher_reeves_beta():
    g = make_grid(2, 4)
    f = np.cos(np.pi * g.mesh[0])
    n2 = inner(g, f, f)
    assert fletcher_reeves_beta(g, f, n2) == pytest.approx(1.0)
    assert fletcher_reeves_beta(g, np.zeros(g.shape), n2) == 0.0
    two = np.full(g.shape, 2.0)
    assert fletcher_reeves_beta(g, two, 1.0) == pytest.approx(4.0)
    with pytest.raises(ZeroDivisionError):
        fletcher_reeves_beta(g, f, 0.0)


def test_descent_direction():
    g = np.ones((3, 3))
    d_prev = np.full((3, 3), 5.0)
    assert np.array_equal(descent_direction(g, d_prev, 0.0), g)
    assert np.array_equal(descent_direction(np.zeros((3, 3)), d_prev, 1.0), d_prev)
    assert np.all(descent_direction(g, np.ones((3, 3)), 2.0) == 3.0)
    first = descent_direction(g, None, 0.7)
    assert np.array_equal(first, g) and first is not g
    with pytest.raises(ValueError):
        descent_direction(g, np.ones((2, 2)), 1.0)


def test_step_size_without_sensitivity():
    spec, _ = preset(1, 3)
    g = spec.grid
    zero = np.zeros((spec.time.n_steps + 1,) + g.shape)
    spec = replace(spec, G=zero)
    data = np.zeros(zero.shape[:-1])
    w = build_weights(g)
    F = spec.F0 + g.mesh[0]
    d = np.cos(np.pi * g.mesh[1]) + 2
    alpha = step_size(spec, zero, data, zero, F, d, 0.4, w)
    assert alpha == pytest.approx(inner(g, F - spec.F0, d) / inner(g, d, d))
    with pytest.raises(ZeroDivisionError):
        step_size(spec, zero, data, zero, F, np.zeros(g.shape), 0.4, w)


def test_step_minimises_along_direction():
    spec, _ = preset(1, 3)
    g, t = spec.grid, spec.time
    op = build_cn_operator(g, spec.a, t.dt)
    data = measured_data(spec, NoiseSpec())["smoothed"]
    w = build_weights(g)
    d = np.sin(np.pi * g.mesh[0]) + g.mesh[1]
    u = solve_forward(op, t, spec.F0, spec.G)
    du = solve_forward(op, t, d, spec.G)
    alpha = step_size(spec, u, data, du, spec.F0, d, 0.1, w)

    def J(s):
        F = spec.F0 - s * d
        return tikhonov(g, t, solve_forward(op, t, F, spec.G), data, F, spec.F0, 0.1, w)

    assert J(alpha) < J(0.9 * alpha) and J(alpha) < J(1.1 * alpha)


def test_line_search_vertex():
    study = line_search_check()
    assert study["passed"], study


def _run(exp=1, level=3, max_iter=8, fixed=False, **kw):
    spec, noise = preset(exp, level)
    data = measured_data(spec, noise)["smoothed"]
    w = build_weights(spec.grid)
    sched = RegularizationSchedule(0.1, fixed=fixed)
    return run_cga(spec, data, w, sched, StoppingCriteria(max_iter=max_iter), **kw)


def test_history_invariants():
    res = _run()
    assert res.iterations == 8
    assert res.termination_reason == "max_iter"
    assert res.history[0].beta == 0.0
    assert all(r.beta >= 0 for r in res.history)
    assert [r.m for r in res.history] == list(range(8))
    gammas = [r.gamma for r in res.history]
    assert all(a >= b for a, b in zip(gammas, gammas[1:]))


def test_fixed_gamma_functional_decreases():
    res = _run(fixed=True, max_iter=12)
    J = [r.J for r in res.history]
    assert all(b <= a * (1 + 1e-9) for a, b in zip(J, J[1:]))


def test_first_direction_is_gradient():
    seen = []
    spec, noise = preset(1, 3)
    data = measured_data(spec, noise)["smoothed"]
    w = build_weights(spec.grid)
    run_cga(spec, data, w, RegularizationSchedule(0.1), StoppingCriteria(max_iter=1),
            callback=lambda rec, F, d: seen.append((F.copy(), d.copy())))
    F, d = seen[0]
    assert np.array_equal(F, spec.F0)
    # gnorm is the Q-norm of g, and d0 = g0
    assert np.sqrt(inner(spec.grid, d, d)) == pytest.approx(_run(max_iter=1).history[0].gnorm)


def test_bitwise_reproducible():
    a, b = _run(), _run()
    assert np.array_equal(a.F_final, b.F_final)
    assert [r.J for r in a.history] == [r.J for r in b.history]


def test_exact_start_stays_put():
    study = exact_start()
    assert study["passed"], study


def test_change_tolerance_stops_early():
    spec, noise = preset(1, 3)
    data = measured_data(spec, noise)["smoothed"]
    res = run_cga(spec, data, build_weights(spec.grid), RegularizationSchedule(0.1),
                  StoppingCriteria(theta2=0.5, max_iter=40))
    assert res.termination_reason == "change_tol"
    assert res.iterations < 40


def test_gradient_tolerance_stops_immediately():
    spec, noise = preset(1, 3)
    data = make_data(spec, spec.F_true)
    res = run_cga(spec, data, build_weights(spec.grid), RegularizationSchedule(0.1),
                  StoppingCriteria(theta1=1e12, max_iter=40))
    assert res.termination_reason == "gradient_tol"
    assert res.iterations == 0
    assert np.array_equal(res.F_final, spec.F0)


def test_clamp_keeps_iterates_in_box():
    res = _run(clamp=(0.2, 1.2))
    assert res.F_final.min() >= 0.2 and res.F_final.max() <= 1.2


def test_direct_solver_matches_cg():
    a = _run(max_iter=5)
    b = _run(max_iter=5, params=LinearSolveParams(method="direct"))
    assert a.final_theta == pytest.approx(b.final_theta, rel=1e-6)


def test_informed_start_beats_homogeneous():
    assert _run(exp=3, level=4, max_iter=20).final_theta < _run(exp=1, level=4, max_iter=20).final_theta
    assert _run(exp=5, level=4, max_iter=20).final_theta < _run(exp=4, level=4, max_iter=20).final_theta


def test_history_csv(tmp_path):
    res = _run(max_iter=3)
    path = tmp_path / "h.csv"
    write_history_csv(path, res)
    lines = path.read_text().splitlines()
    assert lines[0] == "m,J,gnorm,alpha,beta,gamma,e_m,theta_m"
    assert len(lines) == 4
    assert float(lines[-1].split(",")[-1]) == res.final_theta
