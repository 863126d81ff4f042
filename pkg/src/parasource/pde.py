"""Crank-Nicolson stepping for a(x) u_t - lap(u) = F(x) G(x, t) with zero Neumann data.

The spatial operator is the 5/7-point Laplacian with ghost-node reflection
(``u[-1] = u[1]``) at every boundary face.  That matrix is not symmetric, but
it is self-adjoint in the trapezoidal inner product, so each implicit system
``A x = b`` is solved as the SPD system ``(Q A) x = Q b`` with ``Q`` the
trapezoidal weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Grid, TimeAxis

SOLVER_METHODS = ("cg", "direct")
ADJOINT_SCHEMES = ("continuous", "discrete")


class SolverError(RuntimeError):
    """Linear solve did not reach the requested tolerance."""


@dataclass(frozen=True)
class LinearSolveParams:
    tolerance: float = 1e-10
    max_iterations: int = 2000
    method: str = "cg"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError(f"linear solver tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.method not in SOLVER_METHODS:
            raise ValueError(f"unknown linear solver {self.method!r}; expected one of {SOLVER_METHODS}")


def _laplacian_1d(n: int, d: float) -> sp.csr_matrix:
    main = np.full(n + 1, -2.0)
    upper = np.ones(n)
    lower = np.ones(n)
    # ghost reflection doubles the inward neighbour on both ends
    upper[0] = 2.0
    lower[-1] = 2.0
    return sp.diags([lower, main, upper], [-1, 0, 1], format="csr") / d**2


def neumann_laplacian(grid: Grid) -> sp.csr_matrix:
    """Sparse discrete Laplacian acting on x-fastest flattened fields."""
    size = grid.num_nodes
    lap = sp.csr_matrix((size, size))
    for axis, (k, d) in enumerate(zip(grid.n, grid.spacing)):
        # kron(A, B) puts B on the fast index, so the x factor goes last
        term = sp.identity(1, format="csr")
        for a in reversed(range(grid.dim)):
            factor = _laplacian_1d(k, d) if a == axis else sp.identity(grid.shape[a], format="csr")
            term = sp.kron(term, factor, format="csr")
        lap = lap + term
    return lap.tocsr()


def apply_neumann_laplacian(grid: Grid, f: np.ndarray) -> np.ndarray:
    """Matrix-free Laplacian with ghost-node reflection on all faces."""
    f = np.asarray(f, dtype=float)
    padded = np.pad(f, 1, mode="reflect")
    out = np.zeros_like(f)
    centre = tuple(slice(1, -1) for _ in range(grid.dim))
    for axis, d in enumerate(grid.spacing):
        lo = list(centre)
        hi = list(centre)
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        out += (padded[tuple(lo)] - 2.0 * f + padded[tuple(hi)]) / d**2
    return out


@dataclass
class CnOperator:
    """Implicit/explicit CN matrices ``A = diag(a) - dt/2 lap``, ``B = diag(a) + dt/2 lap``."""

    grid: Grid
    a: np.ndarray
    dt: float
    implicit_matrix: sp.csr_matrix
    explicit_matrix: sp.csr_matrix
    params: LinearSolveParams = field(default_factory=LinearSolveParams)

    def __post_init__(self):
        q = self.grid.quadrature_weights().ravel(order="F")
        self._q = q
        self._sym = (sp.diags(q) @ self.implicit_matrix).tocsr()
        self._jacobi = sp.diags(1.0 / self._sym.diagonal())
        self._lu = spla.splu(self._sym.tocsc()) if self.params.method == "direct" else None

    def solve(self, rhs: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        """Solve ``A x = rhs`` for a flattened right-hand side."""
        b = self._q * rhs
        if self._lu is not None:
            return self._lu.solve(b)
        if not np.any(b):
            return np.zeros_like(b)
        x, info = spla.cg(
            self._sym, b, x0=x0, rtol=self.params.tolerance, atol=0.0,
            maxiter=self.params.max_iterations, M=self._jacobi,
        )
        if info != 0:
            raise SolverError(
                f"CG did not converge to rtol={self.params.tolerance} "
                f"within {self.params.max_iterations} iterations"
            )
        return x


def build_cn_operator(grid: Grid, a: np.ndarray, dt: float,
                      params: LinearSolveParams | None = None) -> CnOperator:
    a = np.asarray(a, dtype=float)
    if a.shape != grid.shape:
        raise ValueError(f"coefficient shape {a.shape} does not match grid {grid.shape}")
    if not np.all(a > 0):
        raise ValueError("coefficient a(x) must be strictly positive")
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    lap = neumann_laplacian(grid)
    mass = sp.diags(a.ravel(order="F"))
    return CnOperator(
        grid=grid, a=a, dt=dt,
        implicit_matrix=(mass - 0.5 * dt * lap).tocsr(),
        explicit_matrix=(mass + 0.5 * dt * lap).tocsr(),
        params=params or LinearSolveParams(),
    )


def _check_time(op: CnOperator, time: TimeAxis) -> None:
    if not np.isclose(op.dt, time.dt, rtol=1e-12, atol=0.0):
        raise ValueError(f"operator built for dt={op.dt}, time axis has dt={time.dt}")


def _flat_levels(op: CnOperator, time: TimeAxis, field: np.ndarray, what: str) -> np.ndarray:
    field = np.asarray(field, dtype=float)
    expected = (time.n_steps + 1,) + op.grid.shape
    if field.shape != expected:
        raise ValueError(f"{what} has shape {field.shape}, expected {expected}")
    return field.reshape(time.n_steps + 1, -1, order="F")


def _unflatten(op: CnOperator, flat: np.ndarray) -> np.ndarray:
    return flat.reshape((flat.shape[0],) + op.grid.shape, order="F")


def solve_forward(op: CnOperator, time: TimeAxis, F: np.ndarray, G: np.ndarray) -> np.ndarray:
    """March u^0 = 0 forward with A u^{n+1} = B u^n + dt/2 F (G^{n+1} + G^n)."""
    _check_time(op, time)
    F = np.asarray(F, dtype=float)
    if F.shape != op.grid.shape:
        raise ValueError(f"source shape {F.shape} does not match grid {op.grid.shape}")
    g = _flat_levels(op, time, G, "G")
    f = F.ravel(order="F")
    u = np.zeros_like(g)
    B = op.explicit_matrix
    for n in range(time.n_steps):
        rhs = B @ u[n] + 0.5 * op.dt * f * (g[n + 1] + g[n])
        u[n + 1] = op.solve(rhs, x0=u[n])
    return _unflatten(op, u)


def solve_sensitivity(op: CnOperator, time: TimeAxis, dF: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Linearised response to a source perturbation; the forward map with F := dF."""
    return solve_forward(op, time, dF, G)


def solve_adjoint(op: CnOperator, time: TimeAxis, rhs: np.ndarray, scheme: str = "continuous") -> np.ndarray:
    """Backward solve of -a lam_t - lap(lam) = -rhs, lam(T) = 0.

    ``continuous`` marches the CN discretisation of the continuous adjoint,
    ``A lam^n = B lam^{n+1} - dt/2 (r^{n+1} + r^n)``; it is dual to the forward
    scheme only up to O(dt^2).

    ``discrete`` is the exact transpose of the forward march under trapezoidal
    time weights tau: ``A mu^n = B mu^{n+1} - tau_{n+1} r^{n+1}`` on the step
    intervals, returned at the nodes as ``lam^0 = mu^0``,
    ``lam^n = (mu^{n-1} + mu^n) / 2``, ``lam^N = mu^{N-1}``.  With that nodal
    form the trapezoidal rule for ``int G lam dt`` is the exact derivative of
    the discrete functional.
    """
    if scheme not in ADJOINT_SCHEMES:
        raise ValueError(f"unknown adjoint scheme {scheme!r}; expected one of {ADJOINT_SCHEMES}")
    _check_time(op, time)
    r = _flat_levels(op, time, rhs, "adjoint right-hand side")
    B = op.explicit_matrix
    N = time.n_steps
    if scheme == "continuous":
        lam = np.zeros_like(r)
        for n in range(N - 1, -1, -1):
            b = B @ lam[n + 1] - 0.5 * op.dt * (r[n + 1] + r[n])
            lam[n] = op.solve(b, x0=lam[n + 1])
        return _unflatten(op, lam)

    tau = time.weights
    mu = np.zeros((N + 1, r.shape[1]))  # mu[N] is the zero terminal value
    for n in range(N - 1, -1, -1):
        b = B @ mu[n + 1] - tau[n + 1] * r[n + 1]
        mu[n] = op.solve(b, x0=mu[n + 1])
    lam = np.empty_like(r)
    lam[0] = mu[0]
    lam[1:N] = 0.5 * (mu[: N - 1] + mu[1:N])
    lam[N] = mu[N - 1]
    return _unflatten(op, lam)
