"""Differentiable model-predictive control with quadratic tracking costs.

The MPC problem is condensed to a dense box-and-state-constrained QP in the
stacked control sequence, solved with a primal-dual interior-point method,
and differentiated with respect to the tracked reference by fixing the
active set and solving the reduced KKT system.

Orderings used throughout:
  stacked controls  u_bar = [u_0; ...; u_{F-1}]           (m*F,)
  stacked states    x_bar = [x_1; ...; x_F]               (n*F,)
  stacked reference s_bar = [s_1; ...; s_F]               (n*F,)
Constraint rows of the condensed QP cover all control bounds first
(identity rows), then all state bounds (rows of Gamma).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    Infeasible,
    MaxIterations,
    NotPositiveDefinite,
    SingularReducedSystem,
    WeaklyActiveWarning,
)
from .linalg import CholeskyFactor

ACTIVE_SLACK_TOL = 1e-6
ACTIVE_DUAL_TOL = 1e-6
WEAK_TOL = 1e-5
DEFAULT_QP_TOL = 1e-8
QP_MAX_ITER = 100


@dataclass
class MpcProblem:
    A: np.ndarray  # (n, n)
    B: np.ndarray  # (n, m)
    Q: np.ndarray  # (n, n) PD
    R: np.ndarray  # (m, m) PD
    horizon: int
    u_min: np.ndarray
    u_max: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        n, m = self.A.shape[0], self.B.shape[1]
        self.u_min = np.broadcast_to(np.asarray(self.u_min, dtype=float), (m,)).copy()
        self.u_max = np.broadcast_to(np.asarray(self.u_max, dtype=float), (m,)).copy()
        self.x_min = np.broadcast_to(np.asarray(self.x_min, dtype=float), (n,)).copy()
        self.x_max = np.broadcast_to(np.asarray(self.x_max, dtype=float), (n,)).copy()
        if self.A.shape != (n, n) or self.B.shape[0] != n:
            raise DimensionMismatch("A must be n x n and B n x m")
        if self.Q.shape != (n, n) or self.R.shape != (m, m):
            raise DimensionMismatch("Q must be n x n and R m x m")
        for W, name in ((self.Q, "Q"), (self.R, "R")):
            try:
                CholeskyFactor(W)
            except NotPositiveDefinite:
                raise NotPositiveDefinite(f"{name} must be positive definite") from None
        if np.any(self.u_min >= self.u_max) or np.any(self.x_min >= self.x_max):
            raise Infeasible("bounds must satisfy min < max elementwise")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass
class CondensedQp:
    H: np.ndarray               # (mF, mF) PD, = 2(Gamma' Qbar Gamma + Rbar)
    g: np.ndarray               # (mF,)
    constraint_matrix: np.ndarray  # (mF + nF, mF), [I; Gamma]
    lower: np.ndarray
    upper: np.ndarray
    constant: float


@dataclass
class MpcSolution:
    u: np.ndarray               # (m, F)
    x: np.ndarray               # (n, F+1), includes x0
    duals_lower: np.ndarray
    duals_upper: np.ndarray
    active_set: list            # [(constraint row, "lower"|"upper"), ...]
    weakly_active: list = field(default_factory=list)
    qp_objective: float = 0.0


class Condenser:
    """Precomputed state-elimination matrices for one MpcProblem."""

    def __init__(self, problem: MpcProblem):
        self.problem = problem
        n, m, F = problem.n, problem.m, problem.horizon
        self.n, self.m, self.F = n, m, F
        self.d = m * F
        A, B = problem.A, problem.B
        powers = [np.eye(n)]
        for _ in range(F):
            powers.append(A @ powers[-1])
        self.Phi = np.vstack([powers[t] for t in range(1, F + 1)])  # (nF, n)
        Gamma = np.zeros((n * F, m * F))
        for t in range(1, F + 1):
            for j in range(t):
                Gamma[(t - 1) * n : t * n, j * m : (j + 1) * m] = powers[t - 1 - j] @ B
        self.Gamma = Gamma
        self.Qbar = np.kron(np.eye(F), problem.Q)
        self.Rbar = np.kron(np.eye(F), problem.R)
        self.QG = self.Qbar @ Gamma                       # (nF, mF)
        self.H = 2.0 * (Gamma.T @ self.QG + self.Rbar)
        self.H = 0.5 * (self.H + self.H.T)
        self.cholH = CholeskyFactor(self.H)
        self.M = np.vstack([np.eye(self.d), Gamma])       # (mF + nF, mF)
        self.k0 = self.M.shape[0]
        self.u_lower = np.tile(problem.u_min, F)
        self.u_upper = np.tile(problem.u_max, F)
        self.x_lower = np.tile(problem.x_min, F)
        self.x_upper = np.tile(problem.x_max, F)

    def stack_refs(self, refs: np.ndarray) -> np.ndarray:
        """(N, n, F) or (n, F) reference values -> stacked s_bar."""
        refs = np.asarray(refs, dtype=float)
        if refs.ndim == 2:
            return refs.T.reshape(-1)
        return refs.transpose(0, 2, 1).reshape(refs.shape[0], -1)

    def qp_vectors(self, X0: np.ndarray, refs: np.ndarray):
        """Batched linear terms and bounds: g, lower, upper, constant."""
        X0 = np.atleast_2d(np.asarray(X0, dtype=float))      # (N, n)
        sbar = self.stack_refs(refs)
        sbar = np.atleast_2d(sbar)                           # (N, nF)
        e = X0 @ self.Phi.T - sbar                           # Phi x0 - s_bar
        g = 2.0 * (e @ self.QG)                              # (N, mF)
        const = np.einsum("ni,ij,nj->n", e, self.Qbar, e)
        free = X0 @ self.Phi.T                               # free-evolution states
        lower = np.concatenate(
            [np.broadcast_to(self.u_lower, (X0.shape[0], self.d)),
             self.x_lower[None, :] - free], axis=1)
        upper = np.concatenate(
            [np.broadcast_to(self.u_upper, (X0.shape[0], self.d)),
             self.x_upper[None, :] - free], axis=1)
        return g, lower, upper, const


def condense(problem: MpcProblem, x0: np.ndarray, ref: np.ndarray) -> CondensedQp:
    """Eliminate states and return the dense QP in the stacked controls."""
    c = Condenser(problem)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    ref = np.asarray(ref, dtype=float)
    if ref.ndim == 1:
        ref = ref.reshape(problem.n, -1)
    if x0.size != problem.n or ref.shape != (problem.n, problem.horizon):
        raise DimensionMismatch(
            f"x0 size {x0.size} / ref shape {ref.shape} inconsistent with problem"
        )
    g, lower, upper, const = c.qp_vectors(x0[None, :], ref[None, :, :])
    return CondensedQp(c.H, g[0], c.M, lower[0], upper[0], float(const[0]))


def _max_step(v: np.ndarray, dv: np.ndarray) -> np.ndarray:
    """Largest alpha in (0, 1] with v + alpha*dv >= 0, per batch row."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0.0, -v / dv, np.inf)
    return np.minimum(1.0, ratio.min(axis=1))


def solve_qp_batch(H: np.ndarray, g: np.ndarray, M: np.ndarray,
                   lower: np.ndarray, upper: np.ndarray,
                   tol: float = DEFAULT_QP_TOL, max_iter: int = QP_MAX_ITER,
                   cholH: CholeskyFactor | None = None):
    """Solve a batch of QPs  min 1/2 z'Hz + g'z  s.t. lower <= Mz <= upper.

    H and M are shared across the batch; g and the bounds vary.  Uses a
    Mehrotra-style predictor-corrector interior point, reduced to an SPD
    Schur system in z at each iteration.  Instances whose unconstrained
    minimizer is already feasible are accepted directly with zero duals.

    Returns (z, duals_lower, duals_upper) with shapes (N, d), (N, k0), (N, k0).
    """
    H = np.asarray(H, dtype=float)
    g = np.atleast_2d(np.asarray(g, dtype=float))
    M = np.asarray(M, dtype=float)
    N, d = g.shape
    k0 = M.shape[0]
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (N, k0)).copy()
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (N, k0)).copy()
    if M.shape[1] != d or H.shape != (d, d):
        raise DimensionMismatch("H, g, M dimensions are inconsistent")
    if np.any(lower > upper):
        raise Infeasible("lower bound exceeds upper bound")
    if cholH is None:
        cholH = CholeskyFactor(H)

    Z = -cholH.solve(g.T).T                                  # unconstrained optima
    lam = np.zeros((N, 2 * k0))
    MZ = Z @ M.T
    violated = np.any((MZ > upper) | (MZ < lower), axis=1)
    idx = np.flatnonzero(violated)
    if idx.size == 0:
        return Z, lam[:, k0:], lam[:, :k0]

    # inequality form G z <= h with rows [M; -M], h = [upper; -lower]
    G = np.vstack([M, -M])
    k = 2 * k0
    h = np.concatenate([upper[idx], -lower[idx]], axis=1)
    gi = g[idx]
    z = Z[idx]
    s = np.maximum(h - z @ G.T, 1.0)
    lm = 1.0 / s
    n_sub = idx.size
    done = np.zeros(n_sub, dtype=bool)

    for it in range(max_iter + 1):
        r_d = z @ H + gi + lm @ G
        r_p = z @ G.T + s - h
        comp = lm * s
        res = np.maximum(np.abs(r_d).max(axis=1),
                         np.maximum(np.abs(r_p).max(axis=1), comp.max(axis=1)))
        done = res <= tol
        if done.all():
            break
        if it == max_iter:
            raise MaxIterations(
                f"{int((~done).sum())} QP instances unconverged after {max_iter} iterations"
            )
        act = ~done
        za, sa, la = z[act], s[act], lm[act]
        rda, rpa, ca = r_d[act], r_p[act], comp[act]
        w = la / sa
        GW = G[None, :, :] * w[:, :, None]
        schur = H[None, :, :] + np.matmul(G.T[None, :, :], GW)

        def newton(rc):
            rhs = -rda - ((la * rpa - rc) / sa) @ G
            dz = np.linalg.solve(schur, rhs[:, :, None])[:, :, 0]
            ds = -rpa - dz @ G.T
            dl = (-rc - la * ds) / sa
            return dz, ds, dl

        dz_a, ds_a, dl_a = newton(ca)
        alpha_a = np.minimum(_max_step(sa, ds_a), _max_step(la, dl_a))
        mu = ca.mean(axis=1)
        mu_aff = ((sa + alpha_a[:, None] * ds_a)
                  * (la + alpha_a[:, None] * dl_a)).mean(axis=1)
        sigma = (np.clip(mu_aff / np.maximum(mu, 1e-300), 0.0, 1.0)) ** 3
        rc = ca - (sigma * mu)[:, None] + ds_a * dl_a
        dz, ds, dl = newton(rc)
        eta = np.maximum(0.995, 1.0 - mu)
        alpha = np.minimum(_max_step(sa, ds), _max_step(la, dl))
        alpha = np.minimum(1.0, eta * alpha)[:, None]
        z[act] = za + alpha * dz
        s[act] = np.maximum(sa + alpha * ds, 1e-300)
        lm[act] = np.maximum(la + alpha * dl, 1e-300)

    Z[idx] = z
    lam[idx] = lm
    return Z, lam[:, k0:], lam[:, :k0]


def solve_qp(qp: CondensedQp, tol: float = DEFAULT_QP_TOL):
    """Single-instance wrapper; returns (z, duals_lower, duals_upper)."""
    Z, lo, up = solve_qp_batch(qp.H, qp.g[None, :], qp.constraint_matrix,
                               qp.lower[None, :], qp.upper[None, :], tol=tol)
    return Z[0], lo[0], up[0]


def _classify(qp: CondensedQp, z, duals_lower, duals_upper):
    Mz = qp.constraint_matrix @ z
    slack_lo = Mz - qp.lower
    slack_up = qp.upper - Mz
    active, weak = [], []
    for i in range(len(Mz)):
        for slack, dual, side in ((slack_lo[i], duals_lower[i], "lower"),
                                  (slack_up[i], duals_upper[i], "upper")):
            if slack < ACTIVE_SLACK_TOL and dual > ACTIVE_DUAL_TOL:
                active.append((i, side))
            elif slack < WEAK_TOL and dual < WEAK_TOL:
                weak.append((i, side))
    return active, weak


def solve_mpc(problem: MpcProblem, x0: np.ndarray, ref: np.ndarray) -> MpcSolution:
    """Condense, solve, and roll out; records the active set for the vjp."""
    qp = condense(problem, x0, ref)
    z, duals_lower, duals_upper = solve_qp(qp)
    n, m, F = problem.n, problem.m, problem.horizon
    u = z.reshape(F, m).T
    x = np.zeros((n, F + 1))
    x[:, 0] = np.asarray(x0, dtype=float).reshape(-1)
    for t in range(F):
        x[:, t + 1] = problem.A @ x[:, t] + problem.B @ u[:, t]
    active, weak = _classify(qp, z, duals_lower, duals_upper)
    obj = 0.5 * z @ qp.H @ z + qp.g @ z + qp.constant
    return MpcSolution(u, x, duals_lower, duals_upper, active, weak, float(obj))


def control_cost(problem: MpcProblem, x0: np.ndarray, u: np.ndarray,
                 ref: np.ndarray) -> float:
    """Roll out the dynamics and sum tracking and effort terms directly.

    Stage tracking is indexed on post-transition states x_1..x_F against
    s_1..s_F; the terminal term is the t = F element.  Kept independent of
    the condensed form so the two can cross-check each other.
    """
    u = np.asarray(u, dtype=float).reshape(problem.m, -1)
    ref = np.asarray(ref, dtype=float).reshape(problem.n, -1)
    F = problem.horizon
    if u.shape[1] != F or ref.shape[1] != F:
        raise DimensionMismatch("u and ref must have horizon columns")
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    total = 0.0
    for t in range(F):
        total += float(u[:, t] @ problem.R @ u[:, t])
        x = problem.A @ x + problem.B @ u[:, t]
        err = x - ref[:, t]
        total += float(err @ problem.Q @ err)
    return total


def control_cost_grad_u(problem: MpcProblem, x0: np.ndarray, u: np.ndarray,
                        ref: np.ndarray) -> np.ndarray:
    """Exact gradient of control_cost in u: H u_bar + g of the condensed QP."""
    qp = condense(problem, x0, ref)
    u = np.asarray(u, dtype=float).reshape(problem.m, -1)
    ubar = u.T.reshape(-1)
    grad = qp.H @ ubar + qp.g
    return grad.reshape(problem.horizon, problem.m).T


def reduced_kkt_solve(cond: Condenser, active_rows: list[int],
                      upstream_bar: np.ndarray) -> np.ndarray:
    """z-block of the reduced KKT inverse applied to [upstream; 0].

    Active constraints are treated as equalities; the system is solved via
    an SPD Schur complement in the active multipliers.
    """
    w0 = cond.cholH.solve(upstream_bar)
    if not active_rows:
        return w0
    MA = cond.M[active_rows, :]
    Y = cond.cholH.solve(MA.T)
    S = MA @ Y
    try:
        eta = CholeskyFactor(0.5 * (S + S.T)).solve(MA @ w0)
    except NotPositiveDefinite:
        raise SingularReducedSystem(
            "active constraint rows are linearly dependent"
        ) from None
    return w0 - Y @ eta


def mpc_vjp(problem: MpcProblem, solution: MpcSolution,
            upstream: np.ndarray) -> np.ndarray:
    """Pull upstream = dL/du* back to dL/dref through the QP solution map.

    Fixes the recorded active set, solves the reduced KKT adjoint system,
    and applies dg/dref = -2 Gamma' Qbar restricted to the reference block.
    Weakly active constraints (slack and dual both tiny) are treated as
    inactive; a warning flags that the derivative is a subgradient choice.
    """
    cond = Condenser(problem)
    upstream = np.asarray(upstream, dtype=float).reshape(problem.m, -1)
    if upstream.shape[1] != problem.horizon:
        raise DimensionMismatch("upstream must be m x F")
    if solution.weakly_active:
        warnings.warn(
            f"{len(solution.weakly_active)} weakly active constraints; "
            "returning one subgradient choice", WeaklyActiveWarning)
    rows = sorted({i for i, _ in solution.active_set})
    w = reduced_kkt_solve(cond, rows, upstream.T.reshape(-1))
    dref_bar = 2.0 * (cond.QG @ w)                      # = 2 Qbar Gamma w
    return dref_bar.reshape(problem.horizon, problem.n).T


def riccati_lqt(problem: MpcProblem, x0: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Unconstrained tracking optimum via a backward Riccati/affine recursion.

    Test oracle for solve_mpc when no bound is active; ignores the box
    constraints entirely.
    """
    A, B, Q, R = problem.A, problem.B, problem.Q, problem.R
    n, m, F = problem.n, problem.m, problem.horizon
    ref = np.asarray(ref, dtype=float).reshape(n, F)
    # cost-to-go after step t:  x' P x + 2 p' x + c  (c not tracked)
    P = np.zeros((n, n))
    p = np.zeros(n)
    Ks = [None] * F
    ks = [None] * F
    for t in range(F - 1, -1, -1):
        Mt = Q + P                       # weight on x_{t+1}
        qt = p - Q @ ref[:, t]           # linear term on x_{t+1}
        inv = np.linalg.inv(R + B.T @ Mt @ B)
        Ks[t] = -inv @ B.T @ Mt @ A
        ks[t] = -inv @ B.T @ qt
        P_new = A.T @ Mt @ (A + B @ Ks[t])
        P = 0.5 * (P_new + P_new.T)
        p = A.T @ (Mt @ (B @ ks[t]) + qt)
    u = np.zeros((m, F))
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    for t in range(F):
        u[:, t] = Ks[t] @ x + ks[t]
        x = A @ x + B @ u[:, t]
    return u
