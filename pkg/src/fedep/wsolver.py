"""Per-client W-subproblem on the Stiefel manifold.

Minimizes ``F(W) = H(W) + beta * ||W||_{2,1}`` over St(n, m) with

    H(W) = ||U - W W^T U||_F^2 + (nu / 2) ||W - Z||_F^2

by a manifold proximal gradient method. Each outer step solves the
tangent-constrained proximal subproblem through its symmetric multiplier
``theta`` with a regularized semi-smooth Newton (SSN) iteration, then
backtracks along a QR retraction until an Armijo-type decrease holds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .linalg import (
    Array,
    DegenerateStepError,
    ShapeError,
    l21_norm,
    power_norm_sq,
    prox_l21,
    retract,
    sym,
)

MIN_LINE_SEARCH_STEP = 1e-12


class SsnConvergenceError(ArithmeticError):
    """SSN did not reach the residual tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class StalledDescentError(ArithmeticError):
    """Backtracking shrank the step below ``MIN_LINE_SEARCH_STEP``."""


class WSolverWarning(RuntimeWarning):
    pass


def default_step_size(U: Array, nu: float) -> float:
    """1 / (2 ||U||_2^2 + nu), with ||U||_2 from five power iterations."""
    return 1.0 / (2.0 * power_norm_sq(U, steps=5) + nu)


@dataclass(frozen=True)
class WSubproblem:
    """Data and solver settings for one W-update.

    ``Z`` is the consensus anchor ``V - Pi / nu``. ``t=None`` picks
    :func:`default_step_size`.
    """

    U: Array
    Z: Array
    beta: float
    nu: float
    t: float | None = None
    gamma: float = 0.5
    T_max: int = 5
    ssn_tol: float = 1e-8
    ssn_max_iter: int = 50

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        if U.ndim != 2 or Z.ndim != 2 or U.shape[0] != Z.shape[0]:
            raise ShapeError(f"U {U.shape} and Z {Z.shape} need the same row count")
        if self.nu <= 0:
            raise ValueError("nu must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        t = default_step_size(U, self.nu) if self.t is None else float(self.t)
        if t <= 0:
            raise ValueError("step size t must be positive")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "t", t)


@dataclass
class SsnResult:
    theta: Array
    D: Array
    residual: float
    iterations: int


def _check_w(W: Array, prob: WSubproblem) -> Array:
    W = np.asarray(W, dtype=float)
    if W.shape != prob.Z.shape:
        raise ShapeError(f"W shape {W.shape} does not match Z shape {prob.Z.shape}")
    return W


def smooth_objective(W: Array, prob: WSubproblem) -> float:
    W = _check_w(W, prob)
    R = prob.U - W @ (W.T @ prob.U)
    return float(np.sum(R * R) + 0.5 * prob.nu * np.sum((W - prob.Z) ** 2))


def full_objective(W: Array, prob: WSubproblem) -> float:
    return smooth_objective(W, prob) + prob.beta * l21_norm(W)


def euclidean_gradient(W: Array, prob: WSubproblem) -> Array:
    """-2 U U^T W + nu (W - Z), the gradient after using W^T W = I."""
    W = _check_w(W, prob)
    return -2.0 * prob.U @ (prob.U.T @ W) + prob.nu * (W - prob.Z)


def direction_from_multiplier(theta: Array, W: Array, grad: Array, prob: WSubproblem) -> Array:
    """D(theta) = prox_{t beta}(W - t (grad - W theta)) - W."""
    t = prob.t
    B = W - t * (grad - W @ theta)
    return prox_l21(B, t * prob.beta) - W


def constraint_residual(theta: Array, W: Array, grad: Array, prob: WSubproblem) -> Array:
    """Q(theta) = D^T W + W^T D; zero iff D(theta) is tangent at W."""
    D = direction_from_multiplier(theta, W, grad, prob)
    WtD = W.T @ D
    return WtD + WtD.T


def _sym_from_vec(v: Array, m: int, iu) -> Array:
    T = np.zeros((m, m))
    T[iu] = v
    return T + T.T - np.diag(np.diag(T))


def _residual_jacobian(theta: Array, W: Array, grad: Array, prob: WSubproblem, iu) -> Array:
    """Generalized Jacobian of theta -> Q(theta)[iu] in upper-triangular coordinates.

    Rows of B shrunk to zero by the prox contribute nothing; the others use
    the derivative of b -> (1 - tau/||b||) b.
    """
    n, m = W.shape
    t = prob.t
    tau = t * prob.beta
    B = W - t * (grad - W @ theta)
    norms = np.linalg.norm(B, axis=1)
    active = norms > tau
    s = len(iu[0])
    # symmetric basis E_k, one per upper-triangular coordinate
    E = np.zeros((s, m, m))
    E[np.arange(s), iu[0], iu[1]] = 1.0
    E[np.arange(s), iu[1], iu[0]] = 1.0
    dB = t * np.einsum("ij,kjl->kil", W, E)  # (s, n, m)
    dP = np.zeros_like(dB)
    if np.any(active):
        b = B[active]
        r = norms[active]
        bhat = b / r[:, None]
        db = dB[:, active, :]
        radial = np.einsum("kil,il->ki", db, bhat)
        dP[:, active, :] = db - (tau / r)[None, :, None] * (db - radial[:, :, None] * bhat[None])
    WtdP = np.einsum("ij,kil->kjl", W, dP)
    dQ = WtdP + np.transpose(WtdP, (0, 2, 1))
    return dQ[:, iu[0], iu[1]].T


def ssn_solve(W: Array, grad: Array, prob: WSubproblem, theta0: Array | None = None) -> SsnResult:
    """Find a symmetric ``theta`` with ||Q(theta)||_F <= ssn_tol.

    Starts from sym(W^T grad), the exact root when beta = 0. Newton systems
    carry Tikhonov regularization 1e-8 (1 + ||Q||_F); a step that does not
    reduce the residual falls back to theta <- theta - Q(theta) / (2t).
    """
    W = _check_w(W, prob)
    m = W.shape[1]
    iu = np.triu_indices(m)
    theta = sym(W.T @ grad) if theta0 is None else sym(theta0)
    Q = constraint_residual(theta, W, grad, prob)
    res = float(np.linalg.norm(Q))
    it = 0
    while res > prob.ssn_tol:
        if it >= prob.ssn_max_iter:
            raise SsnConvergenceError(
                f"SSN stopped after {it} iterations with ||Q||_F = {res:.3e}", res
            )
        it += 1
        q = Q[iu]
        J = _residual_jacobian(theta, W, grad, prob, iu)
        lam = 1e-8 * (1.0 + res)
        try:
            step = np.linalg.solve(J + lam * np.eye(len(q)), -q)
        except np.linalg.LinAlgError:
            step = None
        accepted = False
        if step is not None and np.all(np.isfinite(step)):
            dtheta = _sym_from_vec(step, m, iu)
            s = 1.0
            for _ in range(30):
                cand = theta + s * dtheta
                Qc = constraint_residual(cand, W, grad, prob)
                rc = float(np.linalg.norm(Qc))
                if rc <= (1.0 - 1e-4 * s) * res:
                    theta, Q, res, accepted = cand, Qc, rc, True
                    break
                s *= 0.5
        if not accepted:
            cand = theta - Q / (2.0 * prob.t)
            Qc = constraint_residual(cand, W, grad, prob)
            theta, Q, res = cand, Qc, float(np.linalg.norm(Qc))
    D = direction_from_multiplier(theta, W, grad, prob)
    return SsnResult(theta=theta, D=D, residual=res, iterations=it)


def line_search_step(
    W: Array,
    D: Array,
    prob: WSubproblem,
    objective: Callable[[Array], float] | None = None,
    F0: float | None = None,
) -> tuple[Array, float]:
    """Backtrack a = 1, gamma, gamma^2, ... until
    F(Retr_W(a D)) <= F(W) - a / (2t) ||D||_F^2."""
    if objective is None:
        objective = lambda X: full_objective(X, prob)  # noqa: E731
    if F0 is None:
        F0 = objective(W)
    dd = float(np.sum(D * D))
    if dd == 0.0:
        raise ValueError("line search needs a nonzero direction")
    a = 1.0
    while a >= MIN_LINE_SEARCH_STEP:
        try:
            W_new = retract(W, a * D)
        except DegenerateStepError:
            a *= prob.gamma
            continue
        if objective(W_new) <= F0 - a / (2.0 * prob.t) * dd:
            return W_new, a
        a *= prob.gamma
    raise StalledDescentError(f"no sufficient decrease down to step {a / prob.gamma:.1e}")


@dataclass
class WSolveInfo:
    objective: list[float] = field(default_factory=list)
    steps: list[float] = field(default_factory=list)
    ssn_iterations: list[int] = field(default_factory=list)
    stalled: bool = False


def solve_w_subproblem(W0: Array, prob: WSubproblem, info: WSolveInfo | None = None) -> Array:
    """Run ``T_max`` manifold proximal gradient steps from ``W0``.

    Numerical trouble (SSN failure after step-size halving, or a stalled
    line search) is reported as a :class:`WSolverWarning` and the current
    iterate is returned; F never increases along the way.
    """
    W = _check_w(W0, prob).copy()
    if info is None:
        info = WSolveInfo()
    F = full_objective(W, prob)
    info.objective.append(F)
    for _ in range(prob.T_max):
        grad = euclidean_gradient(W, prob)
        local = prob
        result = None
        for _retry in range(6):
            try:
                result = ssn_solve(W, grad, local)
                break
            except SsnConvergenceError:
                local = replace(local, t=local.t / 2.0)
        if result is None:
            warnings.warn("SSN failed to converge; keeping current W", WSolverWarning, stacklevel=2)
            info.stalled = True
            break
        info.ssn_iterations.append(result.iterations)
        D = result.D
        # required decrease below roundoff in F: stationary to working precision
        if float(np.sum(D * D)) / (2.0 * local.t) <= 1e-13 * max(1.0, abs(F)):
            break
        try:
            W_new, a = line_search_step(W, D, local, F0=F)
        except StalledDescentError:
            warnings.warn("line search stalled; keeping current W", WSolverWarning, stacklevel=2)
            info.stalled = True
            break
        W = W_new
        F = full_objective(W, prob)
        info.objective.append(F)
        info.steps.append(a)
    return W
