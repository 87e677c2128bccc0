"""One gateway's local ADMM state and update stage."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .linalg import Array, ShapeError, frobenius_inner, l21_norm, qr_positive, soft_threshold
from .wsolver import WSolveInfo, WSubproblem, solve_w_subproblem

ABLATIONS = ("case1", "case2", "case3", "case4")


@dataclass(frozen=True)
class HyperParams:
    """Model weights, penalties and solver settings.

    ``ablation`` projects the full model onto the reduced objectives:
    case1 drops S and the row-sparsity term, case2 drops the row-sparsity
    term, case3 drops S, case4 is the full model.
    """

    alpha: float = 0.5
    beta: float = 0.02
    mu: float = 3.0
    nu: float = 0.1
    rank: int = 5
    t: float | None = None
    gamma: float = 0.5
    T_max: int = 5
    ssn_tol: float = 1e-8
    ssn_max_iter: int = 50
    K_max: int = 30
    epsilon: float = 0.0
    ablation: str = "case4"

    def __post_init__(self):
        if self.mu <= 0 or self.nu <= 0:
            raise ValueError("mu and nu must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.K_max < 0 or self.T_max < 0:
            raise ValueError("K_max and T_max must be nonnegative")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")

    @property
    def uses_S(self) -> bool:
        return self.ablation in ("case2", "case4")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.uses_S else 0.0

    @property
    def effective_beta(self) -> float:
        return self.beta if self.ablation in ("case3", "case4") else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(**d)


@dataclass
class ClientState:
    """Local variables of client ``id``; ``X`` is features x samples and read-only."""

    id: int
    X: Array
    W: Array
    S: Array
    U: Array
    Lam: Array
    Pi: Array
    last_solve: WSolveInfo | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        X.flags.writeable = False
        self.X = X
        n, p = X.shape
        m = np.shape(self.W)[1]
        for name, shape in (("W", (n, m)), ("S", (n, p)), ("U", (n, p)), ("Lam", (n, p)), ("Pi", (n, m))):
            if np.shape(getattr(self, name)) != shape:
                raise ShapeError(f"client {self.id}: {name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    @property
    def n_features(self) -> int:
        return self.X.shape[0]

    @property
    def n_samples(self) -> int:
        return self.X.shape[1]


def initial_basis(X: Array, rank: int, seed: int = 0) -> Array:
    """Top-``rank`` left singular vectors of X with a deterministic sign.

    Each column is flipped so its largest-magnitude entry is positive. With
    fewer samples than ``rank`` a seeded Gaussian basis is used instead.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if rank > n:
        raise ValueError(f"rank {rank} exceeds feature count {n}")
    if p < rank:
        G = np.random.default_rng(seed).standard_normal((n, rank))
        return qr_positive(G)[0]
    u, _, _ = np.linalg.svd(X, full_matrices=False)
    W = u[:, :rank]
    idx = np.argmax(np.abs(W), axis=0)
    W = W * np.sign(W[idx, np.arange(rank)])
    return qr_positive(W)[0]


def init_client(cid: int, X: Array, rank: int, seed: int = 0) -> ClientState:
    """S = 0, U = X, Pi = 0, W from :func:`initial_basis`.

    Lam starts at 2 (I - W W^T) X, the value the U-update optimality
    condition ties it to after every round, so the first dual step is no
    larger than later ones.
    """
    X = np.asarray(X, dtype=float)
    W = initial_basis(X, rank, seed=seed + cid)
    n, p = X.shape
    return ClientState(
        id=cid,
        X=X,
        W=W,
        S=np.zeros((n, p)),
        U=X.copy(),
        Lam=2.0 * (X - W @ (W.T @ X)),
        Pi=np.zeros((n, rank)),
    )


def update_S(state: ClientState, hp: HyperParams) -> Array:
    """S = soft_threshold(X - U + Lam/mu, alpha/mu); pinned to zero when S is ablated."""
    if not hp.uses_S:
        return np.zeros_like(state.X)
    M = state.X - state.U + state.Lam / hp.mu
    return soft_threshold(M, hp.alpha / hp.mu)


def update_U(state: ClientState, hp: HyperParams) -> Array:
    """Closed-form minimizer of ||(I - W W^T) U||^2 + mu/2 ||U - Y||^2.

    Y = X - S + Lam/mu; the inverse of 2(I - W W^T) + mu I comes from the
    Woodbury identity.
    """
    mu = hp.mu
    Y = state.X - state.S + state.Lam / mu
    W = state.W
    return (mu / (mu + 2.0)) * Y + (2.0 / (mu + 2.0)) * (W @ (W.T @ Y))


def lambda_step(state: ClientState, hp: HyperParams) -> Array:
    """Lam + mu (X - S - U): ascent on the data-split multiplier."""
    return state.Lam + hp.mu * (state.X - state.S - state.U)


def pi_step(state: ClientState, V: Array, hp: HyperParams) -> Array:
    """Pi - nu (W - V) for the consensus multiplier; V is this round's aggregate."""
    return state.Pi - hp.nu * (state.W - V)


def update_multipliers(state: ClientState, V: Array, hp: HyperParams) -> tuple[Array, Array]:
    return lambda_step(state, hp), pi_step(state, V, hp)


def w_subproblem(state: ClientState, V: Array, hp: HyperParams) -> WSubproblem:
    return WSubproblem(
        U=state.U,
        Z=V - state.Pi / hp.nu,
        beta=hp.effective_beta,
        nu=hp.nu,
        t=hp.t,
        gamma=hp.gamma,
        T_max=hp.T_max,
        ssn_tol=hp.ssn_tol,
        ssn_max_iter=hp.ssn_max_iter,
    )


def local_round(state: ClientState, V: Array, hp: HyperParams) -> ClientState:
    """Local update stage against the current consensus V: W, S, U, then Lam.

    Pi needs the aggregate produced from this round's W's, so the federator
    applies :func:`update_consensus_multiplier` after aggregation. The input
    state is left untouched.
    """
    V = np.asarray(V, dtype=float)
    if V.shape != state.W.shape:
        raise ShapeError(f"V shape {V.shape} does not match W shape {state.W.shape}")
    info = WSolveInfo()
    W = solve_w_subproblem(state.W, w_subproblem(state, V, hp), info)
    new = replace(state, W=W, last_solve=info)
    new.S = update_S(new, hp)
    new.U = update_U(new, hp)
    new.Lam = lambda_step(new, hp)
    return new


def update_consensus_multiplier(state: ClientState, V: Array, hp: HyperParams) -> ClientState:
    return replace(state, Pi=pi_step(state, V, hp))


def local_lagrangian(state: ClientState, V: Array, hp: HyperParams) -> float:
    """Per-client augmented Lagrangian L_i at the current variables."""
    W, U = state.W, state.U
    PU = U - W @ (W.T @ U)
    r = state.X - state.S - state.U
    c = state.W - V
    return float(
        np.sum(PU * PU)
        + hp.effective_alpha * np.abs(state.S).sum()
        + hp.effective_beta * l21_norm(W)
        + frobenius_inner(state.Lam, r)
        + 0.5 * hp.mu * np.sum(r * r)
        + frobenius_inner(state.Pi, c)
        + 0.5 * hp.nu * np.sum(c * c)
    )
