"""Simulated federation: parallel local rounds, aggregation, telemetry."""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, TextIO

import numpy as np

from .client import (
    ClientState,
    HyperParams,
    init_client,
    local_lagrangian,
    local_round,
    update_consensus_multiplier,
)
from .linalg import Array, ShapeError, polar_factor, qr_positive

EARLY_STOP_PATIENCE = 3


class AggregationError(ArithmeticError):
    """The mean of the client bases lost column rank."""


@dataclass
class RoundRecord:
    round: int
    lagrangian: float
    gap_max: float
    gap_mean: float
    duration_ms: float
    metrics: dict | None = None

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "lagrangian": self.lagrangian,
            "gap_max": self.gap_max,
            "gap_mean": self.gap_mean,
            "duration_ms": self.duration_ms,
            "metrics": self.metrics,
        }


@dataclass
class FederationRun:
    """Clients, consensus and history.

    ``V`` is the raw client mean that anchors the local W-subproblems;
    ``V_orth`` is its QR projection onto the Stiefel manifold, used when the
    consensus itself serves as a projector.
    """

    clients: list[ClientState]
    V: Array
    V_orth: Array
    hp: HyperParams
    round: int = 0
    history: list[RoundRecord] = field(default_factory=list)
    initial_lagrangian: float | None = None

    def __post_init__(self):
        if not self.clients:
            raise ValueError("a federation needs at least one client")
        shape = self.clients[0].W.shape
        for c in self.clients:
            if c.W.shape != shape:
                raise ShapeError(f"client {c.id} has W shape {c.W.shape}, expected {shape}")
        if np.shape(self.V) != shape:
            raise ShapeError(f"V shape {np.shape(self.V)} does not match client W shape {shape}")

    @property
    def d(self) -> int:
        return len(self.clients)

    def lagrangian_trace(self) -> list[float]:
        """Initial value followed by one value per completed round."""
        head = [] if self.initial_lagrangian is None else [self.initial_lagrangian]
        return head + [r.lagrangian for r in self.history]


def mean_basis(clients: list[ClientState]) -> Array:
    """(1/d) sum_i W_i, summed in client-id order."""
    if not clients:
        raise ValueError("cannot aggregate zero clients")
    ordered = sorted(clients, key=lambda c: c.id)
    total = np.zeros_like(ordered[0].W)
    for c in ordered:
        total = total + c.W
    return total / len(ordered)


def aggregate_V(clients: list[ClientState], round_index: int | None = None) -> tuple[Array, Array]:
    """Return (raw mean, QR-projected mean). A single client's W comes back exactly."""
    if len(clients) == 1:
        W = clients[0].W.copy()
        return W, W.copy()
    M = mean_basis(clients)
    Q, R = qr_positive(M)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * max(1.0, diag.max()):
        where = "" if round_index is None else f" in round {round_index}"
        raise AggregationError(f"mean of client bases is rank deficient{where}")
    return M, Q


def init_run(shards: Iterable[Array], hp: HyperParams, seed: int = 0, align: bool = True) -> FederationRun:
    """Clients from features x samples shards; V starts at the first client's basis.

    With ``align`` each initial basis is rotated within its own span towards
    V (orthogonal Procrustes). Local SVD bases of similar subspaces can
    differ by an arbitrary rotation, which the Euclidean consensus term
    would otherwise have to undo; the rotation leaves every projector, and
    so every score and Lam, unchanged.
    """
    clients = [init_client(i, X, hp.rank, seed=seed) for i, X in enumerate(shards)]
    if not clients:
        raise ValueError("a federation needs at least one client")
    V = clients[0].W.copy()
    if align:
        for c in clients[1:]:
            c.W = c.W @ polar_factor(c.W.T @ V)
    run = FederationRun(clients=clients, V=V, V_orth=V.copy(), hp=hp)
    run.initial_lagrangian = global_lagrangian(run)
    return run


def global_lagrangian(run: FederationRun) -> float:
    return float(sum(local_lagrangian(c, run.V, run.hp) for c in run.clients))


def consensus_gaps(run: FederationRun) -> Array:
    return np.array([np.linalg.norm(c.W - run.V) for c in run.clients])


def worker_count(d: int, serial: bool = False) -> int:
    """Threads for one round: hardware parallelism, capped by FEDEP_THREADS and d."""
    if serial:
        return 1
    n = os.cpu_count() or 1
    cap = os.environ.get("FEDEP_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"FEDEP_THREADS must be a positive integer, got {cap!r}") from None
    return max(1, min(n, d))


def run_round(run: FederationRun, serial: bool = False) -> FederationRun:
    """One communication round, updating ``run`` in place and returning it.

    Clients update against the current V, the coordinator aggregates, then
    each Pi steps against the new V. Clients never read each other's state
    within a round, so thread scheduling does not affect the result.
    """
    hp = run.hp
    if run.round >= hp.K_max:
        return run
    start = time.perf_counter()
    V = run.V
    workers = worker_count(run.d, serial)
    if workers == 1:
        updated = [local_round(c, V, hp) for c in run.clients]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            updated = list(pool.map(lambda c: local_round(c, V, hp), run.clients))
    V_new, V_orth = aggregate_V(updated, run.round + 1)
    run.clients = [update_consensus_multiplier(c, V_new, hp) for c in updated]
    run.V, run.V_orth = V_new, V_orth
    run.round += 1
    gaps = consensus_gaps(run)
    run.history.append(
        RoundRecord(
            round=run.round,
            lagrangian=global_lagrangian(run),
            gap_max=float(gaps.max()),
            gap_mean=float(gaps.mean()),
            duration_ms=1e3 * (time.perf_counter() - start),
        )
    )
    return run


def _relative_decrease(prev: float, cur: float) -> float:
    return (prev - cur) / max(1.0, abs(prev))


def run_to_completion(
    run: FederationRun,
    serial: bool = False,
    evaluate: Callable[[FederationRun], dict] | None = None,
    on_round: Callable[[FederationRun, RoundRecord], None] | None = None,
) -> FederationRun:
    """Rounds until K_max, or until the relative Lagrangian decrease stays
    below ``hp.epsilon`` for three consecutive rounds (epsilon > 0 only).

    ``evaluate`` fills each round's ``metrics``; ``on_round`` sees every
    finished record, e.g. to stream telemetry.
    """
    quiet = 0
    while run.round < run.hp.K_max:
        run_round(run, serial=serial)
        rec = run.history[-1]
        if evaluate is not None:
            rec.metrics = evaluate(run)
        if on_round is not None:
            on_round(run, rec)
        if run.hp.epsilon > 0:
            trace = run.lagrangian_trace()
            if len(trace) >= 2 and _relative_decrease(trace[-2], trace[-1]) < run.hp.epsilon:
                quiet += 1
            else:
                quiet = 0
            if quiet >= EARLY_STOP_PATIENCE:
                break
    return run


@dataclass
class MonotonicityViolation:
    round: int
    previous: float
    current: float

    @property
    def excess(self) -> float:
        return self.current - self.previous


def monotonicity_check(values: Iterable[float], rel_tol: float = 1e-6) -> list[MonotonicityViolation]:
    """Rounds k with L[k] > L[k-1] + rel_tol (1 + |L[k-1]|); empty means pass.

    ``values[0]`` is the state before round 1, so the reported round index
    equals the position in ``values``.
    """
    vals = [float(v) for v in values]
    if len(vals) < 2:
        raise ValueError("monotonicity check needs at least two values")
    out = []
    for k in range(1, len(vals)):
        prev, cur = vals[k - 1], vals[k]
        if not np.isfinite(cur) or cur > prev + rel_tol * (1.0 + abs(prev)):
            out.append(MonotonicityViolation(k, prev, cur))
    return out


def write_telemetry(record: RoundRecord, stream: TextIO) -> None:
    """One JSON object per line: round, lagrangian, gaps, duration_ms."""
    stream.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    stream.flush()
