import io
import json
from dataclasses import replace

import numpy as np
import pytest

from fedep.client import HyperParams, init_client, local_lagrangian
from fedep.data import SyntheticSpec, generate_synthetic
from fedep.federation import (
    AggregationError,
    FederationRun,
    aggregate_V,
    global_lagrangian,
    init_run,
    mean_basis,
    monotonicity_check,
    run_round,
    run_to_completion,
    worker_count,
    write_telemetry,
)
from fedep.linalg import ShapeError, orthonormality_error, projector_distance
from oracles import random_stiefel


def clients_with_bases(rng, bases, p=4):
    out = []
    for i, W in enumerate(bases):
        c = init_client(i, rng.standard_normal((W.shape[0], p)), W.shape[1])
        c.W = W
        out.append(c)
    return out


def test_aggregate_single_and_identical(rng):
    W = random_stiefel(rng, 6, 2)
    V, Vo = aggregate_V(clients_with_bases(rng, [W]))
    np.testing.assert_array_equal(V, W)
    np.testing.assert_array_equal(Vo, W)
    V, Vo = aggregate_V(clients_with_bases(rng, [W, W.copy(), W.copy()]))
    np.testing.assert_allclose(V, W, atol=1e-15)
    assert projector_distance(Vo, W) < 1e-12


def test_aggregate_raw_mean_oracle(rng):
    Ws = [random_stiefel(rng, 6, 2) for _ in range(3)]
    cl = clients_with_bases(rng, Ws)
    oracle = np.zeros((6, 2))
    for i in range(6):
        for j in range(2):
            oracle[i, j] = (Ws[0][i, j] + Ws[1][i, j] + Ws[2][i, j]) / 3
    V, Vo = aggregate_V(cl)
    np.testing.assert_allclose(V, oracle, atol=1e-15)
    assert orthonormality_error(Vo) < 1e-12
    # client order does not matter: summation follows client id
    V2, _ = aggregate_V(cl[::-1])
    np.testing.assert_array_equal(V, V2)


def test_aggregate_rank_deficient_names_round(rng):
    W = random_stiefel(rng, 6, 2)
    with pytest.raises(AggregationError, match="round 7"):
        aggregate_V(clients_with_bases(rng, [W, -W]), 7)
    with pytest.raises(ValueError):
        mean_basis([])


def test_run_shape_checks(rng):
    a = clients_with_bases(rng, [random_stiefel(rng, 6, 2), random_stiefel(rng, 6, 3)])
    with pytest.raises(ShapeError):
        FederationRun(a, a[0].W, a[0].W, HyperParams())
    with pytest.raises(ValueError):
        FederationRun([], np.eye(2), np.eye(2), HyperParams())


def small_run(seed=0, d=3, **hp):
    data = generate_synthetic(SyntheticSpec(n=10, p=40, m_true=2, d=d, seed=seed))
    base = dict(rank=2, K_max=5)
    base.update(hp)
    return init_run(data.shards, HyperParams(**base), seed=seed), data


def test_init_run(rng):
    run, _ = small_run()
    np.testing.assert_array_equal(run.V, run.clients[0].W)
    assert run.initial_lagrangian == pytest.approx(global_lagrangian(run))
    # alignment rotates inside each span only
    raw, _ = small_run()
    unaligned = init_run([c.X for c in raw.clients], raw.hp, align=False)
    for a, b in zip(run.clients, unaligned.clients):
        assert projector_distance(a.W, b.W) < 1e-10


def test_global_lagrangian_is_sum(rng):
    run, _ = small_run()
    run_round(run, serial=True)
    total = 0.0
    for c in run.clients:
        total += local_lagrangian(c, run.V, run.hp)
    assert global_lagrangian(run) == pytest.approx(total, rel=1e-14)
    one, _ = small_run(d=1)
    assert global_lagrangian(one) == local_lagrangian(one.clients[0], one.V, one.hp)


def test_global_lagrangian_feasible_is_objective(rng):
    run, _ = small_run()
    for c in run.clients:
        c.U = np.array(c.X - c.S)
        c.Lam = np.zeros_like(c.Lam)
        c.W = run.V.copy()
    hp = run.hp
    obj = sum(
        np.linalg.norm(c.U - c.W @ (c.W.T @ c.U)) ** 2
        + hp.alpha * np.abs(c.S).sum()
        + hp.beta * np.linalg.norm(c.W, axis=1).sum()
        for c in run.clients
    )
    assert global_lagrangian(run) == pytest.approx(obj, rel=1e-12)


def test_run_round_k_max_zero():
    run, _ = small_run(K_max=0)
    before = [c.W.copy() for c in run.clients]
    run_round(run)
    assert run.round == 0 and run.history == []
    for b, c in zip(before, run.clients):
        np.testing.assert_array_equal(b, c.W)


def test_run_round_frozen_w_gives_mean():
    run, _ = small_run(T_max=0, alpha=0.0, beta=0.0)
    W0 = [c.W.copy() for c in run.clients]
    run_round(run, serial=True)
    np.testing.assert_allclose(run.V, sum(W0) / len(W0), atol=1e-15)
    assert run.round == 1 and len(run.history) == 1


def test_consensus_gap_decreases():
    data = generate_synthetic(SyntheticSpec(seed=3))
    run = init_run(data.shards, HyperParams(K_max=10), seed=3)
    run_to_completion(run, serial=True)
    gaps = [r.gap_max for r in run.history]
    assert gaps[-1] < gaps[0]


def test_run_to_completion_counts():
    run, _ = small_run(K_max=1)
    run_to_completion(run)
    assert run.round == 1
    run, _ = small_run(K_max=6, epsilon=0.0)
    run_to_completion(run)
    assert run.round == 6


def test_early_stop():
    run, _ = small_run(K_max=50, epsilon=0.5)
    run_to_completion(run, serial=True)
    assert run.round < 50
    assert run.round >= 3


def test_serial_and_parallel_identical(monkeypatch):
    monkeypatch.setenv("FEDEP_THREADS", "4")
    a, _ = small_run(d=4, K_max=4)
    b, _ = small_run(d=4, K_max=4)
    run_to_completion(a, serial=True)
    run_to_completion(b, serial=False)
    np.testing.assert_array_equal(a.V, b.V)
    for x, y in zip(a.clients, b.clients):
        for name in ("W", "S", "U", "Lam", "Pi"):
            np.testing.assert_array_equal(getattr(x, name), getattr(y, name))
    assert [r.lagrangian for r in a.history] == [r.lagrangian for r in b.history]


def test_worker_count(monkeypatch):
    monkeypatch.delenv("FEDEP_THREADS", raising=False)
    assert worker_count(5, serial=True) == 1
    assert 1 <= worker_count(2) <= 2
    monkeypatch.setenv("FEDEP_THREADS", "1")
    assert worker_count(8) == 1
    monkeypatch.setenv("FEDEP_THREADS", "x")
    with pytest.raises(ValueError):
        worker_count(8)


def test_monotonicity_check_examples():
    assert monotonicity_check([5.0, 4.0, 3.0, 2.9]) == []
    v = monotonicity_check([5.0, 4.0, 4.5, 3.0])
    assert [x.round for x in v] == [2]
    assert v[0].excess == pytest.approx(0.5)
    assert monotonicity_check([1.0, 1.0 + 1e-7]) == []  # within tolerance
    assert [x.round for x in monotonicity_check([1.0, float("nan")])] == [1]
    with pytest.raises(ValueError):
        monotonicity_check([1.0])


def test_evaluate_callback_and_telemetry():
    run, _ = small_run(K_max=3)
    buf = io.StringIO()
    run_to_completion(run, evaluate=lambda r: {"round_seen": r.round},
                      on_round=lambda r, rec: write_telemetry(rec, buf))
    assert [r.metrics["round_seen"] for r in run.history] == [1, 2, 3]
    lines = [json.loads(x) for x in buf.getvalue().splitlines()]
    assert [x["round"] for x in lines] == [1, 2, 3]
    assert {"lagrangian", "gap_max", "gap_mean", "duration_ms"} <= set(lines[0])


def test_history_length_and_trace():
    run, _ = small_run(K_max=4)
    run_to_completion(run)
    assert len(run.history) == run.round == 4
    assert len(run.lagrangian_trace()) == 5
    assert monotonicity_check(run.lagrangian_trace()) == []


def test_aggregation_failure_leaves_run_untouched(monkeypatch):
    import fedep.federation as fed

    run, _ = small_run(K_max=3)
    run_round(run)
    snap = [c.W.copy() for c in run.clients]

    def boom(clients, round_index=None):
        raise AggregationError(f"rank deficient in round {round_index}")

    monkeypatch.setattr(fed, "aggregate_V", boom)
    with pytest.raises(AggregationError):
        run_round(run)
    assert run.round == 1
    for s, c in zip(snap, run.clients):
        np.testing.assert_array_equal(s, c.W)


def test_ablation_degeneracy():
    # beta = 0 projects case3 onto case1 and case4 onto case2 exactly
    def final(**hp):
        run, _ = small_run(**hp)
        return run_to_completion(run, serial=True)

    np.testing.assert_array_equal(final(beta=0.0, ablation="case3").V, final(beta=0.0, ablation="case1").V)
    np.testing.assert_array_equal(final(beta=0.0, ablation="case4").V, final(beta=0.0, ablation="case2").V)
    # case1 ignores alpha and beta entirely
    np.testing.assert_array_equal(final(alpha=0.3, beta=0.1, ablation="case1").V,
                                  final(alpha=0.0, beta=0.0, ablation="case1").V)


def test_alpha_zero_leaves_s_free_rather_than_pinned():
    # alpha = 0 under case4 means an unpenalized S, which is not case1's S = 0
    a, _ = small_run(alpha=0.0, beta=0.0, ablation="case4", K_max=2)
    run_to_completion(a, serial=True)
    assert any(np.any(c.S != 0) for c in a.clients)
