from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagewise.data import Dataset
from stagewise.graph import load_model
from stagewise.runtime import (
    NEVER_EXIT,
    ExitStats,
    ThresholdPolicy,
    compute_reward,
    default_grid,
    infer,
    infer_dataset,
    select_thresholds,
    simulate_policy,
    sweep_csv,
    sweep_thresholds,
)
from stagewise.trainer import TraceTable, build_trace_table
from stagewise.transform import GroupSetting, TransformSetting, apply_transform, init_stage_weights


def random_trace(rng, n=None, s=None, K=3) -> TraceTable:
    n = n or int(rng.integers(1, 60))
    s = s or int(rng.integers(2, 5))
    acc = tuple(int(v) for v in np.cumsum(rng.integers(1, 10**6, s)))
    return TraceTable(
        rng.integers(0, K, n),
        rng.uniform(1 / K, 1, (n, s)),
        rng.integers(0, K, (n, s)),
        acc,
        K,
    )


# -- reward ---------------------------------------------------------------------------

def test_reward_examples():
    assert compute_reward(0.9, 0.5, -0.06) == pytest.approx(0.93822, abs=1e-5)
    assert compute_reward(0.7, 0.3, 0.0) == 0.7
    assert compute_reward(0.0, 0.01, -0.06) == 0.0
    with pytest.raises(ValueError):
        compute_reward(0.5, 0.0, -0.06)
    with pytest.raises(ValueError):
        compute_reward(1.5, 0.5, -0.06)


def test_reward_monotonicity():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a, b = np.sort(rng.uniform(0.01, 1, 2))
        c1, c2 = np.sort(rng.uniform(0.01, 2, 2))
        if a == b or c1 == c2:
            continue
        assert compute_reward(a, c1, -0.06) < compute_reward(b, c1, -0.06)
        assert compute_reward(a, c1, -0.06) > compute_reward(a, c2, -0.06)


# -- policies and stats ----------------------------------------------------------------

def test_policy_parse_and_validation():
    p = ThresholdPolicy.parse("0.5, 1.01")
    assert p.thresholds == (0.5, NEVER_EXIT) and p.s == 3
    assert str(p) == "0.5,1.01"
    with pytest.raises(ValueError):
        ThresholdPolicy((1.2,))


def test_mean_macs_arithmetic():
    stats = ExitStats((5, 3, 2), (5, 3, 2), (10_000_000, 20_000_000, 40_000_000))
    assert stats.mean_macs == 19_000_000
    assert stats.fractions == (0.5, 0.3, 0.2)


def test_table_shaped_report():
    exits = (1024, 4159, 4817)
    hits = (1010, 3900, 4300)
    stats = ExitStats(exits, hits, (10, 25, 41))
    assert abs(sum(stats.fractions) - 1) < 1e-12
    weighted = sum(f * a for f, a in zip(stats.fractions, stats.stage_accuracy))
    assert weighted == pytest.approx(stats.accuracy, abs=1e-12)
    lines = stats.to_csv().splitlines()
    assert lines[0] == "stage,fraction,accuracy,exits,macs"
    assert lines[1].startswith("1,0.1024,")
    assert len(lines) == 5


def test_confident_stage_one_takes_everything():
    rng = np.random.default_rng(1)
    t = random_trace(rng, n=20, s=3)
    t.confidence[:, 0] = 1.0
    assert simulate_policy(t, (0.9, 0.9)).fractions == (1.0, 0.0, 0.0)


def test_threshold_extremes():
    rng = np.random.default_rng(2)
    t = random_trace(rng, n=30, s=3)
    assert simulate_policy(t, (0.0, 0.0)).exits == (30, 0, 0)
    assert simulate_policy(t, (NEVER_EXIT, NEVER_EXIT)).exits == (0, 0, 30)


def test_stage_mismatch_rejected():
    t = random_trace(np.random.default_rng(3), s=3)
    with pytest.raises(ValueError):
        simulate_policy(t, (0.5,))


def test_accounting_identity_on_random_traces():
    rng = np.random.default_rng(4)
    for _ in range(100):
        t = random_trace(rng)
        for _ in range(100):
            th = tuple(rng.choice(default_grid(), t.s - 1))
            stats = simulate_policy(t, th)
            assert stats.mean_macs == Fraction(sum(e * a for e, a in zip(stats.exits, t.accumulated)), t.n)
            assert abs(sum(stats.fractions) - 1) < 1e-12
            assert t.accumulated[0] <= stats.mean_macs <= t.accumulated[-1]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_mean_macs_monotone_in_each_threshold(seed):
    rng = np.random.default_rng(seed)
    t = random_trace(rng, s=3)
    grid = default_grid()
    table = {(a, b): simulate_policy(t, (a, b)).mean_macs for a in grid for b in grid}
    for (a, b), m in table.items():
        for a2 in grid:
            if a2 > a:
                assert table[(a2, b)] >= m
        for b2 in grid:
            if b2 > b:
                assert table[(a, b2)] >= m


# -- sweeps ---------------------------------------------------------------------------

def test_sweep_point_count_and_sentinel():
    rng = np.random.default_rng(5)
    t = random_trace(rng, n=40, s=2)
    pts = sweep_thresholds(t)
    assert len(pts) == 22
    sentinel = [p for p in pts if p.thresholds == (NEVER_EXIT,)][0]
    assert sentinel.mean_macs == t.accumulated[-1]
    assert sentinel.accuracy == t.stage_accuracy(1)
    macs = [p.mean_macs for p in pts]
    assert macs == sorted(macs)
    with pytest.raises(ValueError):
        sweep_thresholds(t, grid=())


def test_pareto_flags_are_a_frontier():
    rng = np.random.default_rng(6)
    t = random_trace(rng, n=50, s=3)
    pts = sweep_thresholds(t)
    front = [p for p in pts if p.pareto]
    assert front
    for p in front:
        assert not any(q.mean_macs <= p.mean_macs and q.accuracy > p.accuracy for q in pts)


def test_select_matches_sweep_max():
    rng = np.random.default_rng(7)
    for _ in range(20):
        t = random_trace(rng, s=3)
        pts = sweep_thresholds(t, omega=-0.06)
        policy, best = select_thresholds(t, -0.06)
        assert best.reward == max(p.reward for p in pts)
        tied = [p for p in pts if p.reward == best.reward]
        assert best.mean_macs == min(p.mean_macs for p in tied)
        assert policy.thresholds == best.thresholds


def test_select_omega_zero_maximises_accuracy():
    rng = np.random.default_rng(8)
    t = random_trace(rng, n=40, s=3)
    _, best = select_thresholds(t, 0.0)
    assert best.accuracy == max(p.accuracy for p in sweep_thresholds(t))


def test_select_prefers_early_exit_when_stage_one_is_perfect():
    rng = np.random.default_rng(9)
    t = random_trace(rng, n=25, s=2)
    t.confidence[:, 0] = 1.0
    t.predicted[:, 0] = t.labels
    policy, best = select_thresholds(t, -0.06)
    assert best.mean_macs == t.accumulated[0]
    assert policy.thresholds == (0.0,)


def test_sweep_csv_header():
    t = random_trace(np.random.default_rng(10), n=10, s=3)
    lines = sweep_csv(sweep_thresholds(t)).splitlines()
    assert lines[0] == "t_1,t_2,mean_macs,accuracy,reward,pareto_flag"
    assert len(lines) == 1 + 22 * 22


def test_grid_step_must_divide_one():
    assert len(default_grid(0.25)) == 6
    with pytest.raises(ValueError):
        default_grid(0.3)


# -- live inference -------------------------------------------------------------------

def test_live_inference_matches_trace_replay(small_data):
    _, va, _ = small_data
    g = load_model("toy6")
    msm = apply_transform(g, TransformSetting(4, 3, (
        GroupSetting((0, 1, 2, 4), frozenset({(1, 2)})),
        GroupSetting((0, 2, 3, 4), frozenset({(2, 3)})),
    )))
    w = init_stage_weights(msm, 0, np.float32)
    ds = Dataset(va.images[:30], va.labels[:30], va.num_classes)
    trace = build_trace_table(msm, w, ds)
    xs = ds.x(np.float32)
    grid = (0.0, 0.34, 0.36, 0.4, NEVER_EXIT)
    for th in [(a, b) for a in grid for b in grid][::3]:
        policy = ThresholdPolicy(th)
        assert infer_dataset(msm, w, ds, policy) == simulate_policy(trace, th)
    # per-sample agreement on charged MACs
    policy = ThresholdPolicy((0.35, 0.36))
    for i in range(len(ds.labels)):
        label, stage, macs = infer(msm, w, xs[i], policy)
        conf = trace.confidence[i]
        expect = 0 if conf[0] >= 0.35 else 1 if conf[1] >= 0.36 else 2
        assert stage == expect + 1
        assert macs == msm.accumulated[expect]
        assert label == trace.predicted[i, expect]
