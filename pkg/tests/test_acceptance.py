"""Acceptance criteria 1-10, one PASS/FAIL line each.

The lines are printed as each check finishes and repeated in the terminal
summary under "acceptance criteria".  Criteria 9 and 10 run the toy search
end to end and take several minutes on one core.
"""

import io
import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE, random_graph
from helpers import gradcheck
from stagewise.controller import modal_setting
from stagewise.data import synthetic_splits
from stagewise.graph import count_flops, forward_static, init_weights, is_trainable, load_model
from stagewise.runtime import (
    ThresholdPolicy,
    compute_reward,
    default_grid,
    infer_dataset,
    select_thresholds,
    simulate_policy,
)
from stagewise.search import SearchConfig, retrain, search, strip_durations, synthetic_reward
from stagewise.tensor import Tensor
from stagewise.trainer import TraceTable, TrainConfig, build_trace_table, joint_loss, train
from stagewise.transform import (
    GroupSetting,
    TransformSetting,
    all_settings,
    apply_transform,
    decode_key,
    decode_setting,
    encode_setting,
    enumerate_split_options,
    forward_stages,
    init_stage_weights,
    random_setting,
    space_size,
    weights_from_base,
)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


# 1 ---------------------------------------------------------------------------------

TABLE1 = {"resnet20": 41e6, "resnet56": 126e6, "resnet110": 254e6, "vgg16bn": 313e6}


def test_criterion_01_flops_oracle():
    t0 = time.perf_counter()
    devs = {name: count_flops(load_model(name)).total / ref - 1 for name, ref in TABLE1.items()}
    ok = all(abs(d) <= 0.03 for d in devs.values())
    text = " ".join(f"{k}={100 * d:+.2f}%" for k, d in devs.items())
    record(1, ok, f"MACs vs reference: {text} ({time.perf_counter() - t0:.2f}s)")
    assert ok


# 2 ---------------------------------------------------------------------------------

def test_criterion_02_gradients():
    t0 = time.perf_counter()
    worst, n_nets, max_params, concats = 0.0, 0, 0, 0
    for seed in range(24):
        g = random_graph(seed)
        rng = np.random.default_rng(seed)
        # two stages put concat edges (and the forced head concat) into the graph
        msm = apply_transform(g, random_setting(rng, len(g.groups), 2, 2))
        w = init_stage_weights(msm, seed)
        params = {k: v for k, v in w.items() if is_trainable(k)}
        stats = {k: v for k, v in w.items() if not is_trainable(k)}
        max_params = max(max_params, sum(v.size for v in params.values()))
        concats += len(msm.concat_edges) > 0
        C, H, W = g.input_shape
        x = rng.standard_normal((3, C, H, W))
        y = rng.integers(0, g.layers[-1].out, 3)

        def loss(P):
            Q = dict(P)
            Q.update({k: Tensor(v.copy()) for k, v in stats.items()})
            return joint_loss(forward_stages(msm, Q, x, training=True), y, [1.0, 1.0])

        worst = max(worst, gradcheck(loss, params, rng=rng, max_entries=20))
        n_nets += 1
    ok = worst < 1e-4 and n_nets >= 20 and max_params <= 5000
    record(2, ok, f"{n_nets} nets, <= {max_params} params, {concats} with concat edges, "
                  f"max rel err {worst:.2e} ({time.perf_counter() - t0:.1f}s)")
    assert ok


# 3 ---------------------------------------------------------------------------------

def test_criterion_03_identity_transform():
    t0 = time.perf_counter()
    fails = 0
    for trial in range(100):
        g = random_graph(trial) if trial % 4 else load_model("toy6")
        w = init_weights(g, trial)
        msm = apply_transform(g, TransformSetting.identity(g, 1 + trial % 4 if trial % 4 else 4))
        rng = np.random.default_rng(trial)
        x = rng.standard_normal((2,) + g.input_shape)
        same = forward_stages(msm, weights_from_base(msm, w), x)[0].data.tobytes() == forward_static(g, w, x).data.tobytes()
        fails += not (same and msm.accumulated == (count_flops(g).total,))
    big = load_model("resnet20")
    fails += apply_transform(big, TransformSetting.identity(big, 8)).accumulated != (count_flops(big).total,)
    record(3, fails == 0, f"100 trials + resnet20, {fails} mismatches ({time.perf_counter() - t0:.1f}s)")
    assert fails == 0


# 4 ---------------------------------------------------------------------------------

def brute_splits(G: int, s: int) -> list[tuple[int, ...]]:
    """Split vectors from every subset of the G-1 interior cut positions."""
    out = []
    for mask in range(1 << (G - 1)):
        cuts = [i + 1 for i in range(G - 1) if mask >> i & 1]
        if len(cuts) == s - 1:
            out.append((0, *cuts, G))
    return sorted(out)


def brute_space(k: int, G: int, s: int) -> int:
    locs = [(i, j) for i in range(1, s + 1) for j in range(i + 1, s + 1)]
    per_group = [
        GroupSetting(p, frozenset(c for c, on in zip(locs, bits) if on))
        for p in brute_splits(G, s)
        for bits in itertools.product((0, 1), repeat=len(locs))
    ]
    return sum(1 for _ in itertools.product(per_group, repeat=k))


def test_criterion_04_combinatorics():
    t0 = time.perf_counter()
    bad = [(G, s) for G in range(1, 9) for s in range(1, G + 1)
           if sorted(enumerate_split_options(G, s)) != brute_splits(G, s)]
    bad += [(k, G, s) for k in (1, 2) for G in range(1, 5) for s in range(1, min(G, 3) + 1)
            if not space_size(k, G, s) == brute_space(k, G, s) == sum(1 for _ in all_settings(k, G, s))]
    n21 = len(enumerate_split_options(8, 3))
    ok = not bad and n21 == 21 == math.comb(7, 2)
    record(4, ok, f"split/space counts vs brute force, {len(bad)} mismatches, G=8 s=3 -> {n21} "
                  f"({time.perf_counter() - t0:.2f}s)")
    assert ok


# 5 ---------------------------------------------------------------------------------

def test_criterion_05_invariants_fuzz():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    models = [(load_model("resnet20"), 8), (load_model("toy6"), 4), (load_model("vgg16bn"), 8)]
    failures = []
    for i in range(1000):
        g, G = models[i % len(models)]
        s = int(rng.integers(1, 5))
        setting = random_setting(rng, len(g.groups), G, s)
        msm = apply_transform(g, setting)
        problems = []
        for k in g.conv_layers():
            owned = sorted(c for j in range(s) for c in msm.ops[j][k].out_idx)
            if owned != list(range(g.layers[k].out)):
                problems.append("partition")
        if any(a >= b for a, b, _ in msm.concat_edges):
            problems.append("triangular")
        if any(msm.ops[j][g.head].sources != tuple(range(j + 1)) for j in range(s)):
            problems.append("final concat")
        acc = msm.accumulated
        if not all(a < b for a, b in zip(acc, acc[1:])):
            problems.append("accumulated")
        if decode_setting(encode_setting(setting), len(g.groups), G, s) != setting:
            problems.append("roundtrip")
        if decode_key(setting.key(), len(g.groups), G, s) != setting:
            problems.append("key")
        if problems:
            failures.append((i, problems))
    record(5, not failures, f"1000 settings over 3 models, {len(failures)} violations "
                            f"({time.perf_counter() - t0:.1f}s)")
    assert not failures


# 6 ---------------------------------------------------------------------------------

def random_trace(rng, s):
    n = int(rng.integers(5, 80))
    K = int(rng.integers(2, 11))
    acc = tuple(int(v) for v in np.cumsum(rng.integers(1, 10 ** 7, s)))
    conf = rng.uniform(1 / K, 1, (n, s))
    conf[rng.random((n, s)) < 0.1] = 1.0
    return TraceTable(rng.integers(0, K, n), conf, rng.integers(0, K, (n, s)), acc, K)


def test_criterion_06_runtime_accounting():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    grid = default_grid()
    identity_errors = monotone_errors = 0
    for i in range(100):
        t = random_trace(rng, 2 + i % 3)
        for _ in range(100):
            th = tuple(float(v) for v in rng.choice(grid, t.s - 1))
            st = simulate_policy(t, th)
            expect = sum(Fraction(e, st.n) * a for e, a in zip(st.exits, t.accumulated))
            identity_errors += st.mean_macs != expect
        if t.s <= 3:
            table = {th: simulate_policy(t, th).mean_macs for th in itertools.product(grid, repeat=t.s - 1)}
            for th, m in table.items():
                for d in range(t.s - 1):
                    for v in grid:
                        if v > th[d]:
                            up = th[:d] + (v,) + th[d + 1:]
                            monotone_errors += table[up] < m
        else:
            for _ in range(300):
                th = [float(v) for v in rng.choice(grid, t.s - 1)]
                d = int(rng.integers(0, t.s - 1))
                up = list(th)
                up[d] = float(rng.choice([v for v in grid if v >= th[d]]))
                monotone_errors += simulate_policy(t, up).mean_macs < simulate_policy(t, th).mean_macs

    # live early-exit inference against trace replay on the toy model
    _, va, _ = synthetic_splits(sizes=(60, 60, 60))
    g = load_model("toy6")
    msm = apply_transform(g, TransformSetting(4, 3, (
        GroupSetting((0, 1, 2, 4), frozenset({(1, 2)})),
        GroupSetting((0, 1, 3, 4), frozenset({(1, 3), (2, 3)})),
    )))
    w = init_stage_weights(msm, 6, np.float32)
    w = {k: (v * 3 if k.endswith(f"L{g.head}.w") else v) for k, v in w.items()}  # spread the confidences
    trace = build_trace_table(msm, w, va)
    qs = np.quantile(trace.confidence[:, :2], [0.2, 0.5, 0.8])
    live_errors = 0
    for th in itertools.product([0.0, *map(float, qs), 1.01], repeat=2):
        live_errors += infer_dataset(msm, w, va, ThresholdPolicy(th)) != simulate_policy(trace, th)
    ok = identity_errors == monotone_errors == live_errors == 0
    record(6, ok, f"identity errors {identity_errors}, monotonicity violations {monotone_errors}, "
                  f"live/replay mismatches {live_errors} ({time.perf_counter() - t0:.1f}s)")
    assert ok


# 7 ---------------------------------------------------------------------------------

def test_criterion_07_reward():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    spot = compute_reward(0.9, 0.5, -0.06)
    ok = abs(spot - 0.93822) <= 1e-5
    bad = 0
    for _ in range(1000):
        acc, cost = rng.uniform(0, 1), rng.uniform(0.01, 2)
        bad += compute_reward(acc, cost, 0.0) != acc
        a2, c2 = acc + rng.uniform(1e-3, 1 - acc + 1e-3) * (acc < 0.999), cost * rng.uniform(1.01, 3)
        if a2 > acc and a2 <= 1:
            bad += not compute_reward(a2, cost, -0.06) > compute_reward(acc, cost, -0.06)
        if acc > 0:
            bad += not compute_reward(acc, c2, -0.06) < compute_reward(acc, cost, -0.06)
    ok = ok and bad == 0
    record(7, ok, f"(0.9, 0.5, -0.06) -> {spot:.6f}, {bad} identity/monotonicity failures "
                  f"({time.perf_counter() - t0:.2f}s)")
    assert ok


# 8 ---------------------------------------------------------------------------------

BANDIT_SEEDS = range(20)


def bandit_run(seed: int):
    arms = list(all_settings(1, 4, 2))
    best = arms[seed % len(arms)]
    fn = synthetic_reward(lambda st: 1.0 if st == best else 0.5, seed)
    buf = io.StringIO()
    res = search(1, SearchConfig(G=4, s=2, budget=500, seed=seed), reward_fn=fn, log_file=buf)
    return modal_setting(res.controller) == best, buf.getvalue().splitlines()


@pytest.fixture(scope="module")
def bandit_runs():
    t0 = time.perf_counter()
    runs = [bandit_run(seed) for seed in BANDIT_SEEDS]
    return runs, time.perf_counter() - t0


def test_criterion_08_bandit(bandit_runs):
    runs, secs = bandit_runs
    hits = sum(ok for ok, _ in runs)
    ok = len(runs[0][1]) > 0 and hits >= math.ceil(0.95 * len(runs))
    record(8, ok, f"6-arm space ({space_size(1, 4, 2)} settings), budget 500: best arm modal in "
                  f"{hits}/{len(runs)} seeds ({secs:.1f}s)")
    assert ok


# 9 ---------------------------------------------------------------------------------

TOY_TRAIN = TrainConfig(epochs=12, batch_size=64, lr=0.1, warmup_iters=50, seed=0)
TOY_SEARCH = SearchConfig(G=4, s=2, budget=200, inner_epochs=2, trajectories=8, top_k=1, seed=0)


def toy_search(graph, data):
    tr, va, _ = data
    buf = io.StringIO()
    res = search(graph, TOY_SEARCH, tr, va, TOY_TRAIN, log_file=buf, threads=1)
    return res, buf.getvalue().splitlines()


@pytest.fixture(scope="module")
def toy_run(toy_data):
    g = load_model("toy6")
    t0 = time.perf_counter()
    res, lines = toy_search(g, toy_data)
    return g, res, lines, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_09_toy_end_to_end(toy_run, toy_data):
    g, res, _, search_secs = toy_run
    tr, va, te = toy_data
    t0 = time.perf_counter()
    base = count_flops(g).total
    identity = [r for r in res.records if decode_key(r.key, g, 4, 2).groups[0].split == (0, 4)]
    msm, w, _ = retrain(res.best, g, TOY_SEARCH.G, TOY_SEARCH.s, tr, TOY_TRAIN)
    policy, _ = select_thresholds(build_trace_table(msm, w, va), TOY_SEARCH.omega, base)
    dyn = simulate_policy(build_trace_table(msm, w, te), policy)
    static = apply_transform(g, TransformSetting.identity(g))
    sw, _ = train(static, init_stage_weights(static, TOY_TRAIN.seed, np.float32), tr, TOY_TRAIN)
    static_acc = build_trace_table(static, sw, te).stage_accuracy(0)
    ratio = float(dyn.mean_macs / base)
    ok = ratio <= 0.75 and dyn.accuracy >= static_acc - 0.02
    record(9, ok, f"best {res.best.key} (reward {res.best.reward:.4f}), thresholds {policy}: "
                  f"dynamic acc {dyn.accuracy:.4f} at {100 * ratio:.1f}% MACs, static acc {static_acc:.4f} "
                  f"(search {search_secs:.0f}s + train {time.perf_counter() - t0:.0f}s)")
    assert ok
    assert all(res.best.reward >= r.reward for r in res.records + identity)


# 10 --------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_10_determinism(bandit_runs, toy_run, toy_data):
    t0 = time.perf_counter()
    runs, _ = bandit_runs
    bandit_same = sum(
        strip_durations(bandit_run(seed)[1]) == strip_durations(lines)
        for seed, (_, lines) in zip(BANDIT_SEEDS, runs)
    )
    g, _, lines, _ = toy_run
    _, again = toy_search(g, toy_data)
    toy_same = strip_durations(again) == strip_durations(lines)
    ok = bandit_same == len(runs) and toy_same and len(lines) > 0
    record(10, ok, f"bandit logs identical {bandit_same}/{len(runs)}, toy search log identical: {toy_same} "
                   f"({len(lines)} lines, durations excluded; {time.perf_counter() - t0:.0f}s)")
    assert ok
