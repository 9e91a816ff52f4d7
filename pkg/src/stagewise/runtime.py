"""Threshold-based early exit over a trained multi-stage model.

A sample stops at the first stage ``i < s`` whose top-1 softmax confidence is
at least ``t_i``; otherwise the last stage answers.  Exiting after stage ``i``
costs ``accumulated[i]`` MACs, because earlier stages' features are cached and
reused rather than recomputed.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import tensor as T
from .trainer import TraceTable
from .transform import MultiStageModel, StageRunner

NEVER_EXIT = 1.01


def compute_reward(acc: float, cost: float, omega: float) -> float:
    """``acc * cost ** omega``; cost is normalised (dimensionless) and positive."""
    if not 0.0 <= acc <= 1.0:
        raise ValueError(f"accuracy {acc} outside [0, 1]")
    if cost <= 0:
        raise ValueError(f"cost must be positive, got {cost}")
    return float(acc) * float(cost) ** float(omega)


@dataclass(frozen=True)
class ThresholdPolicy:
    thresholds: tuple[float, ...]

    def __post_init__(self):
        for t in self.thresholds:
            if not (0.0 <= t <= 1.0 or t == NEVER_EXIT):
                raise ValueError(f"threshold {t} outside [0, 1] and not the never-exit sentinel")

    @property
    def s(self) -> int:
        return len(self.thresholds) + 1

    @classmethod
    def parse(cls, text: str) -> "ThresholdPolicy":
        text = text.strip()
        return cls(tuple(float(v) for v in text.split(",")) if text else ())

    def __str__(self) -> str:
        return ",".join(f"{t:g}" for t in self.thresholds)


@dataclass(frozen=True)
class ExitStats:
    exits: tuple[int, ...]  # samples leaving at each stage
    hits: tuple[int, ...]  # correct predictions among them
    accumulated: tuple[int, ...]

    @property
    def n(self) -> int:
        return sum(self.exits)

    @property
    def fractions(self) -> tuple[float, ...]:
        return tuple(e / self.n for e in self.exits)

    @property
    def stage_accuracy(self) -> tuple[float, ...]:
        """Accuracy among the samples that exit at each stage (nan if none do)."""
        return tuple(h / e if e else float("nan") for h, e in zip(self.hits, self.exits))

    @property
    def accuracy(self) -> float:
        return sum(self.hits) / self.n

    @property
    def mean_macs(self) -> Fraction:
        return Fraction(sum(e * a for e, a in zip(self.exits, self.accumulated)), self.n)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "fraction", "accuracy", "exits", "macs"])
        for i, (f, a, e, m) in enumerate(zip(self.fractions, self.stage_accuracy, self.exits, self.accumulated)):
            w.writerow([i + 1, repr(f), repr(a), e, m])
        w.writerow(["overall", repr(1.0), repr(self.accuracy), self.n, repr(float(self.mean_macs))])
        return buf.getvalue()


def _exit_stage(conf: np.ndarray, thresholds: Sequence[float]) -> np.ndarray:
    n, s = conf.shape
    stage = np.full(n, s - 1, dtype=np.int64)
    pending = np.ones(n, dtype=bool)
    for i, t in enumerate(thresholds):
        go = pending & (conf[:, i] >= t)
        stage[go] = i
        pending &= ~go
    return stage


def simulate_policy(trace: TraceTable, policy: ThresholdPolicy | Sequence[float]) -> ExitStats:
    """Replay a policy over recorded confidences; no network evaluation."""
    th = policy.thresholds if isinstance(policy, ThresholdPolicy) else tuple(policy)
    if len(th) != trace.s - 1:
        raise ValueError(f"policy has {len(th)} thresholds, trace has {trace.s} stages")
    stage = _exit_stage(trace.confidence, th)
    ok = trace.correct[np.arange(trace.n), stage]
    exits = np.bincount(stage, minlength=trace.s)
    hits = np.bincount(stage, weights=ok, minlength=trace.s)
    return ExitStats(tuple(int(e) for e in exits), tuple(int(h) for h in hits), tuple(trace.accumulated))


def infer(msm: MultiStageModel, weights, sample: np.ndarray, policy: ThresholdPolicy) -> tuple[int, int, int]:
    """Early-exit inference of one ``[C, H, W]`` sample.

    Returns ``(predicted label, exit stage (1-based), MACs charged)``.
    """
    if len(policy.thresholds) != msm.s - 1:
        raise ValueError(f"policy has {len(policy.thresholds)} thresholds for {msm.s} stages")
    x = np.asarray(sample)
    if x.ndim == 3:
        x = x[None]
    with T.no_grad():
        runner = StageRunner(msm, weights, x)
        for i in range(msm.s):
            logits = runner.next_stage()
            p = T.softmax(logits.data.astype(np.float64))[0]
            if i == msm.s - 1 or p.max() >= policy.thresholds[i]:
                return int(p.argmax()), i + 1, msm.accumulated[i]
    raise AssertionError("unreachable")


def infer_dataset(msm: MultiStageModel, weights, dataset, policy: ThresholdPolicy) -> ExitStats:
    xs = dataset.x(next(iter(weights.values())).dtype)
    exits = [0] * msm.s
    hits = [0] * msm.s
    for x, y in zip(xs, dataset.labels):
        label, stage, _ = infer(msm, weights, x, policy)
        exits[stage - 1] += 1
        hits[stage - 1] += int(label == y)
    return ExitStats(tuple(exits), tuple(hits), msm.accumulated)


# -- sweeps -------------------------------------------------------------------

def default_grid(step: float = 0.05) -> tuple[float, ...]:
    n = int(round(1.0 / step))
    if n < 1 or abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"grid step {step} must divide 1")
    return tuple(round(i * step, 10) for i in range(n + 1)) + (NEVER_EXIT,)


@dataclass(frozen=True)
class TradeoffPoint:
    thresholds: tuple[float, ...]
    mean_macs: Fraction
    accuracy: float
    reward: float
    pareto: bool = False


def sweep_thresholds(
    trace: TraceTable,
    grid: Sequence[float] | None = None,
    omega: float = -0.06,
    base_macs: int | None = None,
) -> list[TradeoffPoint]:
    """Every policy in the Cartesian grid, sorted by mean MACs, Pareto points flagged.

    Rewards use ``mean MACs / base_macs`` as the cost (``base_macs`` defaults
    to the last stage's accumulated MACs).
    """
    grid = default_grid() if grid is None else tuple(grid)
    if not grid:
        raise ValueError("empty threshold grid")
    base = base_macs or trace.accumulated[-1]
    raw = []
    for th in itertools.product(grid, repeat=trace.s - 1):
        st = simulate_policy(trace, th)
        acc = st.accuracy
        raw.append((st.mean_macs, th, acc, compute_reward(acc, float(st.mean_macs / base), omega)))
    raw.sort(key=lambda r: (r[0], r[1]))
    points = []
    best_acc = -1.0
    # scanning by ascending cost, a point is on the frontier iff it beats every cheaper one
    i = 0
    while i < len(raw):
        j = i
        while j < len(raw) and raw[j][0] == raw[i][0]:
            j += 1
        tier_best = max(r[2] for r in raw[i:j])
        for m, th, acc, rew in raw[i:j]:
            points.append(TradeoffPoint(th, m, acc, rew, acc == tier_best and acc > best_acc))
        best_acc = max(best_acc, tier_best)
        i = j
    return points


def select_thresholds(
    trace: TraceTable,
    omega: float,
    base_macs: int | None = None,
    grid: Sequence[float] | None = None,
) -> tuple[ThresholdPolicy, TradeoffPoint]:
    """Highest-reward grid policy; ties go to lower MACs, then smaller thresholds."""
    points = sweep_thresholds(trace, grid, omega, base_macs)
    best = min(points, key=lambda p: (-p.reward, p.mean_macs, p.thresholds))
    return ThresholdPolicy(best.thresholds), best


def sweep_csv(points: Sequence[TradeoffPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    s1 = len(points[0].thresholds) if points else 0
    w.writerow([f"t_{i + 1}" for i in range(s1)] + ["mean_macs", "accuracy", "reward", "pareto_flag"])
    for p in points:
        w.writerow([f"{t:g}" for t in p.thresholds] + [repr(float(p.mean_macs)), repr(p.accuracy), repr(p.reward), int(p.pareto)])
    return buf.getvalue()
