"""Reinforcement-learning search over transformation settings.

Each round samples a batch of settings from the controller, scores every one
(approximate training, trace on the validation split, best-threshold
reward), then runs a clipped PPO update on the batch.  Scores are cached by
setting key, so a repeated sample costs nothing but still counts against the
budget and still feeds the update.
"""

from __future__ import annotations

import logging
import math
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import multiprocessing as mp

import numpy as np

from . import tensor as T
from .controller import Controller, Sample, init_controller, rollout, sample_architectures
from .data import Dataset
from .graph import ModelGraph, count_flops
from .optim import Adam, zero_grad
from .runtime import compute_reward, default_grid, select_thresholds
from .tensor import Tensor
from .trainer import TrainConfig, TrainingDiverged, approx_train, build_trace_table, train
from .transform import TransformSetting, apply_transform, decode_key, init_stage_weights

log = logging.getLogger(__name__)

__all__ = [
    "SearchConfig",
    "RewardRecord",
    "PPOStats",
    "SearchResult",
    "candidate_seed",
    "compute_reward",
    "evaluate_candidate",
    "ppo_loss",
    "ppo_update",
    "search",
    "retrain",
    "synthetic_reward",
    "strip_durations",
]


@dataclass(frozen=True)
class SearchConfig:
    G: int = 8
    s: int = 3
    omega: float = -0.06
    budget: int = 10_000
    inner_epochs: int = 6
    trajectories: int = 8
    ppo_epochs: int = 4
    clip: float = 0.1
    minibatch: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    lr: float = 1e-3
    top_k: int = 10
    seed: int = 0
    grid_step: float = 0.05

    def __post_init__(self):
        if self.omega > 0:
            raise ValueError(f"omega must be <= 0, got {self.omega}")
        if self.trajectories < 1 or self.budget < self.trajectories:
            raise ValueError(f"need budget >= trajectories >= 1, got {self.budget} and {self.trajectories}")
        if not 1 <= self.s <= self.G:
            raise ValueError(f"need 1 <= s <= G, got s={self.s}, G={self.G}")
        if self.minibatch < 1 or self.ppo_epochs < 1 or not 0 < self.clip < 1:
            raise ValueError("bad PPO hyperparameters")


@dataclass(frozen=True)
class RewardRecord:
    key: str
    acc: float
    cost: float
    reward: float
    thresholds: tuple[float, ...]
    seconds: float
    seed: int
    mean_macs: Fraction = Fraction(0)
    diverged: bool = False

    def fields(self, cached: bool = False) -> dict[str, str]:
        return {
            "encoding": self.key,
            "acc": repr(self.acc),
            "cost": repr(self.cost),
            "reward": repr(self.reward),
            "thresholds": ",".join(f"{t:g}" for t in self.thresholds) or "-",
            "seed": str(self.seed),
            "macs": f"{self.mean_macs.numerator}/{self.mean_macs.denominator}",
            "diverged": str(int(self.diverged)),
            "cached": str(int(cached)),
            "duration": f"{self.seconds:.3f}",
        }


def format_fields(kind: str, fields: dict[str, str]) -> str:
    return " ".join([kind] + [f"{k}={v}" for k, v in fields.items()])


def parse_log_line(line: str) -> tuple[str, dict[str, str]]:
    kind, *rest = line.split()
    return kind, dict(part.split("=", 1) for part in rest)


def candidate_seed(seed: int, key: str) -> int:
    """Seed tied to the setting, so a candidate scores the same in any order or worker."""
    return (seed * 1_000_003 + zlib.crc32(key.encode())) % (2 ** 31)


def evaluate_candidate(
    setting: TransformSetting,
    graph: ModelGraph,
    train_set: Dataset,
    val_set: Dataset,
    config: SearchConfig,
    train_config: TrainConfig,
    seed: int | None = None,
) -> RewardRecord:
    """Approximately train one candidate and score it on the validation split."""
    t0 = time.perf_counter()
    key = setting.key()
    seed = candidate_seed(config.seed, key) if seed is None else seed
    msm = apply_transform(graph, setting)
    base = count_flops(graph).total
    cfg = replace(train_config, seed=seed)
    weights = init_stage_weights(msm, seed, np.dtype(cfg.dtype))
    try:
        weights = approx_train(msm, weights, train_set, config.inner_epochs, cfg)
        trace = build_trace_table(msm, weights, val_set)
        if not np.all(np.isfinite(trace.confidence)):
            raise TrainingDiverged("non-finite confidences on the validation split")
    except TrainingDiverged as exc:
        log.warning("candidate %s diverged: %s", key, exc)
        return RewardRecord(key, 0.0, 1.0, 0.0, (), time.perf_counter() - t0, seed, Fraction(base), True)
    policy, point = select_thresholds(trace, config.omega, base, default_grid(config.grid_step))
    cost = float(point.mean_macs / base)
    reward = compute_reward(point.accuracy, cost, config.omega)
    return RewardRecord(
        key, point.accuracy, cost, reward, policy.thresholds, time.perf_counter() - t0, seed, point.mean_macs
    )


# -- PPO ---------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    tokens: tuple[int, ...]
    logp: float
    value: float
    reward: float

    @property
    def advantage(self) -> float:
        return self.reward - self.value


@dataclass(frozen=True)
class PPOStats:
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    mean_ratio: float
    clip_fraction: float
    steps: int
    aborted: bool = False

    def fields(self) -> dict[str, str]:
        return {
            "loss": repr(self.loss),
            "policy": repr(self.policy_loss),
            "value": repr(self.value_loss),
            "entropy": repr(self.entropy),
            "ratio": repr(self.mean_ratio),
            "clipfrac": repr(self.clip_fraction),
            "steps": str(self.steps),
            "aborted": str(int(self.aborted)),
        }


def ppo_loss(ctrl: Controller, P: dict[str, Tensor], batch: Sequence[Trajectory], config: SearchConfig):
    """Clipped surrogate plus value and entropy terms for one minibatch.

    Returns ``(total, parts)`` where ``parts`` holds the policy, value and
    entropy tensors and the raw ratios.
    """
    tokens = np.array([t.tokens for t in batch], dtype=np.int64)
    old = np.array([t.logp for t in batch])
    adv = Tensor(np.array([t.advantage for t in batch]))
    ret = Tensor(np.array([t.reward for t in batch]))
    r = rollout(ctrl, tokens=tokens, P=P)
    ratio = T.exp(r.logp - Tensor(old))
    clipped = T.clip(ratio, 1.0 - config.clip, 1.0 + config.clip)
    policy = -T.minimum(ratio * adv, clipped * adv).mean()
    diff = r.value - ret
    value = (diff * diff).mean()
    entropy = r.entropy.mean()
    total = policy + config.value_coef * value - config.entropy_coef * entropy
    return total, {"policy": policy, "value": value, "entropy": entropy, "ratio": ratio.data.copy()}


def ppo_update(
    ctrl: Controller,
    opt: Adam,
    batch: Sequence[Trajectory],
    config: SearchConfig,
    rng: np.random.Generator,
) -> PPOStats:
    """Several epochs of minibatch PPO; the controller is rolled back on a non-finite loss."""
    if not batch:
        raise ValueError("empty PPO batch")
    saved = (ctrl.copy().params, {k: v.copy() for k, v in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()}, opt.t)
    P = {k: Tensor(v, requires_grad=True) for k, v in ctrl.params.items()}
    sums = np.zeros(5)
    ratios: list[np.ndarray] = []
    steps = 0
    for _ in range(config.ppo_epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(order), config.minibatch):
            mb = [batch[i] for i in order[start:start + config.minibatch]]
            total, parts = ppo_loss(ctrl, P, mb, config)
            val = float(total.data)
            if not math.isfinite(val):
                ctrl.params, opt.m, opt.v, opt.t = saved
                log.warning("non-finite PPO loss %r; controller rolled back", val)
                return PPOStats(val, math.nan, math.nan, math.nan, math.nan, math.nan, steps, aborted=True)
            zero_grad(P)
            T.backward(total)
            opt.step(P)
            sums += [val, float(parts["policy"].data), float(parts["value"].data), float(parts["entropy"].data), 1.0]
            ratios.append(parts["ratio"])
            steps += 1
    ctrl.params = {k: t.data for k, t in P.items()}
    r = np.concatenate(ratios)
    n = sums[4]
    return PPOStats(
        sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n,
        float(r.mean()), float(np.mean(np.abs(r - 1.0) > config.clip)), steps,
    )


# -- the search loop ---------------------------------------------------------

RewardFn = Callable[[TransformSetting], RewardRecord]


@dataclass
class SearchResult:
    records: list[RewardRecord]  # unique settings, best first
    controller: Controller
    updates: list[PPOStats] = field(default_factory=list)
    samples: int = 0

    @property
    def best(self) -> RewardRecord:
        return self.records[0]


_WORKER: dict = {}


def _worker_init(graph, train_set, val_set, config, train_config):
    _WORKER.update(graph=graph, train=train_set, val=val_set, config=config, train_config=train_config)


def _worker_eval(setting: TransformSetting) -> RewardRecord:
    w = _WORKER
    return evaluate_candidate(setting, w["graph"], w["train"], w["val"], w["config"], w["train_config"])


def default_threads() -> int:
    return max(1, int(os.environ.get("STAGEWISE_THREADS", "1")))


def synthetic_reward(fn: Callable[[TransformSetting], float], seed: int = 0) -> RewardFn:
    """Wrap a plain function of the setting as a reward source (no training)."""

    def score(setting: TransformSetting) -> RewardRecord:
        r = float(fn(setting))
        return RewardRecord(setting.key(), r, 1.0, r, (), 0.0, seed)

    return score


def search(
    graph: ModelGraph | int,
    config: SearchConfig,
    train_set: Dataset | None = None,
    val_set: Dataset | None = None,
    train_config: TrainConfig | None = None,
    reward_fn: RewardFn | None = None,
    log_file=None,
    threads: int | None = None,
) -> SearchResult:
    """Sample, score and update until ``config.budget`` samples are drawn.

    With ``reward_fn`` the candidates are scored by that function instead of
    by training; ``graph`` may then be just the number of resolution groups.
    Every sample writes one ``sample ...`` line to ``log_file``, every update
    one ``update ...`` line.
    """
    if reward_fn is None and (train_set is None or val_set is None or isinstance(graph, int)):
        raise ValueError("search needs a graph and train/val sets unless a reward_fn is given")
    train_config = train_config or TrainConfig()
    threads = default_threads() if threads is None else threads
    ctrl = init_controller(graph, config.G, config.s, seed=config.seed)
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng(config.seed)
    cache: dict[str, RewardRecord] = {}
    updates: list[PPOStats] = []
    pool = None
    if reward_fn is None and threads > 1:
        pool = ProcessPoolExecutor(
            threads,
            mp_context=mp.get_context("fork"),
            initializer=_worker_init,
            initargs=(graph, train_set, val_set, config, train_config),
        )

    def score_all(samples: Sequence[Sample]) -> list[tuple[RewardRecord, bool]]:
        fresh: dict[str, TransformSetting] = {}
        for smp in samples:
            key = smp.setting.key()
            if key not in cache and key not in fresh:
                fresh[key] = smp.setting
        if reward_fn is not None:
            done = [reward_fn(st) for st in fresh.values()]
        elif pool is not None:
            done = list(pool.map(_worker_eval, fresh.values()))
        else:
            done = [
                evaluate_candidate(st, graph, train_set, val_set, config, train_config)
                for st in fresh.values()
            ]
        cache.update(zip(fresh.keys(), done))
        seen: set[str] = set()
        out = []
        for smp in samples:
            key = smp.setting.key()
            out.append((cache[key], key not in fresh or key in seen))
            seen.add(key)
        return out

    def emit(line: str) -> None:
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()

    drawn = 0
    try:
        while drawn < config.budget:
            n = min(config.trajectories, config.budget - drawn)
            samples = sample_architectures(ctrl, n, rng)
            scored = score_all(samples)
            batch = []
            for smp, (rec, cached) in zip(samples, scored):
                drawn += 1
                emit(format_fields(f"sample n={drawn}", rec.fields(cached)))
                batch.append(Trajectory(smp.tokens, smp.logp, smp.value, rec.reward))
            stats = ppo_update(ctrl, opt, batch, config, rng)
            updates.append(stats)
            emit(format_fields(f"update n={len(updates)}", stats.fields()))
    finally:
        if pool is not None:
            pool.shutdown()
        if log_file is not None:
            log_file.flush()
    records = sorted(cache.values(), key=lambda r: (-r.reward, r.key))
    return SearchResult(records, ctrl, updates, drawn)


def retrain(
    record: RewardRecord,
    graph: ModelGraph,
    G: int,
    s: int,
    train_set: Dataset,
    train_config: TrainConfig,
    val_set: Dataset | None = None,
):
    """Full training of a searched setting; returns ``(msm, weights, history)``."""
    setting = decode_key(record.key, graph, G, s)
    msm = apply_transform(graph, setting)
    weights = init_stage_weights(msm, train_config.seed, np.dtype(train_config.dtype))
    weights, hist = train(msm, weights, train_set, train_config, val_set)
    return msm, weights, hist


def strip_durations(lines: Sequence[str]) -> list[str]:
    """Log lines with the wall-clock field removed, for bitwise comparison."""
    out = []
    for line in lines:
        out.append(" ".join(p for p in line.split() if not p.startswith("duration=")))
    return out
