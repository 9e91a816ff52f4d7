"""Joint training of multi-stage models and per-sample stage traces."""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, augment
from .graph import bind, is_trainable
from .optim import SGD, zero_grad
from .tensor import Tensor
from .transform import MultiStageModel, StageRunner, forward_stages

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: tuple[float, ...] | None = None  # None: all ones
    milestones: tuple[float, ...] = (0.5, 0.75)
    warmup_iters: int = 100
    seed: int = 0
    augment: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if any(not 0.0 < m < 1.0 for m in self.milestones):
            raise ValueError(f"milestones must lie in (0, 1), got {self.milestones}")
        if self.alpha is not None:
            if any(a < 0 for a in self.alpha) or not any(a > 0 for a in self.alpha):
                raise ValueError("loss weights must be >= 0 with at least one positive")

    def weights_for(self, s: int) -> tuple[float, ...]:
        if self.alpha is None:
            return (1.0,) * s
        if len(self.alpha) != s:
            raise ValueError(f"{len(self.alpha)} loss weights for {s} stages")
        return tuple(self.alpha)

    def lr_at(self, epoch: int, it: int) -> float:
        """Learning rate for global iteration ``it`` inside ``epoch``."""
        lr = self.lr
        for m in self.milestones:
            if epoch >= m * self.epochs:
                lr /= 10.0
        if it < self.warmup_iters:
            lr *= (it + 1) / self.warmup_iters
        return lr


@dataclass
class History:
    s: int
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["epoch", "loss", "lr"] + [f"acc_stage_{i + 1}" for i in range(self.s)]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["epoch"], repr(r["loss"]), repr(r["lr"])] + [repr(a) for a in r["acc"]])
        return buf.getvalue()


def joint_loss(logits: Sequence[Tensor], labels, alpha: Sequence[float]) -> Tensor:
    """Weighted sum of the per-stage batch-mean cross-entropies."""
    if len(logits) != len(alpha):
        raise ValueError(f"{len(logits)} stage outputs but {len(alpha)} loss weights")
    total = None
    for z, a in zip(logits, alpha):
        term = T.softmax_cross_entropy(z, labels) * float(a)
        total = term if total is None else total + term
    return total


def _cast(weights: dict[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    return {k: np.array(v, dtype=dtype, copy=True) for k, v in weights.items()}


def train(
    msm: MultiStageModel,
    weights: dict[str, np.ndarray],
    train_set: Dataset,
    config: TrainConfig,
    val_set: Dataset | None = None,
) -> tuple[dict[str, np.ndarray], History]:
    """SGD on the joint loss; returns new weights and the per-epoch history."""
    if train_set.shape != msm.graph.input_shape:
        raise ValueError(f"dataset shape {train_set.shape} does not match model input {msm.graph.input_shape}")
    dtype = np.dtype(config.dtype)
    w = _cast(weights, dtype)
    P = bind(w, requires_grad=True)
    params = {k: t for k, t in P.items() if is_trainable(k)}
    opt = SGD(config.lr, config.momentum, config.weight_decay)
    alpha = config.weights_for(msm.s)
    rng = np.random.default_rng(config.seed)
    xs = train_set.x(dtype)
    ys = train_set.labels
    hist = History(msm.s)
    it = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(ys))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = xs[idx]
            if config.augment:
                xb = augment(xb, rng)
            lr = config.lr_at(epoch, it)
            loss = joint_loss(forward_stages(msm, P, xb, training=True), ys[idx], alpha)
            val = float(loss.data)
            if not np.isfinite(val):
                raise TrainingDiverged(f"non-finite loss {val} at epoch {epoch}, iteration {it}, lr {lr}")
            zero_grad(params)
            T.backward(loss)
            opt.step(params, lr)
            total += val * len(idx)
            count += len(idx)
            it += 1
        bad = [k for k, t in params.items() if not np.all(np.isfinite(t.data))]
        if bad:
            raise TrainingDiverged(f"non-finite weights {bad[0]} after epoch {epoch}, lr {lr}")
        acc = stage_accuracies(msm, w, val_set) if val_set is not None else [float("nan")] * msm.s
        hist.rows.append({"epoch": epoch + 1, "loss": total / max(count, 1), "lr": lr, "acc": acc})
        log.debug("epoch %d loss %.4f acc %s", epoch + 1, total / max(count, 1), acc)
    return w, hist


def approx_train(
    msm: MultiStageModel,
    weights: dict[str, np.ndarray],
    train_set: Dataset,
    inner_epochs: int,
    config: TrainConfig,
) -> dict[str, np.ndarray]:
    """Short constant-rate run used only to score candidates."""
    if inner_epochs < 1:
        raise ValueError("inner_epochs must be >= 1")
    cfg = replace(config, epochs=inner_epochs, milestones=(), warmup_iters=0)
    return train(msm, weights, train_set, cfg)[0]


def predict_stages(msm: MultiStageModel, weights, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    """Softmax outputs of every stage, shape ``[s, N, K]``, all stages evaluated."""
    dtype = next(iter(weights.values())).dtype
    xs = dataset.x(dtype)
    out = []
    with T.no_grad():
        P = bind(weights)
        for start in range(0, len(xs), batch_size):
            logits = forward_stages(msm, P, xs[start:start + batch_size])
            out.append(np.stack([T.softmax(z.data.astype(np.float64)) for z in logits]))
    return np.concatenate(out, axis=1)


def stage_accuracies(msm: MultiStageModel, weights, dataset: Dataset) -> list[float]:
    probs = predict_stages(msm, weights, dataset)
    return [float(np.mean(p.argmax(axis=1) == dataset.labels)) for p in probs]


# -- trace table -------------------------------------------------------------

TRACE_MAGIC = b"SGTR"


def _row_dtype(s: int) -> np.dtype:
    return np.dtype([("label", "<i8"), ("conf", "<f8", (s,)), ("pred", "<i8", (s,))])


@dataclass(frozen=True)
class TraceTable:
    """Per-sample, per-stage top-1 confidence and prediction.

    ``confidence`` and ``predicted`` are ``[N, s]``; ``accumulated`` holds the
    MACs charged for exiting after each stage.
    """

    labels: np.ndarray
    confidence: np.ndarray
    predicted: np.ndarray
    accumulated: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        N, s = self.confidence.shape
        if self.predicted.shape != (N, s) or self.labels.shape != (N,) or len(self.accumulated) != s:
            raise ValueError("inconsistent trace table shapes")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def s(self) -> int:
        return self.confidence.shape[1]

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.labels[:, None]

    def stage_accuracy(self, i: int) -> float:
        """Accuracy of stage ``i`` (0-based) over all samples."""
        return float(self.correct[:, i].mean())

    def to_bytes(self) -> bytes:
        """``SGTR`` u8 version, u32 N, u16 s, u16 K, s*i64 MACs, then N rows of
        (i64 label, s*f64 confidence, s*i64 prediction), little-endian."""
        head = TRACE_MAGIC + struct.pack("<BIHH", 1, self.n, self.s, self.num_classes)
        head += struct.pack(f"<{self.s}q", *self.accumulated)
        rows = np.empty(self.n, _row_dtype(self.s))
        rows["label"] = self.labels
        rows["conf"] = self.confidence
        rows["pred"] = self.predicted
        return head + rows.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "TraceTable":
        if buf[:4] != TRACE_MAGIC:
            raise ValueError("bad magic, not a trace table")
        version, n, s, K = struct.unpack_from("<BIHH", buf, 4)
        if version != 1:
            raise ValueError(f"unsupported trace table version {version}")
        off = 4 + struct.calcsize("<BIHH")
        acc = struct.unpack_from(f"<{s}q", buf, off)
        off += 8 * s
        dt = _row_dtype(s)
        if len(buf) != off + n * dt.itemsize:
            raise ValueError(f"trace table truncated or padded: expected {off + n * dt.itemsize} bytes, got {len(buf)}")
        rows = np.frombuffer(buf, dt, n, off)
        return cls(
            rows["label"].astype(np.int64),
            rows["conf"].astype(np.float64).reshape(n, s),
            rows["pred"].astype(np.int64).reshape(n, s),
            tuple(acc),
            K,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "TraceTable":
        return cls.from_bytes(Path(path).read_bytes())


def build_trace_table(msm: MultiStageModel, weights, dataset: Dataset) -> TraceTable:
    probs = predict_stages(msm, weights, dataset)
    conf = probs.max(axis=2).T.copy()
    pred = probs.argmax(axis=2).T.astype(np.int64)
    return TraceTable(dataset.labels.copy(), conf, pred, msm.accumulated, dataset.num_classes)


def stage_logits(msm: MultiStageModel, weights, x: np.ndarray, upto: int) -> list[Tensor]:
    """Logits of stages ``1..upto`` only (later stages never evaluated)."""
    with T.no_grad():
        runner = StageRunner(msm, weights, x)
        return [runner.next_stage() for _ in range(upto)]
