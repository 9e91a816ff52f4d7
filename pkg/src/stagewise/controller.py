"""Recurrent policy over transformation settings.

A trajectory makes two decisions per resolution group: which split option to
use (a categorical over ``C(G-1, s-1)`` choices) and which concat locations to
turn on (independent Bernoullis over the ``s(s-1)/2`` pairs).  Decisions are
made in group order.  Each decision's token is embedded and fed to a GRU
whose hidden state drives the next predictor.

The vocabulary holds a start row, one row per split option, a base row for
concat decisions and one row per concat location.  A concat decision embeds
as the base row plus the rows of the locations it switched on.

The sampled tokens are exactly :func:`~stagewise.transform.encode_setting`'s
layout, so decoding is direct.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import ModelGraph
from .tensor import Tensor
from .transform import (
    TransformSetting,
    all_settings,
    concat_locations,
    decode_setting,
    encode_setting,
    enumerate_split_options,
)

HIDDEN = 64
EMBED = 32


class ArityError(ValueError):
    pass


@dataclass
class Controller:
    """Parameters plus the (k, G, s) shape they were built for."""

    k: int
    G: int
    s: int
    params: dict[str, np.ndarray] = field(default_factory=dict)
    hidden: int = HIDDEN
    embed: int = EMBED

    @property
    def n_split(self) -> int:
        return len(enumerate_split_options(self.G, self.s))

    @property
    def n_concat(self) -> int:
        return self.s * (self.s - 1) // 2

    @property
    def tokens_per_group(self) -> int:
        return 1 + self.n_concat

    def check(self, graph: ModelGraph | int, G: int | None = None, s: int | None = None) -> None:
        k = graph if isinstance(graph, int) else len(graph.groups)
        if k != self.k or (G is not None and G != self.G) or (s is not None and s != self.s):
            raise ArityError(
                f"controller built for k={self.k}, G={self.G}, s={self.s}; got k={k}, G={G}, s={s}"
            )

    def copy(self) -> "Controller":
        return copy.deepcopy(self)


def init_controller(
    graph: ModelGraph | int,
    G: int,
    s: int,
    seed: int = 0,
    zero_heads: bool = True,
    hidden: int = HIDDEN,
    embed: int = EMBED,
) -> Controller:
    """Fresh controller.  With ``zero_heads`` every predictor starts uniform."""
    k = graph if isinstance(graph, int) else len(graph.groups)
    if k < 1:
        raise ArityError("need at least one resolution group")
    n_split = len(enumerate_split_options(G, s))
    n_concat = s * (s - 1) // 2
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(hidden)

    def unif(*shape):
        return rng.uniform(-bound, bound, size=shape)

    p = {
        "embed": rng.normal(0.0, 1.0, size=(2 + n_split + n_concat, embed)),
        "gru.w_ih": unif(3 * hidden, embed),
        "gru.w_hh": unif(3 * hidden, hidden),
        "gru.b_ih": unif(3 * hidden),
        "gru.b_hh": unif(3 * hidden),
        "value.w": np.zeros((1, hidden)) if zero_heads else unif(1, hidden),
        "value.b": np.zeros(1),
    }
    for g in range(k):
        p[f"split{g}.w"] = np.zeros((n_split, hidden)) if zero_heads else unif(n_split, hidden)
        p[f"split{g}.b"] = np.zeros(n_split)
        if n_concat:
            p[f"concat{g}.w"] = np.zeros((n_concat, hidden)) if zero_heads else unif(n_concat, hidden)
            p[f"concat{g}.b"] = np.zeros(n_concat)
    return Controller(k, G, s, p, hidden, embed)


def _gru(x: Tensor, h: Tensor, P, H: int) -> Tensor:
    gi = T.linear(x, P["gru.w_ih"], P["gru.b_ih"])
    gh = T.linear(h, P["gru.w_hh"], P["gru.b_hh"])
    r = T.sigmoid(gi[:, :H] + gh[:, :H])
    z = T.sigmoid(gi[:, H:2 * H] + gh[:, H:2 * H])
    n = T.tanh(gi[:, 2 * H:] + r * gh[:, 2 * H:])
    return (1.0 - z) * n + z * h


@dataclass
class Rollout:
    tokens: np.ndarray  # int64 [B, k * (1 + n_concat)]
    logp: Tensor  # [B] joint log-probability
    entropy: Tensor  # [B] summed per-decision entropy
    value: Tensor  # [B]


def rollout(
    ctrl: Controller,
    batch: int | None = None,
    tokens: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    P: dict[str, Tensor] | None = None,
) -> Rollout:
    """Run the policy over a batch of trajectories.

    Either sample ``batch`` fresh trajectories with ``rng`` or score the given
    ``tokens`` (teacher forcing).  Gradients flow to ``P`` when it holds
    tensors that require them.
    """
    if P is None:
        P = {k: Tensor(v) for k, v in ctrl.params.items()}
    if tokens is not None:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != ctrl.k * ctrl.tokens_per_group:
            raise ArityError(f"tokens shaped {tokens.shape}, expected [B, {ctrl.k * ctrl.tokens_per_group}]")
        B = len(tokens)
        out = tokens
    else:
        if rng is None or batch is None:
            raise ValueError("sampling needs both batch and rng")
        B = batch
        out = np.zeros((B, ctrl.k * ctrl.tokens_per_group), dtype=np.int64)
    nS, nC, H = ctrl.n_split, ctrl.n_concat, ctrl.hidden
    table = P["embed"]
    split_row = 1
    concat_base = 1 + nS
    x = T.embedding(table, np.zeros(B, dtype=np.int64))
    h = Tensor(np.zeros((B, H)))
    logp = Tensor(np.zeros(B))
    ent = Tensor(np.zeros(B))
    rows = np.arange(B)
    for g in range(ctrl.k):
        col = g * ctrl.tokens_per_group
        h = _gru(x, h, P, H)
        lsm = T.log_softmax(T.linear(h, P[f"split{g}.w"], P[f"split{g}.b"]))
        if tokens is None:
            cdf = np.cumsum(np.exp(lsm.data), axis=1)
            u = rng.random(B)[:, None]
            out[:, col] = np.minimum((u >= cdf).sum(axis=1), nS - 1)
        choice = out[:, col]
        logp = logp + lsm[rows, choice]
        ent = ent - (T.exp(lsm) * lsm).sum(axis=1)
        x = T.embedding(table, split_row + choice)
        if not nC:
            continue
        h = _gru(x, h, P, H)
        z = T.linear(h, P[f"concat{g}.w"], P[f"concat{g}.b"])
        lp_on, lp_off = T.log_sigmoid(z), T.log_sigmoid(-z)
        if tokens is None:
            out[:, col + 1:col + 1 + nC] = rng.random((B, nC)) < np.exp(lp_on.data)
        bits = Tensor(out[:, col + 1:col + 1 + nC].astype(np.float64))
        logp = logp + (bits * lp_on + (1.0 - bits) * lp_off).sum(axis=1)
        ent = ent - (T.exp(lp_on) * lp_on + T.exp(lp_off) * lp_off).sum(axis=1)
        loc_rows = table[concat_base + 1:concat_base + 1 + nC]
        x = T.embedding(table, np.full(B, concat_base)) + T.matmul(bits, loc_rows)
    h = _gru(x, h, P, H)
    value = T.linear(h, P["value.w"], P["value.b"]).reshape(B)
    return Rollout(out, logp, ent, value)


@dataclass(frozen=True)
class Sample:
    setting: TransformSetting
    tokens: tuple[int, ...]
    logp: float
    value: float


def sample_architectures(ctrl: Controller, n: int, rng: np.random.Generator) -> list[Sample]:
    with T.no_grad():
        r = rollout(ctrl, batch=n, rng=rng)
    return [
        Sample(decode_setting(t, ctrl.k, ctrl.G, ctrl.s), tuple(int(v) for v in t), float(lp), float(v))
        for t, lp, v in zip(r.tokens, r.logp.data, r.value.data)
    ]


def sample_architecture(ctrl: Controller, graph: ModelGraph | int, rng: np.random.Generator) -> Sample:
    """One setting with its joint log-probability and the value estimate."""
    ctrl.check(graph)
    return sample_architectures(ctrl, 1, rng)[0]


def log_prob(ctrl: Controller, settings) -> np.ndarray:
    """Joint log-probabilities of the given settings under the current policy."""
    tokens = np.array([encode_setting(s) for s in settings], dtype=np.int64)
    with T.no_grad():
        return rollout(ctrl, tokens=tokens).logp.data.copy()


def split_probabilities(ctrl: Controller, group: int = 0) -> np.ndarray:
    """First-group split distribution (only group 0 is free of earlier choices)."""
    if group != 0:
        raise ValueError("only the first group's split marginal is context-free")
    with T.no_grad():
        P = {k: Tensor(v) for k, v in ctrl.params.items()}
        x = T.embedding(P["embed"], np.zeros(1, dtype=np.int64))
        h = _gru(x, Tensor(np.zeros((1, ctrl.hidden))), P, ctrl.hidden)
        return T.softmax(T.linear(h, P["split0.w"], P["split0.b"]).data)[0]


def modal_setting(ctrl: Controller) -> TransformSetting:
    """Most probable setting, by exhaustive enumeration (small spaces only)."""
    settings = list(all_settings(ctrl.k, ctrl.G, ctrl.s))
    if len(settings) > 100_000:
        raise ValueError(f"space of {len(settings)} settings is too large to enumerate")
    lp = log_prob(ctrl, settings)
    return settings[int(np.argmax(lp))]


def concat_location_names(s: int) -> list[str]:
    return [f"{i}->{j}" for i, j in concat_locations(s)]
