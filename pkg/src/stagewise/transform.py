"""Channel-wise split/concat rewrite of a static CNN into an s-stage model.

Every layer's output channels are cut into ``G`` contiguous groups; the split
points of the layer's resolution group hand groups ``p[j-1]..p[j]`` to stage
``j``.  Each stage keeps only its own slice of every layer, so the original
cross-stage connections disappear.  A concat pair ``(i, j)`` (``i < j``, 1-based)
lets stage ``j``'s convs inside that resolution group also read stage ``i``'s
features entering the conv.  The prediction layer of stage ``j`` always reads
the pooled features of stages ``1..j``.

Conventions worth knowing:

* The image feeds every stage in full; only the first conv's outputs are split.
* A depthwise conv keeps the channel ownership of its input and never concats.
* Residual shortcuts (identity or projected) stay inside their stage.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .graph import (
    GraphError,
    ModelGraph,
    apply_bn,
    apply_projection,
    bind,
    count_flops,
    he_normal,
    projection_stride,
)
from .tensor import Tensor


class TransformError(ValueError):
    pass


# -- combinatorics ----------------------------------------------------------

def group_channels(C: int, G: int) -> list[int]:
    """Sizes of ``min(C, G)`` contiguous channel groups, remainder spread from the front."""
    if C < 1 or G < 1:
        raise ValueError("channel and group counts must be positive")
    n = min(C, G)
    base, rem = divmod(C, n)
    return [base + (1 if i < rem else 0) for i in range(n)]


def enumerate_split_options(G: int, s: int) -> list[tuple[int, ...]]:
    """All split-point tuples ``(0, p1, ..., p_{s-1}, G)`` in lexicographic order."""
    if not 1 <= s <= G:
        raise ValueError(f"need 1 <= s <= G, got s={s}, G={G}")
    return [(0, *inner, G) for inner in itertools.combinations(range(1, G), s - 1)]


def concat_locations(s: int) -> list[tuple[int, int]]:
    """Ordered 1-based pairs ``(i, j)``, ``i < j``, where stage j may reuse stage i."""
    return [(i, j) for j in range(2, s + 1) for i in range(1, j)]


def space_size(graph_or_groups: ModelGraph | int, G: int, s: int) -> int:
    k = graph_or_groups if isinstance(graph_or_groups, int) else len(graph_or_groups.groups)
    per_group = math.comb(G - 1, s - 1) * 2 ** (s * (s - 1) // 2)
    return per_group ** k


# -- settings ---------------------------------------------------------------

@dataclass(frozen=True)
class GroupSetting:
    split: tuple[int, ...]
    concat: frozenset[tuple[int, int]] = frozenset()

    def validate(self, G: int, s: int) -> None:
        p = self.split
        if len(p) != s + 1 or p[0] != 0 or p[-1] != G:
            raise TransformError(f"split points {p} must run from 0 to {G} in {s} steps")
        if any(b <= a for a, b in zip(p, p[1:])):
            raise TransformError(f"split points {p} must be strictly increasing")
        for i, j in self.concat:
            if not 1 <= i < j <= s:
                raise TransformError(f"concat {i}->{j} violates 1 <= i < j <= {s}")

    def matrix(self, s: int) -> np.ndarray:
        """The indicator matrix, ``m[i-1, j-1] = 1`` when stage j reuses stage i."""
        m = np.zeros((s, s), dtype=np.int8)
        for i, j in self.concat:
            m[i - 1, j - 1] = 1
        return m


@dataclass(frozen=True)
class TransformSetting:
    G: int
    s: int
    groups: tuple[GroupSetting, ...]

    def __post_init__(self):
        if self.s < 1 or self.G < self.s:
            raise TransformError(f"need 1 <= s <= G, got s={self.s}, G={self.G}")
        for g in self.groups:
            g.validate(self.G, self.s)

    @classmethod
    def identity(cls, graph: ModelGraph, G: int = 1) -> "TransformSetting":
        return cls(G, 1, tuple(GroupSetting((0, G)) for _ in graph.groups))

    def key(self) -> str:
        """Canonical compact encoding, e.g. ``3.1.0/5.0.0`` for two groups."""
        tokens = encode_setting(self)
        per = len(tokens) // len(self.groups) if self.groups else 0
        return "/".join(".".join(str(t) for t in tokens[g * per:(g + 1) * per]) for g in range(len(self.groups)))


def encode_setting(setting: TransformSetting) -> tuple[int, ...]:
    """Per group: the split-option index, then one bit per concat location."""
    options = {p: i for i, p in enumerate(enumerate_split_options(setting.G, setting.s))}
    locs = concat_locations(setting.s)
    out: list[int] = []
    for g in setting.groups:
        out.append(options[g.split])
        out.extend(1 if loc in g.concat else 0 for loc in locs)
    return tuple(out)


def decode_setting(tokens: Sequence[int], graph: ModelGraph | int, G: int, s: int) -> TransformSetting:
    k = graph if isinstance(graph, int) else len(graph.groups)
    options = enumerate_split_options(G, s)
    locs = concat_locations(s)
    per = 1 + len(locs)
    tokens = list(tokens)
    if len(tokens) != k * per:
        raise TransformError(f"expected {k * per} tokens for {k} groups, got {len(tokens)}")
    groups = []
    for g in range(k):
        chunk = tokens[g * per:(g + 1) * per]
        if not 0 <= chunk[0] < len(options):
            raise TransformError(f"split token {chunk[0]} out of range [0, {len(options)})")
        bits = chunk[1:]
        if any(b not in (0, 1) for b in bits):
            raise TransformError(f"concat tokens must be 0/1, got {bits}")
        groups.append(GroupSetting(options[chunk[0]], frozenset(l for l, b in zip(locs, bits) if b)))
    return TransformSetting(G, s, tuple(groups))


def decode_key(key: str, graph: ModelGraph | int, G: int, s: int) -> TransformSetting:
    try:
        tokens = [int(t) for part in key.split("/") for t in part.split(".")]
    except ValueError:
        raise TransformError(f"malformed setting key {key!r}") from None
    return decode_setting(tokens, graph, G, s)


def all_settings(k_groups: int, G: int, s: int) -> Iterable[TransformSetting]:
    per_group = [
        GroupSetting(p, frozenset(c for c, b in zip(concat_locations(s), bits) if b))
        for p in enumerate_split_options(G, s)
        for bits in itertools.product((0, 1), repeat=s * (s - 1) // 2)
    ]
    for combo in itertools.product(per_group, repeat=k_groups):
        yield TransformSetting(G, s, combo)


def random_setting(rng: np.random.Generator, k_groups: int, G: int, s: int) -> TransformSetting:
    options = enumerate_split_options(G, s)
    locs = concat_locations(s)
    groups = []
    for _ in range(k_groups):
        p = options[int(rng.integers(len(options)))]
        groups.append(GroupSetting(p, frozenset(l for l in locs if rng.random() < 0.5)))
    return TransformSetting(G, s, tuple(groups))


# -- text serialisation -----------------------------------------------------

def format_setting(setting: TransformSetting, graph: ModelGraph | None = None) -> str:
    model = graph.fingerprint() if graph is not None else "-"
    lines = [f"setting G={setting.G} s={setting.s} model={model}"]
    for g, gs in enumerate(setting.groups):
        pairs = ",".join(f"{i}->{j}" for i, j in sorted(gs.concat))
        lines.append(f"group {g}: split {','.join(map(str, gs.split))} ; concat {pairs}".rstrip())
    return "\n".join(lines) + "\n"


_HEADER = re.compile(r"^setting G=(\d+) s=(\d+) model=(\S+)$")
_GROUP = re.compile(r"^group (\d+): split ([0-9,]+) ; concat ?([0-9,>\-]*)$")


def parse_setting(text: str, graph: ModelGraph | None = None) -> TransformSetting:
    lines = [l.strip() for l in text.splitlines() if l.strip() and not l.lstrip().startswith("#")]
    if not lines:
        raise TransformError("empty setting file")
    m = _HEADER.match(lines[0])
    if not m:
        raise TransformError(f"bad setting header {lines[0]!r}")
    G, s, model = int(m.group(1)), int(m.group(2)), m.group(3)
    if graph is not None and model != "-" and model != graph.fingerprint():
        raise TransformError(f"setting was made for model {model}, not {graph.fingerprint()}")
    groups = []
    for idx, line in enumerate(lines[1:]):
        gm = _GROUP.match(line)
        if not gm or int(gm.group(1)) != idx:
            raise TransformError(f"bad group line {line!r}")
        split = tuple(int(v) for v in gm.group(2).split(","))
        pairs = set()
        for tok in filter(None, gm.group(3).split(",")):
            a, _, b = tok.partition("->")
            if not a.isdigit() or not b.isdigit():
                raise TransformError(f"bad concat pair {tok!r}")
            pairs.add((int(a), int(b)))
        groups.append(GroupSetting(split, frozenset(pairs)))
    setting = TransformSetting(G, s, tuple(groups))
    if graph is not None and len(groups) != len(graph.groups):
        raise TransformError(f"setting has {len(groups)} groups, model has {len(graph.groups)}")
    return setting


# -- the multi-stage model --------------------------------------------------

@dataclass(frozen=True)
class StageOp:
    layer: int
    kind: str
    sources: tuple[int, ...]  # 0-based stages feeding this op; () = the image
    in_idx: tuple[int, ...]  # original input-channel indices, in concat order
    out_idx: tuple[int, ...]  # original output channels owned by the stage
    macs: int
    proj_in: tuple[int, ...] = ()  # residual projection input channels


@dataclass(frozen=True)
class MultiStageModel:
    graph: ModelGraph
    setting: TransformSetting
    ops: tuple[tuple[StageOp, ...], ...]  # [stage][layer]

    @property
    def s(self) -> int:
        return self.setting.s

    @cached_property
    def stage_macs(self) -> tuple[int, ...]:
        return tuple(sum(op.macs for op in stage) for stage in self.ops)

    @cached_property
    def accumulated(self) -> tuple[int, ...]:
        return tuple(itertools.accumulate(self.stage_macs))

    @cached_property
    def concat_edges(self) -> tuple[tuple[int, int, int], ...]:
        """``(source stage, sink stage, layer)`` with 1-based stages."""
        edges = []
        for j, stage in enumerate(self.ops):
            for op in stage:
                if op.kind in ("conv", "linear"):
                    edges.extend((i + 1, j + 1, op.layer) for i in op.sources if i != j)
        return tuple(edges)

    def channel_table(self) -> list[list[tuple[int, ...]]]:
        """Per resolution group, per stage: the distinct conv output widths."""
        table = []
        for r in self.graph.groups:
            row = []
            for stage in self.ops:
                widths = sorted({len(stage[k].out_idx) for k in r if stage[k].kind == "conv"})
                row.append(tuple(widths))
            table.append(row)
        return table

    def weight_names(self) -> list[str]:
        return sorted(init_stage_weights(self, 0).keys())


def _owner_ranges(O: int, G: int, split: tuple[int, ...]) -> list[tuple[int, ...]]:
    sizes = group_channels(O, G)
    if len(sizes) < G:
        raise TransformError(f"layer with {O} channels cannot be cut into {G} groups")
    bounds = np.cumsum([0] + sizes)
    return [tuple(range(bounds[a], bounds[b])) for a, b in zip(split, split[1:])]


def apply_transform(graph: ModelGraph, setting: TransformSetting) -> MultiStageModel:
    if len(setting.groups) != len(graph.groups):
        raise TransformError(
            f"setting has {len(setting.groups)} resolution groups, model has {len(graph.groups)}"
        )
    s = setting.s
    own: list[tuple[int, ...] | None] = [None] * s  # None: the shared image
    history: list[list[tuple[int, ...] | None]] = []
    ops: list[list[StageOp]] = [[] for _ in range(s)]
    for k, l in enumerate(graph.layers):
        shape = graph.shapes[k]
        g = graph.group_of(k)
        if l.kind == "conv":
            HW = shape[1] * shape[2]
            if l.depthwise:
                if own[0] is None:
                    raise TransformError(f"layer {k}: depthwise conv directly on the image")
                new = list(own)
                for j in range(s):
                    ops[j].append(StageOp(k, "conv", (j,), own[j], own[j], len(own[j]) * l.k * l.k * HW))
            else:
                gs = setting.groups[g]
                new = _owner_ranges(l.out, setting.G, gs.split)
                for j in range(s):
                    if own[j] is None:
                        srcs: tuple[int, ...] = ()
                        in_idx = tuple(range(graph.in_shape(k)[0]))
                    else:
                        srcs = tuple(sorted({i - 1 for i, jj in gs.concat if jj == j + 1} | {j}))
                        in_idx = tuple(c for i in srcs for c in own[i])
                    ops[j].append(StageOp(k, "conv", srcs, in_idx, new[j], len(new[j]) * len(in_idx) * l.k * l.k * HW))
            own = new
        elif l.kind == "residual_add":
            if l.source == -1:
                raise TransformError(f"layer {k}: shortcut from the shared image is not splittable")
            src_own = history[l.source]
            for j in range(s):
                if l.project:
                    macs = len(own[j]) * len(src_own[j]) * shape[1] * shape[2]
                    ops[j].append(StageOp(k, l.kind, (j,), own[j], own[j], macs, proj_in=src_own[j]))
                else:
                    if src_own[j] != own[j]:
                        raise TransformError(f"layer {k}: identity shortcut joins mismatched channel slices")
                    ops[j].append(StageOp(k, l.kind, (j,), own[j], own[j], 0))
        elif l.kind == "linear":
            for j in range(s):
                srcs = tuple(range(j + 1))
                in_idx = tuple(c for i in srcs for c in own[i])
                ops[j].append(StageOp(k, l.kind, srcs, in_idx, tuple(range(l.out)), len(in_idx) * l.out))
            own = [tuple(range(l.out))] * s
        else:
            if own[0] is None:
                raise TransformError(f"layer {k}: {l.kind} directly on the image is not supported")
            for j in range(s):
                ops[j].append(StageOp(k, l.kind, (j,), own[j], own[j], 0))
        history.append(list(own))
    return MultiStageModel(graph, setting, tuple(tuple(o) for o in ops))


def accumulated_flops(msm: MultiStageModel) -> tuple[int, ...]:
    return msm.accumulated


# -- weights ----------------------------------------------------------------

def _bn_init(w, prefix, n, dtype):
    w[f"{prefix}.gamma"] = np.ones(n, dtype)
    w[f"{prefix}.beta"] = np.zeros(n, dtype)
    w[f"{prefix}.mean"] = np.zeros(n, dtype)
    w[f"{prefix}.var"] = np.ones(n, dtype)


def init_stage_weights(msm: MultiStageModel, seed=0, dtype=np.float64) -> dict[str, np.ndarray]:
    """Fresh He-normal weights for every stage; each stage has its own BN."""
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}
    for j, stage in enumerate(msm.ops):
        for op in stage:
            l = msm.graph.layers[op.layer]
            pre = f"s{j + 1}.L{op.layer}"
            if op.kind == "conv":
                cin = 1 if l.depthwise else len(op.in_idx)
                w[f"{pre}.w"] = he_normal(rng, (len(op.out_idx), cin, l.k, l.k), cin * l.k * l.k, dtype)
            elif op.kind == "batch_norm":
                _bn_init(w, pre, len(op.out_idx), dtype)
            elif op.kind == "linear":
                w[f"{pre}.w"] = he_normal(rng, (l.out, len(op.in_idx)), len(op.in_idx), dtype)
                w[f"{pre}.b"] = np.zeros(l.out, dtype)
            elif op.kind == "residual_add" and l.project:
                n_in = len(op.proj_in)
                w[f"{pre}.proj.w"] = he_normal(rng, (len(op.out_idx), n_in, 1, 1), n_in, dtype)
                _bn_init(w, f"{pre}.proj", len(op.out_idx), dtype)
    return w


def weights_from_base(msm: MultiStageModel, base: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Slice static-model weights into the stage layout (exact copy when s=1)."""
    w: dict[str, np.ndarray] = {}

    def take(name, rows, cols=None):
        a = base[name]
        a = a[np.asarray(rows)]
        if cols is not None:
            a = a[:, np.asarray(cols)]
        return np.ascontiguousarray(a)

    for j, stage in enumerate(msm.ops):
        for op in stage:
            l = msm.graph.layers[op.layer]
            pre, src = f"s{j + 1}.L{op.layer}", f"L{op.layer}"
            if op.kind == "conv":
                w[f"{pre}.w"] = take(f"{src}.w", op.out_idx, None if l.depthwise else op.in_idx)
            elif op.kind == "batch_norm":
                for p in ("gamma", "beta", "mean", "var"):
                    w[f"{pre}.{p}"] = take(f"{src}.{p}", op.out_idx)
            elif op.kind == "linear":
                w[f"{pre}.w"] = np.ascontiguousarray(base[f"{src}.w"][:, np.asarray(op.in_idx)])
                w[f"{pre}.b"] = base[f"{src}.b"].copy()
            elif op.kind == "residual_add" and l.project:
                w[f"{pre}.proj.w"] = take(f"{src}.proj.w", op.out_idx, op.proj_in)
                for p in ("gamma", "beta", "mean", "var"):
                    w[f"{pre}.proj.{p}"] = take(f"{src}.proj.{p}", op.out_idx)
    return w


# -- execution --------------------------------------------------------------

class StageRunner:
    """Evaluates stages in order, caching every stage's per-layer features.

    Stage ``j`` only reads cached outputs of earlier stages, so an early exit
    after stage ``j`` never pays for later stages and later stages never
    recompute earlier ones.
    """

    def __init__(self, msm: MultiStageModel, weights, x, training: bool = False):
        self.msm = msm
        self.P = weights if all(isinstance(v, Tensor) for v in weights.values()) else bind(weights)
        self.x = x if isinstance(x, Tensor) else Tensor(x)
        if self.x.shape[1:] != msm.graph.input_shape:
            raise ValueError(f"batch shape {self.x.shape[1:]} does not match model input {msm.graph.input_shape}")
        self.training = training
        self.outs: list[list[Tensor]] = []

    @property
    def done(self) -> int:
        return len(self.outs)

    def next_stage(self) -> Tensor:
        j = len(self.outs)
        if j >= self.msm.s:
            raise IndexError("all stages already evaluated")
        graph, P = self.msm.graph, self.P
        mine: list[Tensor] = []
        self.outs.append(mine)
        h = self.x
        for op in self.msm.ops[j]:
            k = op.layer
            l = graph.layers[k]
            pre = f"s{j + 1}.L{k}"
            if l.kind == "conv":
                inp = self.x if not op.sources else T.channel_concat([self.outs[i][k - 1] for i in op.sources])
                w = P[f"{pre}.w"]
                h = T.conv2d(inp, w, l.stride, l.padding, groups=inp.shape[1] if l.depthwise else 1)
            elif l.kind == "batch_norm":
                h = apply_bn(h, P, pre, self.training)
            elif l.kind == "relu":
                h = T.relu(h)
            elif l.kind == "max_pool":
                h = T.max_pool2d(h, l.k)
            elif l.kind == "global_avg_pool":
                h = T.global_avg_pool(h)
            elif l.kind == "linear":
                inp = T.channel_concat([self.outs[i][k - 1] for i in op.sources])
                h = T.linear(inp, P[f"{pre}.w"], P[f"{pre}.b"])
            elif l.kind == "residual_add":
                src = mine[l.source]
                if l.project:
                    src = apply_projection(src, P, pre, projection_stride(graph, k), self.training)
                h = h + src
            mine.append(h)
        return h


def forward_stages(msm: MultiStageModel, weights, x, training: bool = False) -> list[Tensor]:
    """Logits of every stage for a batch, stages evaluated in order."""
    runner = StageRunner(msm, weights, x, training)
    return [runner.next_stage() for _ in range(msm.s)]


# -- reporting --------------------------------------------------------------

def describe(msm: MultiStageModel) -> str:
    """Human-readable per-group stage widths, concat pairs and accumulated MACs."""
    lines = [f"# multi-stage model: s={msm.s} G={msm.setting.G} base={msm.graph.fingerprint()}"]
    table = msm.channel_table()
    for g, (r, row) in enumerate(zip(msm.graph.groups, table)):
        res = msm.graph.shapes[r.start][1:]
        widths = " | ".join("/".join(map(str, w)) or "-" for w in row)
        pairs = ",".join(f"{i}->{j}" for i, j in sorted(msm.setting.groups[g].concat)) or "none"
        lines.append(f"group {g} ({res[0]}x{res[1]}): widths {widths} ; concat {pairs}")
    lines.append("accumulated_macs " + ",".join(map(str, msm.accumulated)))
    base = count_flops(msm.graph).total
    lines.append(f"base_macs {base}")
    return "\n".join(lines) + "\n"


__all__ = [
    "GraphError",
    "GroupSetting",
    "MultiStageModel",
    "StageOp",
    "StageRunner",
    "TransformError",
    "TransformSetting",
    "accumulated_flops",
    "all_settings",
    "apply_transform",
    "concat_locations",
    "decode_key",
    "decode_setting",
    "describe",
    "encode_setting",
    "enumerate_split_options",
    "format_setting",
    "forward_stages",
    "group_channels",
    "init_stage_weights",
    "parse_setting",
    "random_setting",
    "space_size",
    "weights_from_base",
]
