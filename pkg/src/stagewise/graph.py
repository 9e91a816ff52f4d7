"""Static CNN descriptions: parsing, shape inference, MAC counting, execution.

Description grammar (one statement per line, ``#`` starts a comment)::

    input CxHxW                                   required, first statement
    conv out=O k=K [s=S] [p=P] [dw] [bn] [relu]   dense (or depthwise with dw) conv
    block res out=O [s=S] [repeat=R]              basic residual block(s)
    block mbv2 out=O [s=S] [expand=E] [repeat=R]  inverted residual block(s)
    maxpool [k=K]                                 non-overlapping max pool
    gap                                           global average pool
    fc out=K                                      prediction layer (last but for softmax)
    softmax                                       optional marker after fc (no-op)

Defaults: ``s=1``, ``p=(k-1)//2``, ``repeat=1``, ``expand=6``, ``maxpool k=2``.
Only the first repeat of a block uses the declared stride.  A ``res`` block is
``conv3x3-bn-relu-conv3x3-bn`` plus a shortcut, then ``relu``; the shortcut is
a strided 1x1 conv + bn whenever the stride or the width changes.  An ``mbv2``
block is ``[conv1x1-bn-relu] dwconv3x3-bn-relu conv1x1-bn`` with an identity
shortcut when stride is 1 and width is unchanged.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

LAYER_KINDS = (
    "conv",
    "batch_norm",
    "relu",
    "max_pool",
    "global_avg_pool",
    "linear",
    "residual_add",
    "softmax_head",
)

MODELS_DIR = Path(__file__).parent / "models"


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0
    k: int = 0
    stride: int = 1
    padding: int = 0
    depthwise: bool = False
    source: int | None = None  # residual_add: index of the added layer, -1 = graph input
    project: bool = False  # residual_add: 1x1 conv + bn on the shortcut

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.out <= 0 or self.k <= 0 or self.stride <= 0 or self.padding < 0):
            raise GraphError(f"conv parameters must be positive: {self}")


@dataclass(frozen=True)
class FlopsReport:
    per_layer: tuple[int, ...]
    per_group: tuple[int, ...]
    head: int
    total: int

    def __post_init__(self):
        if sum(self.per_layer) != self.total:
            raise AssertionError("flops total must equal the sum of its parts")


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    shapes: tuple[tuple[int, ...], ...] = field(repr=False)
    groups: tuple[range, ...]
    head: int
    text: str = field(default="", repr=False, compare=False)

    @property
    def num_classes(self) -> int:
        return self.layers[self.head].out

    def in_shape(self, k: int) -> tuple[int, ...]:
        return self.input_shape if k == 0 else self.shapes[k - 1]

    def group_of(self, k: int) -> int | None:
        for g, r in enumerate(self.groups):
            if k in r:
                return g
        return None

    def conv_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "conv"]

    def fingerprint(self) -> str:
        """Short stable hash of the layer program and input shape."""
        h = hashlib.sha256(repr((self.input_shape, self.layers)).encode())
        return h.hexdigest()[:12]


# -- parsing ----------------------------------------------------------------

_KV = re.compile(r"^([a-z]+)=([0-9]+)$")


def _parse_opts(tokens: list[str], lineno: int) -> tuple[dict[str, int], set[str]]:
    kv: dict[str, int] = {}
    flags: set[str] = set()
    for tok in tokens:
        m = _KV.match(tok)
        if m:
            kv[m.group(1)] = int(m.group(2))
        elif re.fullmatch(r"[a-z]+", tok):
            flags.add(tok)
        else:
            raise GraphError(f"line {lineno}: cannot parse token {tok!r}")
    return kv, flags


def _check_keys(kv, flags, allowed_kv, allowed_flags, lineno, what):
    bad = (set(kv) - set(allowed_kv)) | (flags - set(allowed_flags))
    if bad:
        raise GraphError(f"line {lineno}: unexpected option(s) {sorted(bad)} for {what}")


def parse_description(text: str) -> tuple[tuple[int, int, int], list[LayerSpec]]:
    input_shape = None
    layers: list[LayerSpec] = []
    channels = 0

    def conv(out, k, s, p, dw=False):
        layers.append(LayerSpec("conv", out=out, k=k, stride=s, padding=p, depthwise=dw))

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "input":
            m = re.fullmatch(r"(\d+)x(\d+)x(\d+)", rest[0]) if len(rest) == 1 else None
            if not m or input_shape is not None:
                raise GraphError(f"line {lineno}: expected a single 'input CxHxW' header")
            input_shape = tuple(int(v) for v in m.groups())
            channels = input_shape[0]
            continue
        if input_shape is None:
            raise GraphError(f"line {lineno}: 'input CxHxW' must come first")
        if head == "conv":
            kv, flags = _parse_opts(rest, lineno)
            _check_keys(kv, flags, {"out", "k", "s", "p"}, {"bn", "relu", "dw"}, lineno, "conv")
            if "k" not in kv or ("out" not in kv and "dw" not in flags):
                raise GraphError(f"line {lineno}: conv needs out= and k=")
            out = kv.get("out", channels)
            if "dw" in flags and out != channels:
                raise GraphError(f"line {lineno}: depthwise conv must keep {channels} channels")
            conv(out, kv["k"], kv.get("s", 1), kv.get("p", (kv["k"] - 1) // 2), "dw" in flags)
            if "bn" in flags:
                layers.append(LayerSpec("batch_norm"))
            if "relu" in flags:
                layers.append(LayerSpec("relu"))
            channels = out
        elif head == "block":
            if not rest or rest[0] not in ("res", "mbv2"):
                raise GraphError(f"line {lineno}: block type must be 'res' or 'mbv2'")
            kv, flags = _parse_opts(rest[1:], lineno)
            allowed = {"out", "s", "repeat"} | ({"expand"} if rest[0] == "mbv2" else set())
            _check_keys(kv, flags, allowed, set(), lineno, f"block {rest[0]}")
            if "out" not in kv:
                raise GraphError(f"line {lineno}: block needs out=")
            out = kv["out"]
            for r in range(kv.get("repeat", 1)):
                s = kv.get("s", 1) if r == 0 else 1
                src = len(layers) - 1
                if rest[0] == "res":
                    conv(out, 3, s, 1)
                    layers += [LayerSpec("batch_norm"), LayerSpec("relu")]
                    conv(out, 3, 1, 1)
                    layers.append(LayerSpec("batch_norm"))
                    layers.append(LayerSpec("residual_add", source=src, project=(s != 1 or channels != out)))
                    layers.append(LayerSpec("relu"))
                else:
                    hidden = channels * kv.get("expand", 6)
                    if hidden != channels:
                        conv(hidden, 1, 1, 0)
                        layers += [LayerSpec("batch_norm"), LayerSpec("relu")]
                    conv(hidden, 3, s, 1, dw=True)
                    layers += [LayerSpec("batch_norm"), LayerSpec("relu")]
                    conv(out, 1, 1, 0)
                    layers.append(LayerSpec("batch_norm"))
                    if s == 1 and channels == out:
                        layers.append(LayerSpec("residual_add", source=src))
                channels = out
        elif head == "maxpool":
            kv, flags = _parse_opts(rest, lineno)
            _check_keys(kv, flags, {"k"}, set(), lineno, "maxpool")
            layers.append(LayerSpec("max_pool", k=kv.get("k", 2), stride=kv.get("k", 2)))
        elif head == "gap":
            if rest:
                raise GraphError(f"line {lineno}: gap takes no options")
            layers.append(LayerSpec("global_avg_pool"))
        elif head == "fc":
            kv, flags = _parse_opts(rest, lineno)
            _check_keys(kv, flags, {"out"}, set(), lineno, "fc")
            if "out" not in kv:
                raise GraphError(f"line {lineno}: fc needs out=")
            layers.append(LayerSpec("linear", out=kv["out"]))
        elif head == "softmax":
            layers.append(LayerSpec("softmax_head"))
        else:
            raise GraphError(f"line {lineno}: unknown statement {head!r}")
    if input_shape is None:
        raise GraphError("description has no 'input' header")
    return input_shape, layers


def infer_shapes(input_shape, layers) -> list[tuple[int, ...]]:
    shapes: list[tuple[int, ...]] = []
    cur: tuple[int, ...] = tuple(input_shape)
    for i, l in enumerate(layers):
        if l.kind == "conv":
            if len(cur) != 3:
                raise GraphError(f"layer {i}: conv after flattening")
            C, H, W = cur
            try:
                Ho = T.conv_output_size(H, l.k, l.stride, l.padding)
                Wo = T.conv_output_size(W, l.k, l.stride, l.padding)
            except ValueError as e:
                raise GraphError(f"layer {i}: {e}") from None
            cur = (l.out, Ho, Wo)
        elif l.kind == "max_pool":
            C, H, W = cur
            if H % l.k or W % l.k:
                raise GraphError(f"layer {i}: max_pool {l.k} does not divide {H}x{W}")
            cur = (C, H // l.k, W // l.k)
        elif l.kind == "global_avg_pool":
            if len(cur) != 3:
                raise GraphError(f"layer {i}: gap needs a spatial input")
            cur = (cur[0],)
        elif l.kind == "linear":
            if len(cur) != 1:
                raise GraphError(f"layer {i}: linear needs a pooled input")
            cur = (l.out,)
        elif l.kind == "residual_add":
            if l.source is None or not -1 <= l.source < i:
                raise GraphError(f"layer {i}: dangling residual source {l.source}")
            src = tuple(input_shape) if l.source == -1 else shapes[l.source]
            if not l.project and src != cur:
                raise GraphError(f"layer {i}: residual shapes differ {src} vs {cur} without projection")
            if l.project:
                if src[1] % cur[1] or src[2] % cur[2] or src[1] // cur[1] != src[2] // cur[2]:
                    raise GraphError(f"layer {i}: cannot project {src} onto {cur}")
        shapes.append(cur)
    return shapes


def _resolution_groups(layers, shapes) -> tuple[range, ...]:
    n = 0
    while n < len(shapes) and len(shapes[n]) == 3:
        n += 1
    groups: list[range] = []
    start = 0
    for i in range(1, n + 1):
        if i == n or shapes[i][1:] != shapes[start][1:]:
            groups.append(range(start, i))
            start = i
    return tuple(groups)


def build_model(description: str) -> ModelGraph:
    """Parse and validate a description, inferring every layer's shape."""
    input_shape, layers = parse_description(description)
    if not layers or layers[0].kind != "conv" or layers[0].depthwise:
        raise GraphError("the first layer must be a dense conv")
    shapes = infer_shapes(input_shape, layers)
    lin = [i for i, l in enumerate(layers) if l.kind == "linear"]
    if len(lin) != 1:
        raise GraphError(f"expected exactly one fc prediction layer, found {len(lin)}")
    head = lin[0]
    tail = [l.kind for l in layers[head + 1:]]
    if head == 0 or layers[head - 1].kind != "global_avg_pool" or any(k != "softmax_head" for k in tail):
        raise GraphError("the graph must end with 'gap' then 'fc'")
    groups = _resolution_groups(layers, shapes)
    for i, l in enumerate(layers):
        if l.kind == "residual_add" and not l.project:
            g_src = next((g for g, r in enumerate(groups) if l.source in r), None)
            g_dst = next((g for g, r in enumerate(groups) if i in r), None)
            if g_src != g_dst:
                raise GraphError(f"layer {i}: identity shortcut crosses resolution groups")
    return ModelGraph(tuple(layers), tuple(input_shape), tuple(shapes), groups, head, description)


def load_model(path_or_name: str | Path) -> ModelGraph:
    """Load a description file, or a bundled model by name (e.g. ``resnet20``)."""
    p = Path(path_or_name)
    if not p.exists():
        bundled = MODELS_DIR / f"{path_or_name}.txt"
        if not bundled.exists():
            raise FileNotFoundError(f"no model description at {p} and no bundled model {path_or_name!r}")
        p = bundled
    return build_model(p.read_text())


def bundled_models() -> list[str]:
    return sorted(p.stem for p in MODELS_DIR.glob("*.txt"))


def resolution_groups(graph: ModelGraph) -> list[range]:
    return list(graph.groups)


# -- cost model -------------------------------------------------------------

def layer_macs(graph: ModelGraph, k: int) -> int:
    l = graph.layers[k]
    if l.kind == "conv":
        C = graph.in_shape(k)[0]
        O, Ho, Wo = graph.shapes[k]
        if l.depthwise:
            return O * l.k * l.k * Ho * Wo
        return O * C * l.k * l.k * Ho * Wo
    if l.kind == "linear":
        return graph.in_shape(k)[0] * l.out
    if l.kind == "residual_add" and l.project:
        src = graph.input_shape if l.source == -1 else graph.shapes[l.source]
        O, Ho, Wo = graph.shapes[k]
        return O * src[0] * Ho * Wo
    return 0


def count_flops(graph: ModelGraph, input_shape=None) -> FlopsReport:
    """MACs of one forward pass; BN, ReLU, pooling and additions count zero."""
    if input_shape is not None and tuple(input_shape) != graph.input_shape:
        graph = build_model_from_layers(graph.layers, tuple(input_shape))
    per_layer = tuple(layer_macs(graph, k) for k in range(len(graph.layers)))
    per_group = tuple(sum(per_layer[k] for k in r) for r in graph.groups)
    in_groups = set(k for r in graph.groups for k in r)
    head = sum(m for k, m in enumerate(per_layer) if k not in in_groups)
    return FlopsReport(per_layer, per_group, head, sum(per_layer))


def build_model_from_layers(layers, input_shape) -> ModelGraph:
    shapes = infer_shapes(input_shape, layers)
    head = next(i for i, l in enumerate(layers) if l.kind == "linear")
    return ModelGraph(tuple(layers), tuple(input_shape), tuple(shapes), _resolution_groups(layers, shapes), head)


# -- weights and execution --------------------------------------------------

def is_trainable(name: str) -> bool:
    return not (name.endswith(".mean") or name.endswith(".var"))


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _bn_arrays(prefix: str, C: int, dtype) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.gamma": np.ones(C, dtype),
        f"{prefix}.beta": np.zeros(C, dtype),
        f"{prefix}.mean": np.zeros(C, dtype),
        f"{prefix}.var": np.ones(C, dtype),
    }


def init_weights(graph: ModelGraph, seed: int | np.random.Generator = 0, dtype=np.float64) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}
    for k, l in enumerate(graph.layers):
        C = graph.in_shape(k)[0]
        if l.kind == "conv":
            cin = 1 if l.depthwise else C
            w[f"L{k}.w"] = he_normal(rng, (l.out, cin, l.k, l.k), cin * l.k * l.k, dtype)
        elif l.kind == "batch_norm":
            w.update(_bn_arrays(f"L{k}", graph.shapes[k][0], dtype))
        elif l.kind == "linear":
            w[f"L{k}.w"] = he_normal(rng, (l.out, C), C, dtype)
            w[f"L{k}.b"] = np.zeros(l.out, dtype)
        elif l.kind == "residual_add" and l.project:
            src = graph.input_shape if l.source == -1 else graph.shapes[l.source]
            O = graph.shapes[k][0]
            w[f"L{k}.proj.w"] = he_normal(rng, (O, src[0], 1, 1), src[0], dtype)
            w.update(_bn_arrays(f"L{k}.proj", O, dtype))
    return w


def bind(weights: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    """Wrap arrays as tensors sharing their memory; buffers never require grad."""
    return {k: Tensor(v, requires_grad=requires_grad and is_trainable(k)) for k, v in weights.items()}


def _need(P: Mapping[str, Tensor], name: str) -> Tensor:
    try:
        return P[name]
    except KeyError:
        raise KeyError(f"missing weight {name!r}") from None


def apply_bn(x: Tensor, P, prefix: str, training: bool) -> Tensor:
    return T.batch_norm(
        x, _need(P, f"{prefix}.gamma"), _need(P, f"{prefix}.beta"),
        _need(P, f"{prefix}.mean").data, _need(P, f"{prefix}.var").data, training,
    )


def apply_projection(x: Tensor, P, prefix: str, stride: int, training: bool) -> Tensor:
    y = T.conv2d(x, _need(P, f"{prefix}.proj.w"), stride=stride)
    return apply_bn(y, P, f"{prefix}.proj", training)


def projection_stride(graph: ModelGraph, k: int) -> int:
    src = graph.input_shape if graph.layers[k].source == -1 else graph.shapes[graph.layers[k].source]
    return src[1] // graph.shapes[k][1]


def forward_static(graph: ModelGraph, weights, x, training: bool = False) -> Tensor:
    """Logits of the untransformed model for a batch ``[N, C, H, W]``."""
    P = weights if all(isinstance(v, Tensor) for v in weights.values()) else bind(weights)
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[1:] != graph.input_shape:
        raise ValueError(f"batch shape {x.shape[1:]} does not match model input {graph.input_shape}")
    outs: list[Tensor] = []
    h = x
    for k, l in enumerate(graph.layers):
        if l.kind == "conv":
            w = _need(P, f"L{k}.w")
            if w.shape[0] != l.out:
                raise ValueError(f"weight L{k}.w has shape {w.shape}, layer wants {l.out} outputs")
            h = T.conv2d(h, w, l.stride, l.padding, groups=h.shape[1] if l.depthwise else 1)
        elif l.kind == "batch_norm":
            h = apply_bn(h, P, f"L{k}", training)
        elif l.kind == "relu":
            h = T.relu(h)
        elif l.kind == "max_pool":
            h = T.max_pool2d(h, l.k)
        elif l.kind == "global_avg_pool":
            h = T.global_avg_pool(h)
        elif l.kind == "linear":
            h = T.linear(h, _need(P, f"L{k}.w"), _need(P, f"L{k}.b"))
        elif l.kind == "residual_add":
            src = x if l.source == -1 else outs[l.source]
            if l.project:
                src = apply_projection(src, P, f"L{k}", projection_stride(graph, k), training)
            h = h + src
        outs.append(h)
    return h
