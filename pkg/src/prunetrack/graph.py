"""Model graph data structures, shape inference and the forward interpreter."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

KINDS = (
    "input", "conv", "bn", "relu", "gelu", "maxpool", "add", "tokens", "to_map",
    "layernorm", "linear", "mhsa", "mlp", "xcorr",
)
# tensors that are state, not learnable parameters
BUFFERS = frozenset({"running_mean", "running_var"})
# channel deletions flow through these untouched
PASS_THROUGH = frozenset({"relu", "gelu", "maxpool"})


class GraphError(ValueError):
    pass


@dataclass
class GateVector:
    id: str
    values: np.ndarray
    granularity: str  # channel | head | hidden-unit
    layer: str
    block: str | None = None
    tag: str | None = None  # encoder | decoder

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass
class LayerSpec:
    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)
    gate: str | None = None
    block: str | None = None

    @property
    def prunable(self) -> bool:
        return self.gate is not None


@dataclass
class ModelGraph:
    nodes: list[LayerSpec]
    gates: dict[str, GateVector]
    head: LayerSpec
    output: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {n.id: n for n in self.nodes}

    @property
    def name(self) -> str:
        return self.metadata.get("arch", "?")

    def node(self, node_id: str) -> LayerSpec:
        return self._index[node_id]

    def reindex(self) -> None:
        self._index = {n.id: n for n in self.nodes}

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(src, n.id) for n in self.nodes for src in n.inputs]

    def consumers(self, node_id: str) -> list[LayerSpec]:
        return [n for n in self.nodes if node_id in n.inputs]

    def gate_owner(self, gate_id: str) -> LayerSpec:
        for n in self.nodes:
            if n.gate == gate_id:
                return n
        raise GraphError(f"gate {gate_id!r} is not attached to any layer")

    def clone(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        """Learnable arrays keyed ``node.weight`` and ``gate:<id>``; arrays are live."""
        for n in self.nodes + [self.head]:
            for name, arr in n.weights.items():
                if name not in BUFFERS:
                    yield f"{n.id}.{name}", arr
        for gid, g in self.gates.items():
            yield f"gate:{gid}", g.values

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every stored array including buffers, in a fixed order."""
        for n in self.nodes + [self.head]:
            for name, arr in n.weights.items():
                yield f"{n.id}.{name}", arr
        for gid, g in self.gates.items():
            yield f"gate:{gid}", g.values

    def gate_snapshot_hash(self) -> str:
        h = hashlib.sha256()
        for gid in sorted(self.gates):
            h.update(gid.encode())
            h.update(np.ascontiguousarray(self.gates[gid].values, dtype="<f8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------- shape inference

def infer_shapes(graph: ModelGraph, input_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    """Per-node output shape for an NCHW input, raising ShapeError on any mismatch."""
    shapes: dict[str, tuple[int, ...]] = {}
    for n in graph.nodes:
        ins = [shapes[i] for i in n.inputs]
        shapes[n.id] = _node_shape(graph, n, ins, tuple(input_shape))
    return shapes


def _node_shape(graph, n: LayerSpec, ins, input_shape):
    k = n.kind
    w = n.weights
    if k == "input":
        if len(input_shape) != 4:
            raise ShapeError(f"{n.id}: expected NCHW input, got {input_shape}")
        return input_shape
    x = ins[0]
    if k == "conv":
        cout, cin, kk, _ = w["w"].shape
        if x[1] != cin:
            raise ShapeError(f"{n.id}: Cin {cin} != producer channels {x[1]}", axis="Cin")
        s, p = n.attrs.get("stride", 1), n.attrs.get("padding", 0)
        ho, wo = (x[2] + 2 * p - kk) // s + 1, (x[3] + 2 * p - kk) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{n.id}: kernel {kk} larger than input {x[2]}x{x[3]}", axis="H")
        return (x[0], cout, ho, wo)
    if k == "bn":
        c = _bn_channels(graph, n)
        if x[1] != c:
            raise ShapeError(f"{n.id}: BN has {c} channels, input has {x[1]}", axis="C")
        return x
    if k in ("relu", "gelu"):
        return x
    if k == "maxpool":
        kk = n.attrs.get("k", 2)
        if x[2] < kk or x[3] < kk:
            raise ShapeError(f"{n.id}: input smaller than pool", axis="H")
        return (x[0], x[1], x[2] // kk, x[3] // kk)
    if k == "add":
        if ins[0] != ins[1]:
            raise ShapeError(f"{n.id}: residual operands {ins[0]} vs {ins[1]}", axis="C")
        return x
    if k == "tokens":
        return (x[0], x[2] * x[3], x[1])
    if k == "to_map":
        ref = ins[1]
        if x[1] != ref[2] * ref[3]:
            raise ShapeError(f"{n.id}: {x[1]} tokens do not fit grid {ref[2]}x{ref[3]}")
        return (x[0], x[2], ref[2], ref[3])
    if k == "layernorm":
        if w["w"].shape[0] != x[-1]:
            raise ShapeError(f"{n.id}: layernorm width {w['w'].shape[0]} vs {x[-1]}", axis=-1)
        return x
    if k == "linear":
        if w["w"].shape[1] != x[-1]:
            raise ShapeError(f"{n.id}: linear in-features mismatch", axis="in_features")
        return x[:-1] + (w["w"].shape[0],)
    if k == "mhsa":
        d = x[-1]
        heads, hd = n.attrs["heads"], n.attrs["head_dim"]
        for nm in ("wq", "wk", "wv"):
            if w[nm].shape != (heads * hd, d if nm == "wq" or len(ins) == 1 else ins[1][-1]):
                raise ShapeError(f"{n.id}: {nm} shape {w[nm].shape}", axis="heads")
        if w["wo"].shape != (d, heads * hd):
            raise ShapeError(f"{n.id}: wo shape {w['wo'].shape}", axis="heads")
        if n.gate is not None and len(graph.gates[n.gate]) != heads:
            raise ShapeError(f"{n.id}: head gate length vs {heads} heads", axis="heads")
        return x
    if k == "mlp":
        hidden, d = w["w1"].shape
        if d != x[-1] or w["w2"].shape != (x[-1], hidden):
            raise ShapeError(f"{n.id}: mlp weight shapes", axis="hidden")
        if n.gate is not None and len(graph.gates[n.gate]) != hidden:
            raise ShapeError(f"{n.id}: unit gate length vs {hidden} units", axis="hidden")
        return x
    raise GraphError(f"unknown layer kind {k!r}")


def _bn_channels(graph, n: LayerSpec) -> int:
    return len(graph.gates[n.gate]) if n.gate is not None else n.weights["gamma"].shape[0]


def validate(graph: ModelGraph, input_shape=(1, 3, 32, 32)) -> None:
    """Check acyclicity, gate references and shape consistency."""
    seen: set[str] = set()
    for n in graph.nodes:
        if n.kind not in KINDS:
            raise GraphError(f"{n.id}: unknown kind {n.kind!r}")
        if n.id in seen:
            raise GraphError(f"duplicate node id {n.id!r}")
        for i in n.inputs:
            if i not in seen:
                raise GraphError(f"{n.id}: input {i!r} is not an earlier node (cycle or dangling edge)")
        seen.add(n.id)
    if graph.output not in seen:
        raise GraphError(f"output {graph.output!r} is not a node")
    refs: dict[str, int] = {}
    for n in graph.nodes:
        if n.gate is not None:
            if n.gate not in graph.gates:
                raise GraphError(f"{n.id}: unknown gate {n.gate!r}")
            refs[n.gate] = refs.get(n.gate, 0) + 1
    for gid in graph.gates:
        if refs.get(gid, 0) != 1:
            raise GraphError(f"gate {gid!r} referenced {refs.get(gid, 0)} times")
    infer_shapes(graph, input_shape)


# ---------------------------------------------------------------- forward

def param_tensors(graph: ModelGraph, requires_grad: bool = False) -> dict[str, Tensor]:
    return {key: Tensor(arr, requires_grad=requires_grad, name=key) for key, arr in graph.parameters()}


def forward(graph: ModelGraph, x, params: Mapping[str, Tensor] | None = None,
            training: bool = False, gated: bool = True) -> Tensor:
    """Run the backbone on an NCHW batch and return the output feature map.

    ``gated=False`` evaluates explicit masks as absent (BN gates still act as gamma).
    """
    if params is None:
        params = param_tensors(graph)
    x = x if isinstance(x, Tensor) else Tensor(x)
    vals: dict[str, Tensor] = {}
    for n in graph.nodes:
        ins = [vals[i] for i in n.inputs]
        vals[n.id] = _run(graph, n, ins, params, x, training, gated)
    return vals[graph.output]


def _p(params, n, name):
    return params[f"{n.id}.{name}"]


def _run(graph, n: LayerSpec, ins, params, x, training, gated) -> Tensor:
    k = n.kind
    if k == "input":
        return x
    a = ins[0] if ins else None
    if k == "conv":
        return ad.conv2d(a, _p(params, n, "w"), _p(params, n, "b"),
                         n.attrs.get("stride", 1), n.attrs.get("padding", 0))
    if k == "bn":
        gamma = params[f"gate:{n.gate}"] if n.gate is not None else _p(params, n, "gamma")
        return ad.batchnorm(a, gamma, _p(params, n, "beta"), n.weights["running_mean"],
                            n.weights["running_var"], training)
    if k == "relu":
        return ad.relu(a)
    if k == "gelu":
        return ad.gelu(a)
    if k == "maxpool":
        return ad.maxpool2d(a, n.attrs.get("k", 2))
    if k == "add":
        return ad.add(a, ins[1])
    if k == "tokens":
        nb, c, h, w = a.shape
        return ad.transpose(ad.reshape(a, (nb, c, h * w)), (0, 2, 1))
    if k == "to_map":
        nb, t, c = a.shape
        h, w = ins[1].shape[2], ins[1].shape[3]
        return ad.reshape(ad.transpose(a, (0, 2, 1)), (nb, c, h, w))
    if k == "layernorm":
        return ad.layer_norm(a, _p(params, n, "w"), _p(params, n, "b"))
    if k == "linear":
        return ad.linear(a, _p(params, n, "w"), _p(params, n, "b"))
    if k == "mhsa":
        mem = ins[1] if len(ins) > 1 else a
        gate = params[f"gate:{n.gate}"] if (n.gate is not None and gated) else None
        return attention(a, mem, params, n, gate)
    if k == "mlp":
        h = ad.gelu(ad.linear(a, _p(params, n, "w1"), _p(params, n, "b1")))
        if n.gate is not None and gated:
            h = ad.mul(h, params[f"gate:{n.gate}"])
        return ad.linear(h, _p(params, n, "w2"), _p(params, n, "b2"))
    raise GraphError(f"cannot execute kind {k!r}")


def attention(x: Tensor, mem: Tensor, params, n: LayerSpec, gate: Tensor | None) -> Tensor:
    """Multi-head attention; head h's output is scaled by ``gate[h]`` before the out-projection."""
    heads, hd = n.attrs["heads"], n.attrs["head_dim"]
    nb, tq, d = x.shape
    tk = mem.shape[1]
    if heads == 0:
        return ad.add(ad.scalar_mul(x, 0.0), _p(params, n, "bo"))

    def split(t, length):
        return ad.transpose(ad.reshape(t, (nb, length, heads, hd)), (0, 2, 1, 3))

    q = split(ad.linear(x, _p(params, n, "wq"), _p(params, n, "bq")), tq)
    k = split(ad.linear(mem, _p(params, n, "wk"), _p(params, n, "bk")), tk)
    v = split(ad.linear(mem, _p(params, n, "wv"), _p(params, n, "bv")), tk)
    scores = ad.scalar_mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    o = ad.matmul(ad.softmax_lastdim(scores), v)  # nb, heads, tq, hd
    if gate is not None:
        o = ad.mul(o, ad.reshape(gate, (1, heads, 1, 1)))
    o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (nb, tq, heads * hd))
    return ad.linear(o, _p(params, n, "wo"), _p(params, n, "bo"))


def siamese_forward(graph: ModelGraph, template, search, params=None, training=False,
                    gated: bool = True) -> Tensor:
    """Response map (N,1,Hs-Ht+1,Ws-Wt+1) of template features correlated over search features."""
    if params is None:
        params = param_tensors(graph)
    zf = forward(graph, template, params, training, gated)
    xf = forward(graph, search, params, training, gated)
    if zf.shape[2] > xf.shape[2] or zf.shape[3] > xf.shape[3]:
        raise ShapeError(f"template features {zf.shape[2:]} larger than search features {xf.shape[2:]}",
                         axis="H")
    r = ad.xcorr(zf, xf)
    h = graph.head
    return ad.add(ad.scalar_mul(r, h.attrs["scale"]), _p(params, h, "bias"))


def feature_stride(graph: ModelGraph) -> int:
    return int(graph.metadata["stride"])
