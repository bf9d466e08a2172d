"""Parameter and FLOPs accounting.

Conventions: one multiply-accumulate is 2 FLOPs; elementwise ops cost 1
FLOP per output element; batch/layer normalization costs 5 FLOPs per element.
Parameter bytes assume 4-byte storage.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .graph import LayerSpec, ModelGraph, infer_shapes

BYTES_PER_PARAM = 4
NORM_FLOPS = 5
HEADER = ("# FLOPs: 1 MAC = 2 FLOPs; elementwise = 1 FLOP/element; normalization = 5 FLOPs/element; "
          "params stored at 4 bytes")
_ELEMENTWISE = frozenset({"relu", "gelu", "add", "maxpool"})


@dataclass
class LayerCost:
    id: str
    kind: str
    params: int = 0
    buffers: int = 0
    flops: int = 0


@dataclass
class CostReport:
    layers: list[LayerCost] = field(default_factory=list)
    input_shape: tuple | None = None

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_buffers(self) -> int:
        return sum(l.buffers for l in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(l.flops for l in self.layers)

    @property
    def param_bytes(self) -> int:
        return self.total_params * BYTES_PER_PARAM

    @property
    def param_mb(self) -> float:
        return self.param_bytes / 1e6

    def by_kind(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for l in self.layers:
            d = out.setdefault(l.kind, {"params": 0, "flops": 0})
            d["params"] += l.params
            d["flops"] += l.flops
        return out

    def flops_of(self, kind: str) -> int:
        return sum(l.flops for l in self.layers if l.kind == kind)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(HEADER + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "params", "flops"])
        for l in self.layers:
            w.writerow([l.id, l.kind, l.params, l.flops])
        w.writerow(["total", "", self.total_params, self.total_flops])
        return buf.getvalue()


def _layer_params(model: ModelGraph, n: LayerSpec) -> tuple[int, int]:
    w = n.weights
    k = n.kind
    if k == "conv":
        cout, cin, kh, kw = w["w"].shape
        return cout * cin * kh * kw + cout, 0
    if k == "bn":
        c = w["beta"].shape[0]
        return 2 * c, 2 * c
    if k == "layernorm":
        return 2 * w["w"].shape[0], 0
    if k == "linear":
        out, inp = w["w"].shape
        return out * inp + out, 0
    if k == "mhsa":
        d = w["wq"].shape[1]
        dm = w["wk"].shape[1]
        hq = n.attrs["heads"] * n.attrs["head_dim"]
        p = (hq * d + hq) + 2 * (hq * dm + hq) + (d * hq + d)
        if n.gate is not None:
            p += n.attrs["heads"]
        return p, 0
    if k == "mlp":
        hidden, d = w["w1"].shape
        p = 2 * hidden * d + hidden + d
        if n.gate is not None:
            p += hidden
        return p, 0
    if k == "xcorr":
        return w["bias"].shape[0], 0
    return 0, 0


def count_params(model: ModelGraph) -> CostReport:
    rep = CostReport()
    for n in model.nodes + [model.head]:
        p, b = _layer_params(model, n)
        rep.layers.append(LayerCost(n.id, n.kind, p, b))
    return rep


def _numel(shape) -> int:
    out = 1
    for s in shape:
        out *= s
    return out


def count_flops(model: ModelGraph, input_shape=(1, 3, 64, 64)) -> CostReport:
    """Backbone forward cost for ``input_shape`` (the siamese correlation is not included)."""
    shapes = infer_shapes(model, tuple(input_shape))
    rep = count_params(model)
    rep.input_shape = tuple(input_shape)
    index = {l.id: l for l in rep.layers}
    for n in model.nodes:
        out = shapes[n.id]
        k = n.kind
        f = 0
        if k == "conv":
            cout, cin, kh, kw = n.weights["w"].shape
            f = 2 * out[0] * out[2] * out[3] * cout * cin * kh * kw
        elif k in ("bn", "layernorm"):
            f = NORM_FLOPS * _numel(out)
        elif k in _ELEMENTWISE:
            f = _numel(out)
        elif k == "linear":
            o, i = n.weights["w"].shape
            f = 2 * _numel(out[:-1]) * o * i
        elif k == "mhsa":
            nb, tq, d = shapes[n.inputs[0]]
            mem = shapes[n.inputs[1]] if len(n.inputs) > 1 else shapes[n.inputs[0]]
            tk, dm = mem[1], mem[2]
            hq = n.attrs["heads"] * n.attrs["head_dim"]
            proj = 2 * tq * hq * d + 2 * 2 * tk * hq * dm + 2 * tq * d * hq
            f = nb * (proj + 2 * 2 * tq * tk * hq)
        elif k == "mlp":
            hidden, d = n.weights["w1"].shape
            tokens = _numel(out[:-1])
            f = tokens * (2 * 2 * hidden * d + hidden)
        index[n.id].flops = f
    return rep


def enumerate_params(model: ModelGraph) -> int:
    """Brute-force count: the number of elements over every learnable array."""
    return sum(int(arr.size) for _, arr in model.parameters())
