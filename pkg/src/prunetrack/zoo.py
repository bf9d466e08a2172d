"""Gated toy backbones: an AlexNet-style CNN, a bottleneck ResNet, a ViT and an encoder-decoder.

Every builder is a pure function of its arguments; the same seed yields
bit-identical weights. Gates (BN gamma or explicit masks) start at 0.5.
"""
from __future__ import annotations

import numpy as np

from .graph import GateVector, LayerSpec, ModelGraph, siamese_forward, validate

GATE_INIT = 0.5
TEMPLATE_SIZE = 32
SEARCH_SIZE = 64
ARCHITECTURES = ("mini_alex", "mini_resnet", "mini_vit", "mini_encdec")


class _Builder:
    def __init__(self, seed: int, gated: bool):
        self.rng = np.random.default_rng(seed)
        self.gated = gated
        self.nodes: list[LayerSpec] = []
        self.gates: dict[str, GateVector] = {}
        self.last = "image"
        self.nodes.append(LayerSpec("image", "input"))

    def add(self, node: LayerSpec) -> str:
        if not node.inputs:
            node.inputs = [self.last]
        self.nodes.append(node)
        self.last = node.id
        return node.id

    def gate(self, gid, n, granularity, layer, block=None, tag=None) -> str | None:
        if not self.gated:
            return None
        self.gates[gid] = GateVector(gid, np.full(n, GATE_INIT), granularity, layer, block, tag)
        return gid

    def conv(self, nid, cin, cout, k, stride=1, padding=0, inputs=None):
        std = np.sqrt(2.0 / (cin * k * k))
        w = self.rng.normal(0.0, std, size=(cout, cin, k, k))
        return self.add(LayerSpec(nid, "conv", list(inputs or []),
                                  {"w": w, "b": np.zeros(cout)},
                                  {"stride": stride, "padding": padding}))

    def bn(self, nid, c, gated, block=None, inputs=None):
        weights = {"beta": np.zeros(c), "running_mean": np.zeros(c), "running_var": np.ones(c)}
        gid = self.gate(f"{nid}.gamma", c, "channel", nid, block) if gated else None
        if gid is None:
            weights = {"gamma": np.ones(c), **weights}
        return self.add(LayerSpec(nid, "bn", list(inputs or []), weights, gate=gid, block=block))

    def simple(self, nid, kind, inputs=None, **attrs):
        return self.add(LayerSpec(nid, kind, list(inputs or []), attrs=attrs))

    def layernorm(self, nid, d, inputs=None):
        return self.add(LayerSpec(nid, "layernorm", list(inputs or []), {"w": np.ones(d), "b": np.zeros(d)}))

    def _lin(self, out, inp):
        return self.rng.normal(0.0, 1.0 / np.sqrt(inp), size=(out, inp))

    def mhsa(self, nid, d, heads, inputs=None, tag=None, mem_dim=None):
        if d % heads:
            raise ValueError(f"embedding dim {d} is not divisible by {heads} heads")
        hd = d // heads
        md = mem_dim or d
        w = {
            "wq": self._lin(d, d), "bq": np.zeros(d),
            "wk": self._lin(d, md), "bk": np.zeros(d),
            "wv": self._lin(d, md), "bv": np.zeros(d),
            "wo": self._lin(d, d), "bo": np.zeros(d),
        }
        gid = self.gate(f"{nid}.heads", heads, "head", nid, tag=tag)
        return self.add(LayerSpec(nid, "mhsa", list(inputs or []), w,
                                  {"heads": heads, "head_dim": hd}, gate=gid, block=tag))

    def mlp(self, nid, d, hidden, inputs=None, tag=None):
        w = {"w1": self._lin(hidden, d), "b1": np.zeros(hidden),
             "w2": self._lin(d, hidden), "b2": np.zeros(d)}
        gid = self.gate(f"{nid}.units", hidden, "hidden-unit", nid, tag=tag)
        return self.add(LayerSpec(nid, "mlp", list(inputs or []), w, gate=gid, block=tag))

    def finish(self, arch, stride, params) -> ModelGraph:
        head = LayerSpec("head", "xcorr", [], {"bias": np.zeros(1)}, {"scale": 1.0})
        meta = {"arch": arch, "stride": stride, "params": params,
                "template_size": TEMPLATE_SIZE, "search_size": SEARCH_SIZE}
        g = ModelGraph(self.nodes, self.gates, head, self.last, meta)
        validate(g, (1, 3, TEMPLATE_SIZE, TEMPLATE_SIZE))
        head.attrs["scale"] = _response_scale(g, self.rng)
        return g


def _response_scale(g: ModelGraph, rng) -> float:
    # unit-variance response on a noise probe keeps the initial logits in range
    z = rng.random((2, 3, TEMPLATE_SIZE, TEMPLATE_SIZE))
    x = rng.random((2, 3, SEARCH_SIZE, SEARCH_SIZE))
    probe = g.clone()
    for gate in probe.gates.values():
        gate.values[:] = 1.0  # calibrate as if ungated so gated/ungated builds agree
    r = siamese_forward(probe, z, x).data
    std = float(r.std())
    return 1.0 / std if std > 1e-12 else 1.0


def build_mini_alex(widths=(32, 64, 96, 96, 64), seed: int = 0, gated: bool = True) -> ModelGraph:
    """Five conv blocks; BN gates on blocks 1-4, plain conv for block 5, pooling after blocks 1-2."""
    widths = [int(w) for w in widths]
    if len(widths) < 5:
        raise ValueError(f"mini_alex needs 5 channel widths, got {len(widths)}")
    if min(widths) < 1:
        raise ValueError("channel widths must be positive")
    b = _Builder(seed, gated)
    cin = 3
    pads = [0, 0, 1, 1, 1]
    for i, cout in enumerate(widths[:5], start=1):
        b.conv(f"conv{i}", cin, cout, 3, padding=pads[i - 1])
        if i < 5:
            b.bn(f"bn{i}", cout, gated=True)
            b.simple(f"relu{i}", "relu")
            if i <= 2:
                b.simple(f"pool{i}", "maxpool", k=2)
        cin = cout
    return b.finish("mini_alex", 4, {"widths": widths[:5], "seed": seed})


def build_mini_resnet(stages: int = 2, blocks: int = 2, widths=(32, 64), seed: int = 0,
                      gated: bool = True) -> ModelGraph:
    """Bottleneck ResNet. Only the two internal BN gammas of each block are gated."""
    widths = [int(w) for w in widths]
    if len(widths) != stages:
        raise ValueError(f"need one trunk width per stage ({stages}), got {len(widths)}")
    for w in widths:
        if w % 4:
            raise ValueError(f"trunk width {w} is not divisible by the bottleneck factor 4")
    b = _Builder(seed, gated)
    b.conv("stem.conv", 3, widths[0], 3, padding=1)
    b.bn("stem.bn", widths[0], gated=False)
    b.simple("stem.relu", "relu")
    b.simple("stem.pool", "maxpool", k=2)
    cin = widths[0]
    for s, trunk in enumerate(widths):
        mid = trunk // 4
        for j in range(blocks):
            blk = f"s{s}b{j}"
            stride = 2 if (s > 0 and j == 0) else 1
            x_in = b.last
            b.conv(f"{blk}.conv_a", cin, mid, 1)
            b.bn(f"{blk}.bn_a", mid, gated=True, block=blk)
            b.simple(f"{blk}.relu_a", "relu")
            b.conv(f"{blk}.conv_b", mid, mid, 3, stride=stride, padding=1)
            b.bn(f"{blk}.bn_b", mid, gated=True, block=blk)
            b.simple(f"{blk}.relu_b", "relu")
            b.conv(f"{blk}.conv_c", mid, trunk, 1)
            branch = b.bn(f"{blk}.bn_c", trunk, gated=False)
            skip = x_in
            if stride != 1 or cin != trunk:
                b.conv(f"{blk}.proj", cin, trunk, 1, stride=stride, inputs=[x_in])
                skip = b.bn(f"{blk}.proj_bn", trunk, gated=False)
            b.simple(f"{blk}.add", "add", inputs=[skip, branch])
            b.simple(f"{blk}.relu", "relu")
            cin = trunk
    stride = 2 * 2 ** (stages - 1)
    return b.finish("mini_resnet", stride,
                    {"stages": stages, "blocks": blocks, "widths": widths, "seed": seed})


def _encoder_layer(b: _Builder, pre: str, d: int, heads: int, hidden: int, tag=None):
    x = b.last
    b.layernorm(f"{pre}.ln1", d)
    b.mhsa(f"{pre}.attn", d, heads, tag=tag)
    x = b.simple(f"{pre}.add1", "add", inputs=[x, b.last])
    b.layernorm(f"{pre}.ln2", d)
    b.mlp(f"{pre}.mlp", d, hidden, tag=tag)
    return b.simple(f"{pre}.add2", "add", inputs=[x, b.last])


def build_mini_vit(layers: int = 6, dim: int = 64, heads: int = 4, mlp_ratio: int = 4,
                   patch: int = 8, seed: int = 0, gated: bool = True) -> ModelGraph:
    """Pre-norm ViT with per-head attention gates and per-unit MLP gates."""
    if dim % heads:
        raise ValueError(f"embedding dim {dim} is not divisible by {heads} heads")
    b = _Builder(seed, gated)
    embed = b.conv("patch_embed", 3, dim, patch, stride=patch)
    b.simple("tokens", "tokens")
    for i in range(layers):
        _encoder_layer(b, f"L{i}", dim, heads, dim * mlp_ratio)
    b.layernorm("norm", dim)
    b.simple("to_map", "to_map", inputs=[b.last, embed])
    return b.finish("mini_vit", patch, {"layers": layers, "dim": dim, "heads": heads,
                                        "mlp_ratio": mlp_ratio, "patch": patch, "seed": seed})


def build_mini_encdec(stacks: int = 4, dim: int = 96, heads: int = 4, ffn: int = 768,
                      patch: int = 8, seed: int = 0, gated: bool = True) -> ModelGraph:
    """Transformer encoder stack followed by a decoder stack (self-attn, cross-attn, MLP).

    The decoder's target sequence is the encoder output itself; gates carry
    an ``encoder``/``decoder`` tag for decoupled planning.
    """
    if dim % heads:
        raise ValueError(f"embedding dim {dim} is not divisible by {heads} heads")
    b = _Builder(seed, gated)
    embed = b.conv("patch_embed", 3, dim, patch, stride=patch)
    b.simple("tokens", "tokens")
    for i in range(stacks):
        _encoder_layer(b, f"enc{i}", dim, heads, ffn, tag="encoder")
    memory = b.layernorm("enc_norm", dim)
    for i in range(stacks):
        pre = f"dec{i}"
        x = b.last
        b.layernorm(f"{pre}.ln1", dim)
        b.mhsa(f"{pre}.self_attn", dim, heads, tag="decoder")
        x = b.simple(f"{pre}.add1", "add", inputs=[x, b.last])
        b.layernorm(f"{pre}.ln2", dim)
        b.mhsa(f"{pre}.cross_attn", dim, heads, inputs=[b.last, memory], tag="decoder")
        x = b.simple(f"{pre}.add2", "add", inputs=[x, b.last])
        b.layernorm(f"{pre}.ln3", dim)
        b.mlp(f"{pre}.mlp", dim, ffn, tag="decoder")
        b.simple(f"{pre}.add3", "add", inputs=[x, b.last])
    b.layernorm("dec_norm", dim)
    b.simple("to_map", "to_map", inputs=[b.last, embed])
    return b.finish("mini_encdec", patch, {"stacks": stacks, "dim": dim, "heads": heads,
                                           "ffn": ffn, "patch": patch, "seed": seed})


def build(arch: str, **kwargs) -> ModelGraph:
    builders = {
        "mini_alex": build_mini_alex,
        "mini_resnet": build_mini_resnet,
        "mini_vit": build_mini_vit,
        "mini_encdec": build_mini_encdec,
    }
    if arch not in builders:
        raise ValueError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHITECTURES)}")
    return builders[arch](**kwargs)
