"""Synthetic single-object tracking benchmark.

Sequences are a procedurally textured patch drifting over a textured
background. Tracking follows the fully-convolutional siamese recipe: a fixed
template from the first frame, a search window around the previous
prediction, and the response argmax as the new center. Box size is fixed.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import ModelGraph, feature_stride, forward, param_tensors
from . import autodiff as ad

SUCCESS_THRESHOLDS = np.arange(21) / 20.0
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
BENCHMARK_SEEDS = tuple(range(50))
BENCHMARK_LENGTH = 50
FRAME_SIZE = (96, 96)
OBJECT_SIZE = (12, 20)
MOTION = 3.0
TEXTURE = 4


@dataclass
class SyntheticSequence:
    frames: np.ndarray  # T, H, W, 3 in [0, 1]
    gt_boxes: np.ndarray  # T, 4 as x, y, w, h
    seed: int

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class TrackResult:
    boxes: np.ndarray
    ious: np.ndarray
    center_errors: np.ndarray


@dataclass
class TrackingMetrics:
    ao: float
    sr50: float
    sr75: float
    success_curve: np.ndarray = field(repr=False)
    precision_curve: np.ndarray = field(repr=False)
    n_frames: int = 0

    def as_row(self) -> dict:
        return {"AO": self.ao, "SR@0.5": self.sr50, "SR@0.75": self.sr75}


def _smooth_texture(rng, h, w, cells, contrast):
    # bilinear upsampling of a coarse random grid, one grid per color channel
    cells = max(1, int(cells))
    grid = rng.random((cells + 1, cells + 1, 3))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    img = (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx + g10 * fy * (1 - fx) + g11 * fy * fx)
    base = rng.random(3)
    return np.clip(base + contrast * (img - 0.5), 0.0, 1.0)


def gen_sequence(seed: int, length: int = BENCHMARK_LENGTH, frame_size=FRAME_SIZE,
                 object_size=OBJECT_SIZE, motion: float = MOTION, texture: int = TEXTURE) -> SyntheticSequence:
    """Deterministic sequence for ``seed``; the object keeps its size for the whole sequence."""
    if length < 2:
        raise ValueError("a sequence needs at least 2 frames")
    fh, fw = frame_size
    lo, hi = object_size
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid object size range {object_size}")
    if hi + 2 * motion > min(fh, fw):
        raise ValueError(f"object size {hi} with motion {motion} does not fit a {fh}x{fw} frame")
    rng = np.random.default_rng(seed)
    ow = int(rng.integers(lo, hi + 1))
    oh = int(rng.integers(lo, hi + 1))
    background = _smooth_texture(rng, fh, fw, texture, contrast=0.6)
    patch = _smooth_texture(rng, oh, ow, max(2, texture // 2 + 1), contrast=1.2)
    x = float(rng.integers(0, fw - ow + 1))
    y = float(rng.integers(0, fh - oh + 1))
    frames = np.empty((length, fh, fw, 3))
    boxes = np.empty((length, 4))
    for t in range(length):
        if t > 0 and motion > 0:
            x = float(np.clip(round(x + rng.uniform(-motion, motion)), 0, fw - ow))
            y = float(np.clip(round(y + rng.uniform(-motion, motion)), 0, fh - oh))
        f = background.copy()
        xi, yi = int(x), int(y)
        f[yi:yi + oh, xi:xi + ow] = patch
        frames[t] = f
        boxes[t] = (x, y, ow, oh)
    return SyntheticSequence(frames, boxes, seed)


def crop(frame: np.ndarray, cx: float, cy: float, size: int) -> np.ndarray:
    """size x size window centered at (cx, cy), CHW; out-of-frame pixels get the frame mean."""
    h, w, _ = frame.shape
    x0 = int(np.floor(cx - size / 2.0 + 0.5))
    y0 = int(np.floor(cy - size / 2.0 + 0.5))
    out = np.empty((size, size, 3))
    out[:] = frame.mean(axis=(0, 1))
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = frame[sy0:sy1, sx0:sx1]
    return out.transpose(2, 0, 1)


def box_center(box) -> tuple[float, float]:
    return box[0] + box[2] / 2.0, box[1] + box[3] / 2.0


def iou(a, b) -> float:
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    if min(aw, ah, bw, bh) < 0:
        raise ValueError("boxes must have non-negative width and height")
    # (x + w) - x can round above w; an overlap is never wider than the narrower box
    iw = min(max(0.0, min(ax + aw, bx + bw) - max(ax, bx)), aw, bw)
    ih = min(max(0.0, min(ay + ah, by + bh) - max(ay, by)), ah, bh)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _iou_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iw = np.clip(np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    iw = np.minimum(iw, np.minimum(a[:, 2], b[:, 2]))
    ih = np.minimum(ih, np.minimum(a[:, 3], b[:, 3]))
    inter = iw * ih
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def track_many(model: ModelGraph, sequences: Sequence[SyntheticSequence]) -> list[TrackResult]:
    """Track several sequences in lockstep (one batched forward per frame index)."""
    if not sequences:
        return []
    for s in sequences:
        if len(s) < 2:
            raise ValueError(f"sequence {s.seed} has no frames after initialization")
        if s.gt_boxes[0, 2] <= 0 or s.gt_boxes[0, 3] <= 0:
            raise ValueError(f"sequence {s.seed} has a degenerate initial box")
    params = param_tensors(model)
    tsz, ssz = model.metadata["template_size"], model.metadata["search_size"]
    stride = feature_stride(model)
    centers = np.array([box_center(s.gt_boxes[0]) for s in sequences])
    sizes = np.array([s.gt_boxes[0, 2:] for s in sequences])
    z = np.stack([crop(s.frames[0], cx, cy, tsz) for s, (cx, cy) in zip(sequences, centers)])
    zf = forward(model, z, params)
    scale, bias = model.head.attrs["scale"], params["head.bias"]
    lengths = np.array([len(s) for s in sequences])
    preds = [np.empty((n, 2)) for n in lengths]
    for i in range(len(sequences)):
        preds[i][0] = centers[i]
    for t in range(1, lengths.max()):
        live = np.nonzero(lengths > t)[0]
        xs = np.stack([crop(sequences[i].frames[t], *np.round(centers[i]), ssz) for i in live])
        xf = forward(model, xs, params)
        zl = ad.Tensor(zf.data[live])
        resp = ad.add(ad.scalar_mul(ad.xcorr(zl, xf), scale), bias).data[:, 0]
        rh, rw = resp.shape[1:]
        flat = resp.reshape(len(live), -1).argmax(axis=1)
        ri, rj = np.unravel_index(flat, (rh, rw))
        dy = (ri - (rh - 1) / 2.0) * stride
        dx = (rj - (rw - 1) / 2.0) * stride
        for k, i in enumerate(live):
            fh, fw = sequences[i].frames.shape[1:3]
            cx = np.clip(np.round(centers[i][0]) + dx[k], 0, fw)
            cy = np.clip(np.round(centers[i][1]) + dy[k], 0, fh)
            centers[i] = (cx, cy)
            preds[i][t] = centers[i]
    results = []
    for i, s in enumerate(sequences):
        w, h = sizes[i]
        boxes = np.column_stack([preds[i][:, 0] - w / 2.0, preds[i][:, 1] - h / 2.0,
                                 np.full(len(s), w), np.full(len(s), h)])
        gt_c = s.gt_boxes[:, :2] + s.gt_boxes[:, 2:] / 2.0
        err = np.hypot(*(preds[i] - gt_c).T)
        results.append(TrackResult(boxes, _iou_rows(boxes, s.gt_boxes), err))
    return results


def track(model: ModelGraph, sequence: SyntheticSequence) -> TrackResult:
    return track_many(model, [sequence])[0]


def compute_metrics(results: Sequence[TrackResult]) -> TrackingMetrics:
    """GOT-10k style summary; the initialization frame of each result is not scored.

    Success uses strict ``IoU > t``; precision uses ``center error <= d`` pixels.
    """
    if not results:
        raise ValueError("no tracking results to score")
    ious = np.concatenate([r.ious[1:] for r in results])
    errs = np.concatenate([r.center_errors[1:] for r in results])
    if ious.size == 0:
        raise ValueError("no scored frames (every sequence has only its init frame)")
    success = (ious[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    precision = (errs[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    return TrackingMetrics(float(ious.mean()), float(success[10]), float(success[15]),
                           success, precision, int(ious.size))


def benchmark_suite(seeds=BENCHMARK_SEEDS, length: int = BENCHMARK_LENGTH) -> list[SyntheticSequence]:
    return [gen_sequence(s, length) for s in seeds]


def evaluate(model: ModelGraph, sequences: Sequence[SyntheticSequence] | None = None) -> TrackingMetrics:
    if sequences is None:
        sequences = benchmark_suite()
    return compute_metrics(track_many(model, sequences))


def export_sequence(seq: SyntheticSequence, directory: str | os.PathLike) -> Path:
    """Write frames as binary PPM images plus ``groundtruth.txt`` ("x y w h" per line)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(seq.frames):
        h, w, _ = f.shape
        pix = np.round(f * 255).astype(np.uint8)
        with open(d / f"{t:05d}.ppm", "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(pix.tobytes())
    lines = [" ".join(f"{v:g}" for v in box) for box in seq.gt_boxes]
    (d / "groundtruth.txt").write_text("\n".join(lines) + "\n")
    return d


# ---------------------------------------------------------------- training pairs

def label_map(size: int, center: tuple[float, float], radius: float = 2.0) -> np.ndarray:
    """+1 within ``radius`` cells of ``center`` (row, col), -1 elsewhere."""
    ii, jj = np.mgrid[0:size, 0:size]
    d = np.hypot(ii - center[0], jj - center[1])
    return np.where(d <= radius, 1.0, -1.0)


class PairStream:
    """Deterministic stream of (template, search, label) batches cut from training sequences.

    Training sequences use seeds disjoint from the benchmark suite.
    """

    def __init__(self, model: ModelGraph, seed: int = 0, n_sequences: int = 16,
                 seq_length: int = 20, radius: float = 2.0, max_gap: int = 10):
        self.rng = np.random.default_rng(seed)
        self.sequences = [gen_sequence(100_000 + 1000 * seed + i, seq_length) for i in range(n_sequences)]
        self.tsz = model.metadata["template_size"]
        self.ssz = model.metadata["search_size"]
        self.stride = feature_stride(model)
        self.radius = radius
        self.max_gap = max_gap
        zshape = forward(model, np.zeros((1, 3, self.tsz, self.tsz))).shape
        xshape = forward(model, np.zeros((1, 3, self.ssz, self.ssz))).shape
        self.response = xshape[2] - zshape[2] + 1

    def batch(self, size: int):
        zs, xs, ys = [], [], []
        c = (self.response - 1) / 2.0
        limit = int(c * self.stride)
        for _ in range(size):
            s = self.sequences[int(self.rng.integers(len(self.sequences)))]
            i = int(self.rng.integers(len(s)))
            j = int(np.clip(i + self.rng.integers(-self.max_gap, self.max_gap + 1), 0, len(s) - 1))
            zc = box_center(s.gt_boxes[i])
            xc = box_center(s.gt_boxes[j])
            sx, sy = self.rng.integers(-limit, limit + 1, size=2)
            zs.append(crop(s.frames[i], *np.round(zc), self.tsz))
            xs.append(crop(s.frames[j], np.round(xc[0]) + sx, np.round(xc[1]) + sy, self.ssz))
            ys.append(label_map(self.response, (c - sy / self.stride, c - sx / self.stride), self.radius))
        return np.stack(zs), np.stack(xs), np.stack(ys)[:, None]
