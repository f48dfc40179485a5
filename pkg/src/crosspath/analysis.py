"""Introspection of trained multi-path models.

Route tracing, ranking samples by a gate value, synthesizing an input that
maximizes a gate's pre-softmax relevance score, and per-path weight
histograms. Every function here is a pure read of the model.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .data import Dataset
from .models import ModelGraph, RouteTrace, forward, run
from .tensor import Tape, Tensor


def model_hash(model: ModelGraph) -> str:
    h = hashlib.sha256()
    for name, t in model.params.items():
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


# --- route tracing ----------------------------------------------------------------

def trace_routes(model: ModelGraph, ds: Dataset, batch_size: int = 128, idx=None) -> RouteTrace:
    """One trace per sample: gate matrices and relative path strengths per cross layer."""
    idx = np.arange(len(ds)) if idx is None else np.asarray(idx)
    parts = []
    for start in range(0, len(idx), batch_size):
        sel = idx[start:start + batch_size]
        x = ds.normalized(sel).astype(model.dtype)
        _, tr = forward(model, x, trace=True, sample_ids=ds.ids[sel], labels=ds.labels[sel])
        if ds.contexts is not None:
            tr.contexts = ds.contexts[sel]
        parts.append(tr)
    return RouteTrace.concat(parts)


TRACE_CSV_HEADER = ["sample_id", "label", "context", "layer", "n", "m", "gates", "in_strength", "out_strength"]


def _join(values) -> str:
    return ";".join(f"{v:.6g}" for v in np.ravel(values))


def export_trace_csv(trace: RouteTrace, path) -> None:
    """One row per (sample, cross layer).

    ``gates`` lists the n x m gate matrix row-major (entry [j, i] is the gate
    from input i to output j), ``in_strength``/``out_strength`` the relative
    path strengths; list fields are ``;``-separated.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_CSV_HEADER)
        for s in range(trace.n_samples):
            for lt in trace.layers:
                _, n, m = lt.gates.shape
                w.writerow([
                    int(trace.sample_ids[s]),
                    "" if trace.labels is None else int(trace.labels[s]),
                    "" if trace.contexts is None else int(trace.contexts[s]),
                    lt.layer, n, m,
                    _join(lt.gates[s]), _join(lt.in_strength[s]), _join(lt.out_strength[s]),
                ])


def export_trace_json(trace: RouteTrace, path) -> None:
    records = []
    for row in trace.rows():
        row = dict(row)
        for k in ("gates", "in_strength", "out_strength"):
            row[k] = np.asarray(row[k]).tolist()
        records.append(row)
    Path(path).write_text(json.dumps({"records": records}))


def mean_gates_by_group(trace: RouteTrace, groups: np.ndarray) -> dict[int, list[np.ndarray]]:
    """Mean gate matrix (n x m) per cross layer for each group value."""
    groups = np.asarray(groups)
    return {int(g): [lt.gates[groups == g].mean(axis=0) for lt in trace.layers] for g in np.unique(groups)}


@dataclass
class GateDivergence:
    layer: int
    input_index: int
    l1: float


def context_gate_divergence(trace: RouteTrace, contexts: np.ndarray | None = None) -> list[GateDivergence]:
    """L1 distance between per-context mean gate vectors G_i, per layer and input.

    With more than two contexts the largest pairwise distance is reported.
    Sorted from most to least divergent.
    """
    contexts = trace.contexts if contexts is None else np.asarray(contexts)
    if contexts is None:
        raise ValueError("trace carries no context ids")
    means = mean_gates_by_group(trace, contexts)
    keys = sorted(means)
    out = []
    for li, lt in enumerate(trace.layers):
        for i in range(lt.gates.shape[2]):
            best = 0.0
            for a in range(len(keys)):
                for b in range(a + 1, len(keys)):
                    d = np.abs(means[keys[a]][li][:, i] - means[keys[b]][li][:, i]).sum()
                    best = max(best, float(d))
            out.append(GateDivergence(lt.layer, i, best))
    return sorted(out, key=lambda d: -d.l1)


# --- ranking ------------------------------------------------------------------------

@dataclass
class GateRanking:
    layer: int
    input_index: int
    gate_index: int
    top_ids: np.ndarray
    top_values: np.ndarray
    bottom_ids: np.ndarray
    bottom_values: np.ndarray


def rank_values(values: np.ndarray, ids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the k largest and k smallest values; ties broken by sample id."""
    values, ids = np.asarray(values), np.asarray(ids)
    top = np.lexsort((ids, -values))[:k]
    bottom = np.lexsort((ids, values))[:k]
    return top, bottom


def _check_address(model: ModelGraph, layer: int, i: int, j: int):
    crosses = model.cross_layers
    if not 0 <= layer < len(crosses):
        raise IndexError(f"cross layer {layer} out of range (model has {len(crosses)})")
    cl = crosses[layer]
    if not 0 <= i < cl.m:
        raise IndexError(f"input index {i} out of range for layer {layer} (m={cl.m})")
    if not 0 <= j < cl.n:
        raise IndexError(f"gate index {j} out of range for layer {layer} (n={cl.n})")
    return cl


def rank_by_gate(model: ModelGraph, ds: Dataset, layer: int, i: int, j: int, k: int = 10,
                 trace: RouteTrace | None = None) -> GateRanking:
    """Samples with the highest and lowest gate value g_ij at a cross layer."""
    _check_address(model, layer, i, j)
    if k < 1:
        raise ValueError("k must be >= 1")
    trace = trace if trace is not None else trace_routes(model, ds)
    values = trace.layers[layer].gates[:, j, i]
    top, bottom = rank_values(values, trace.sample_ids, k)
    return GateRanking(layer, i, j, trace.sample_ids[top], values[top], trace.sample_ids[bottom], values[bottom])


def export_ranking_csv(r: GateRanking, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["extreme", "rank", "sample_id", "gate_value"])
        for name, ids, vals in (("top", r.top_ids, r.top_values), ("bottom", r.bottom_ids, r.bottom_values)):
            for rank, (sid, v) in enumerate(zip(ids, vals)):
                w.writerow([name, rank, int(sid), repr(float(v))])


# --- gate-neuron input synthesis -------------------------------------------------------

@dataclass
class SynthesisConfig:
    layer: int = 1
    input_index: int = 0
    gate_index: int = 0
    steps: int = 256
    step_size: float = 0.1
    l2: float = 0.01
    init: str = "zeros"  # or "noise"
    seed: int = 0


@dataclass
class SynthesisResult:
    image: np.ndarray  # normalized domain, (C, H, W)
    raw_image: np.ndarray  # pixel domain [0, 1]
    objective: np.ndarray  # per step, index 0 = init
    relevance: np.ndarray  # the targeted pre-softmax score per step


class SynthesisDiverged(FloatingPointError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"gate synthesis produced non-finite values at step {step}")


def synthesize_gate_input(model: ModelGraph, cfg: SynthesisConfig, mean=None, std=None) -> SynthesisResult:
    """Projected gradient ascent on the input for ``a_ij - l2 * ||x||^2``.

    Works in the normalized input domain. The L2 term is applied as a
    proximal shrink, ``x <- clip((x + step * da/dx) / (1 + 2 * step * l2))``,
    with the clip keeping every pixel inside the valid [0, 1] range mapped
    through the normalization. Model parameters are not touched.
    """
    cl = _check_address(model, cfg.layer, cfg.input_index, cfg.gate_index)
    if cl.mode != "adaptive":
        raise ValueError("gate synthesis needs an adaptive cross layer (fixed-stitch gates have no input)")
    if cfg.init not in ("zeros", "noise"):
        raise ValueError(f"unknown init {cfg.init!r}")
    mean = model.input_mean if mean is None else np.asarray(mean, np.float64)
    std = model.input_std if std is None else np.asarray(std, np.float64)
    shape = (1, *model.spec.input_shape)
    if mean is not None:
        lo = ((0.0 - mean) / std).astype(model.dtype)[None, :, None, None]
        hi = ((1.0 - mean) / std).astype(model.dtype)[None, :, None, None]
    else:
        lo, hi = -np.inf, np.inf
    if cfg.init == "zeros":
        x = np.zeros(shape, model.dtype)
    else:
        x = np.random.default_rng(cfg.seed).normal(0, 0.1, shape).astype(model.dtype)
    x = np.clip(x, lo, hi).astype(model.dtype)

    saved = {k: t.requires_grad for k, t in model.params.items()}
    objective, relevance = [], []
    try:
        for t in model.params.values():
            t.requires_grad = False
        shrink = model.dtype.type(1.0 / (1.0 + 2.0 * cfg.step_size * cfg.l2))
        for step in range(cfg.steps + 1):
            xt = Tensor(x, requires_grad=True)
            with Tape() as tape:
                res = run(model, xt, stop_after_cross=cl.index)
                a = ops.select(res.crosses[-1][1].logits[cfg.input_index], (0, cfg.gate_index))
            a_val = float(a.data)
            obj = a_val - cfg.l2 * float(np.sum(x.astype(np.float64) ** 2))
            if not np.isfinite(obj):
                raise SynthesisDiverged(step)
            objective.append(obj)
            relevance.append(a_val)
            if step == cfg.steps or cfg.step_size == 0:
                if cfg.step_size == 0:
                    objective.extend([obj] * (cfg.steps - step))
                    relevance.extend([a_val] * (cfg.steps - step))
                break
            tape.backward(a)
            grad = xt.grad
            if not np.isfinite(grad).all():
                raise SynthesisDiverged(step)
            x = np.clip((x + model.dtype.type(cfg.step_size) * grad) * shrink, lo, hi).astype(model.dtype)
    finally:
        for k, t in model.params.items():
            t.requires_grad = saved[k]
    img = x[0]
    raw = img if mean is None else np.clip(img * std[:, None, None] + mean[:, None, None], 0, 1)
    return SynthesisResult(img.copy(), np.asarray(raw, np.float64), np.asarray(objective), np.asarray(relevance))


def export_objective_csv(res: SynthesisResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "objective", "relevance"])
        for s, (o, a) in enumerate(zip(res.objective, res.relevance)):
            w.writerow([s, repr(float(o)), repr(float(a))])


def write_ppm(path, image: np.ndarray, scale: int = 1) -> None:
    """Binary P6 dump of a CHW image with values in [0, 1]."""
    img = np.clip(np.asarray(image, np.float64), 0, 1)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm expects a 3 x H x W image, got {img.shape}")
    hwc = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
    if scale > 1:
        hwc = hwc.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w, _ = hwc.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(hwc.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a P6 file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4], np.uint8)[: w * h * 3].reshape(h, w, 3)
    return data.transpose(2, 0, 1).astype(np.float64) / maxval


# --- weight histograms ----------------------------------------------------------------

@dataclass
class LayerHistogram:
    layer: str
    edges: np.ndarray
    counts: np.ndarray  # (paths, bins)
    distances: np.ndarray  # (paths, paths) L1 over normalized bins

    @property
    def max_distance(self) -> float:
        return float(self.distances.max())


def weight_histograms(model: ModelGraph, layers: Sequence[str] = ("conv2", "conv4", "conv6", "fc1"),
                      bins: int = 40) -> list[LayerHistogram]:
    """Per-path histograms of one layer's parameters (weights and bias) on shared bins."""
    if model.paths < 2:
        raise ValueError(f"weight histograms compare paths; model has {model.paths}")
    out = []
    for layer in layers:
        per_path = []
        for p in range(model.paths):
            names = [f"path{p}.{layer}.weight", f"path{p}.{layer}.bias"]
            if names[0] not in model.params:
                raise KeyError(f"no layer named {layer!r}")
            per_path.append(np.concatenate([model.params[n].data.ravel() for n in names]).astype(np.float64))
        lo = min(v.min() for v in per_path)
        hi = max(v.max() for v in per_path)
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, bins + 1)
        counts = np.stack([np.histogram(v, bins=edges)[0] for v in per_path])
        norm = counts / counts.sum(axis=1, keepdims=True)
        dist = np.abs(norm[:, None, :] - norm[None, :, :]).sum(axis=2)
        out.append(LayerHistogram(layer, edges, counts, dist))
    return out


def export_histograms_csv(hists: Sequence[LayerHistogram], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "path", "bin", "left", "right", "count"])
        for h in hists:
            for p in range(h.counts.shape[0]):
                for b in range(h.counts.shape[1]):
                    w.writerow([h.layer, p, b, repr(float(h.edges[b])), repr(float(h.edges[b + 1])), int(h.counts[p, b])])


# --- SVG ----------------------------------------------------------------------------

_PATH_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def histogram_svg(hist: LayerHistogram, width: int = 420, height: int = 220) -> str:
    paths, bins = hist.counts.shape
    norm = hist.counts / hist.counts.sum(axis=1, keepdims=True)
    top = norm.max() or 1.0
    pad = 30
    bw = (width - 2 * pad) / bins
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="18" font-size="12">{hist.layer} (max L1 {hist.max_distance:.3f})</text>']
    for p in range(paths):
        color = _PATH_COLORS[p % len(_PATH_COLORS)]
        for b in range(bins):
            h = (height - 2 * pad) * norm[p, b] / top
            x = pad + b * bw
            parts.append(f'<rect x="{x:.2f}" y="{height - pad - h:.2f}" width="{bw:.2f}" height="{h:.2f}" '
                         f'fill="{color}" fill-opacity="0.45"/>')
    parts.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>')
    parts.append(f'<text x="{pad}" y="{height - 8}" font-size="10">{hist.edges[0]:.3g}</text>')
    parts.append(f'<text x="{width - pad - 30}" y="{height - 8}" font-size="10">{hist.edges[-1]:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def route_svg(trace: RouteTrace, sample: int = 0, box: int = 26, gap: int = 90) -> str:
    """Route diagram for one sample: tensor boxes shaded by relative strength,
    gate lines with width and opacity proportional to the gate value."""
    n_layers = len(trace.layers)
    rows = max(max(lt.gates.shape[1], lt.gates.shape[2]) for lt in trace.layers)
    width = gap * n_layers + 2 * box + 40
    height = rows * (box + 20) + 60
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="10" y="16" font-size="12">sample {int(trace.sample_ids[sample])}</text>']

    def ybox(k):
        return 40 + k * (box + 20)

    def red(s):
        v = int(round(255 * (1 - min(max(s, 0.0), 1.0))))
        return f"rgb(255,{v},{v})"

    for li, lt in enumerate(trace.layers):
        _, n, m = lt.gates.shape
        x_in = 20 + li * gap
        x_out = x_in + gap - box
        for i in range(m):
            parts.append(f'<rect x="{x_in}" y="{ybox(i)}" width="{box}" height="{box}" '
                         f'fill="{red(lt.in_strength[sample, i])}" stroke="black"/>')
        for j in range(n):
            parts.append(f'<rect x="{x_out}" y="{ybox(j)}" width="{box}" height="{box}" '
                         f'fill="{red(lt.out_strength[sample, j])}" stroke="black"/>')
            for i in range(m):
                g = float(lt.gates[sample, j, i])
                parts.append(f'<line x1="{x_in + box}" y1="{ybox(i) + box / 2}" x2="{x_out}" y2="{ybox(j) + box / 2}" '
                             f'stroke="blue" stroke-width="{0.5 + 4 * g:.2f}" stroke-opacity="{0.15 + 0.85 * g:.2f}"/>')
        parts.append(f'<text x="{x_in}" y="{height - 10}" font-size="10">CC{lt.layer}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
