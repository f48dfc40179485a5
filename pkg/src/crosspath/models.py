"""BaseCNN and multi-path BaseCNN-X graphs.

One path is C32 C32 [pool] C64 C64 [pool] C128 C128 F32 F32 F<classes>
(3x3 same-padding convs, relu after every conv and hidden dense layer).
With X paths, cross-connections sit at the input (1 -> X expansion), after
conv2, conv4, conv6 and after the second dense layer; the X head outputs are
averaged. Only two max-pools are used: that is the layout that gives the
0.55M single-path parameter count (conv 287,008 + dense 263,562 = 550,570)
for 32x32x3 inputs and 10 classes.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .routing import MODES, CrossConnectLayer, CrossOutput, GateMatrix, average_heads, kaiming_uniform
from .seeding import stream
from .tensor import ShapeError, Tensor, name_scope


@dataclass(frozen=True)
class ArchSpec:
    conv_channels: tuple[int, ...] = (32, 32, 64, 64, 128, 128)
    pool_after: tuple[int, ...] = (2, 4)
    dense_units: tuple[int, ...] = (32, 32)
    kernel: int = 3
    cross_at_input: bool = True
    cross_after_conv: tuple[int, ...] = (2, 4, 6)
    cross_after_dense: tuple[int, ...] = (2,)
    gate_hidden: int = 16

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass(frozen=True)
class ModelSpec:
    paths: int = 2
    classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    mode: str = "adaptive"
    arch: ArchSpec = field(default_factory=ArchSpec)
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        if not isinstance(self.paths, int) or self.paths < 1:
            raise ValueError(f"paths must be a positive integer, got {self.paths!r}")
        if self.classes < 1:
            raise ValueError("classes must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        div = 2 ** len(self.arch.pool_after)
        _, h, w = self.input_shape
        if h % div or w % div:
            raise ValueError(f"input spatial dims {h}x{w} must be divisible by {div}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["arch"] = ArchSpec.from_dict(d.get("arch", {}))
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# --- graph ------------------------------------------------------------------

@dataclass
class Conv:
    name: str
    cin: int
    cout: int


@dataclass
class Dense:
    name: str
    fin: int
    fout: int
    act: bool = True


@dataclass
class Pool:
    pass


@dataclass
class Flatten:
    pass


@dataclass
class Branch:
    """Identical layer stack run once per path, each path with its own weights."""

    layers: list


@dataclass
class Cross:
    layer: CrossConnectLayer


class ModelGraph:
    def __init__(self, spec: ModelSpec, segments: list, params: dict[str, Tensor]):
        self.spec = spec
        self.segments = segments
        self.params = params
        self.input_mean: np.ndarray | None = None
        self.input_std: np.ndarray | None = None

    @property
    def paths(self) -> int:
        return self.spec.paths

    @property
    def dtype(self):
        return np.dtype(self.spec.dtype)

    @property
    def cross_layers(self) -> list[CrossConnectLayer]:
        return [s.layer for s in self.segments if isinstance(s, Cross)]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def gate_parameter_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("cross")]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = [k for k in self.params if k not in state]
        extra = [k for k in state if k not in self.params]
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {k}: shape {arr.shape} does not match {t.shape}")
            t.data[...] = arr

    def __repr__(self) -> str:
        return f"ModelGraph(paths={self.paths}, mode={self.spec.mode!r}, params={count_parameters(self)[0]})"


def _path_layers(spec: ModelSpec):
    """Yield ('branch', layer) or ('cross', channels) in topological order."""
    arch = spec.arch
    c, h, w = spec.input_shape
    if arch.cross_at_input:
        yield "cross", c
    cin = c
    for k, cout in enumerate(arch.conv_channels, start=1):
        yield "branch", Conv(f"conv{k}", cin, cout)
        cin = cout
        if k in arch.cross_after_conv:
            yield "cross", cout
        if k in arch.pool_after:
            yield "branch", Pool()
            h, w = h // 2, w // 2
    yield "branch", Flatten()
    fin = cin * h * w
    for k, units in enumerate(arch.dense_units, start=1):
        yield "branch", Dense(f"fc{k}", fin, units)
        fin = units
        if k in arch.cross_after_dense:
            yield "cross", units
    yield "branch", Dense(f"fc{len(arch.dense_units) + 1}", fin, spec.classes, act=False)


def build_basecnn_x(paths: int = 2, classes: int = 10, input_shape=(3, 32, 32), mode: str = "adaptive",
                    seed: int = 0, arch: ArchSpec | None = None, dtype: str = "float32") -> ModelGraph:
    spec = ModelSpec(paths=paths, classes=classes, input_shape=tuple(input_shape), mode=mode,
                     arch=arch or ArchSpec(), seed=seed, dtype=dtype)
    return build_from_spec(spec)


def build_from_spec(spec: ModelSpec) -> ModelGraph:
    spec.validate()
    dt = np.dtype(spec.dtype)
    with_cross = spec.paths > 1 and spec.mode != "no-cross"
    init_rng = stream(spec.seed, "init")
    segments: list = []
    for kind, item in _path_layers(spec):
        if kind == "cross":
            if with_cross:
                segments.append(Cross(item))  # channel count; replaced below
        elif segments and isinstance(segments[-1], Branch):
            segments[-1].layers.append(item)
        else:
            segments.append(Branch([item]))

    params: dict[str, Tensor] = {}
    for p in range(spec.paths):
        for seg in segments:
            if not isinstance(seg, Branch):
                continue
            for layer in seg.layers:
                if isinstance(layer, Conv):
                    k = spec.arch.kernel
                    fan_in = layer.cin * k * k
                    params[f"path{p}.{layer.name}.weight"] = Tensor(
                        kaiming_uniform(init_rng, (layer.cout, layer.cin, k, k), fan_in, dt), requires_grad=True)
                    params[f"path{p}.{layer.name}.bias"] = Tensor(np.zeros(layer.cout, dt), requires_grad=True)
                elif isinstance(layer, Dense):
                    params[f"path{p}.{layer.name}.weight"] = Tensor(
                        kaiming_uniform(init_rng, (layer.fin, layer.fout), layer.fin, dt), requires_grad=True)
                    params[f"path{p}.{layer.name}.bias"] = Tensor(np.zeros(layer.fout, dt), requires_grad=True)

    index = 0
    for i, seg in enumerate(segments):
        if isinstance(seg, Cross):
            channels = seg.layer
            m = 1 if index == 0 and spec.arch.cross_at_input else spec.paths
            layer = CrossConnectLayer(m, spec.paths, channels, mode=spec.mode, index=index, rng=init_rng,
                                      hidden=spec.arch.gate_hidden, dtype=dt)
            segments[i] = Cross(layer)
            for k, t in layer.parameters().items():
                params[f"cross{index}.{k}"] = t
            index += 1
    return ModelGraph(spec, segments, params)


# --- counting -----------------------------------------------------------------

def count_parameters(graph: ModelGraph) -> tuple[int, list[tuple[str, int]]]:
    """Exact parameter total plus a per-layer breakdown (weight + bias grouped)."""
    breakdown: dict[str, int] = {}
    for name, t in graph.params.items():
        layer = name.rsplit(".", 1)[0] if name.endswith((".weight", ".bias")) else name
        breakdown[layer] = breakdown.get(layer, 0) + int(t.size)
    rows = list(breakdown.items())
    return sum(c for _, c in rows), rows


# --- forward ----------------------------------------------------------------

@dataclass
class LayerTrace:
    layer: int
    gates: np.ndarray  # (N, n, m), column i = G_i
    in_strength: np.ndarray  # (N, m)
    out_strength: np.ndarray  # (N, n)


@dataclass
class RouteTrace:
    """Gate matrices and relative path strengths at every cross-connection."""

    layers: list[LayerTrace]
    sample_ids: np.ndarray
    labels: np.ndarray | None = None
    contexts: np.ndarray | None = None

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    def __len__(self) -> int:
        return self.n_samples * len(self.layers)

    def rows(self):
        for s in range(self.n_samples):
            for lt in self.layers:
                yield {
                    "sample_id": int(self.sample_ids[s]),
                    "label": None if self.labels is None else int(self.labels[s]),
                    "layer": lt.layer,
                    "gates": lt.gates[s],
                    "in_strength": lt.in_strength[s],
                    "out_strength": lt.out_strength[s],
                }

    def gate_matrix(self, layer: int) -> GateMatrix:
        return GateMatrix(self.layers[layer].gates)

    @staticmethod
    def concat(traces: Sequence["RouteTrace"]) -> "RouteTrace":
        traces = list(traces)
        if not traces:
            raise ValueError("nothing to concatenate")
        layers = []
        for li in range(len(traces[0].layers)):
            parts = [t.layers[li] for t in traces]
            layers.append(LayerTrace(
                parts[0].layer,
                np.concatenate([p.gates for p in parts]),
                np.concatenate([p.in_strength for p in parts]),
                np.concatenate([p.out_strength for p in parts]),
            ))

        def cat(attr):
            vals = [getattr(t, attr) for t in traces]
            return None if any(v is None for v in vals) else np.concatenate(vals)

        return RouteTrace(layers, cat("sample_ids"), cat("labels"), cat("contexts"))


def relative_strength(xs: Sequence[Tensor]) -> np.ndarray:
    """Per-sample mean |activation| of each tensor, normalised over the tensors."""
    means = np.stack([np.abs(x.data.reshape(x.shape[0], -1)).mean(axis=1) for x in xs], axis=1).astype(np.float64)
    total = means.sum(axis=1, keepdims=True)
    uniform = np.full_like(means, 1.0 / means.shape[1])
    return np.divide(means, total, out=uniform, where=total > 0)


@dataclass
class ForwardResult:
    logits: Tensor
    crosses: list[tuple[list[Tensor], CrossOutput]]  # (inputs, output) per cross layer


def run(graph: ModelGraph, batch, stop_after_cross: int | None = None) -> ForwardResult:
    """Forward pass keeping every cross-connection's inputs and outputs."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=graph.dtype))
    spec = graph.spec
    if x.ndim != 4 or x.shape[1:] != tuple(spec.input_shape):
        raise ShapeError(f"batch shape {x.shape} does not match model input (N, {', '.join(map(str, spec.input_shape))})")
    if x.dtype != graph.dtype:
        raise TypeError(f"batch dtype {x.dtype} does not match model dtype {graph.dtype}")
    streams = [x]
    crosses = []
    for seg in graph.segments:
        if isinstance(seg, Cross):
            with name_scope(f"cross{seg.layer.index}"):
                out = seg.layer.forward(streams)
            crosses.append((streams, out))
            streams = out.outputs
            if stop_after_cross is not None and seg.layer.index == stop_after_cross:
                return ForwardResult(None, crosses)
            continue
        if len(streams) == 1 and spec.paths > 1:
            streams = streams * spec.paths
        streams = [_run_branch(graph, seg, p, s) for p, s in enumerate(streams)]
    logits = streams[0] if len(streams) == 1 else average_heads(streams)
    return ForwardResult(logits, crosses)


def _run_branch(graph: ModelGraph, seg: Branch, p: int, x: Tensor) -> Tensor:
    params = graph.params
    for layer in seg.layers:
        if isinstance(layer, Conv):
            with name_scope(f"path{p}.{layer.name}"):
                x = ops.relu(ops.conv2d(x, params[f"path{p}.{layer.name}.weight"], params[f"path{p}.{layer.name}.bias"]))
        elif isinstance(layer, Pool):
            x = ops.maxpool2x2(x)
        elif isinstance(layer, Flatten):
            x = ops.flatten(x)
        else:
            with name_scope(f"path{p}.{layer.name}"):
                x = ops.dense(x, params[f"path{p}.{layer.name}.weight"], params[f"path{p}.{layer.name}.bias"])
                if layer.act:
                    x = ops.relu(x)
    return x


def forward(graph: ModelGraph, batch, trace: bool = False, sample_ids=None, labels=None):
    """Return ``(logits, RouteTrace | None)``."""
    res = run(graph, batch)
    if not trace:
        return res.logits, None
    layers = [
        LayerTrace(layer.index, out.gates.values.astype(np.float64), relative_strength(ins), relative_strength(out.outputs))
        for layer, (ins, out) in zip(graph.cross_layers, res.crosses)
    ]
    n = res.logits.shape[0]
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    return res.logits, RouteTrace(layers, ids, None if labels is None else np.asarray(labels))


def zero_gate_logits(graph: ModelGraph) -> None:
    """Zero the last gate affine map of every adaptive unit: all gates become 1/n."""
    for layer in graph.cross_layers:
        for unit in layer.gate_units:
            unit.w2.data[...] = 0
            unit.b2.data[...] = 0
