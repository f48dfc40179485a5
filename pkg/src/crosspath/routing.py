"""Feature-dependent gated cross-connections between parallel tensor sets.

Each input tensor X_i owns a gate unit: global average pooling (skipped for
N x F inputs), an affine map to 16 hidden units, relu, an affine map to n
relevance scores A_i, and a softmax giving gates G_i. Output j is
``Y_j = sum_i g_ij * X_i``. The fixed-stitch mode replaces the gate units by
an n x m matrix of free learned constants (cross-stitch baseline).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, name_scope

GATE_HIDDEN = 16
MODES = ("adaptive", "fixed-stitch", "no-cross")

# column-stochastic check on every adaptive forward
CHECK_GATES = True


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class GateUnit:
    """GAP -> affine(C, hidden) -> relu -> affine(hidden, n) -> softmax."""

    def __init__(self, channels: int, n_out: int, rng: np.random.Generator | None = None,
                 hidden: int = GATE_HIDDEN, dtype=np.float32):
        if channels < 1 or n_out < 1 or hidden < 1:
            raise ValueError("gate unit sizes must be positive")
        self.channels = channels
        self.n_out = n_out
        self.hidden = hidden
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w1 = Tensor(kaiming_uniform(rng, (channels, hidden), channels, dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype), requires_grad=True)
        self.w2 = Tensor(kaiming_uniform(rng, (hidden, n_out), hidden, dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(n_out, dtype), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"fc1.weight": self.w1, "fc1.bias": self.b1, "fc2.weight": self.w2, "fc2.bias": self.b2}

    def num_parameters(self) -> int:
        return (self.channels * self.hidden + self.hidden) + (self.hidden * self.n_out + self.n_out)


def compute_gates(unit: GateUnit, x: Tensor) -> tuple[Tensor, Tensor]:
    """Return relevance scores A (N x n) and gates G = softmax(A)."""
    if x.ndim == 4:
        z = ops.global_avg_pool(x)
    elif x.ndim == 2:
        z = x
    else:
        raise ShapeError(f"gate input must be N x C x H x W or N x F, got {x.shape}")
    if z.shape[1] != unit.channels:
        raise ShapeError(f"gate unit expects {unit.channels} channels, input {x.shape} has {z.shape[1]}")
    h = ops.relu(ops.dense(z, unit.w1, unit.b1))
    a = ops.dense(h, unit.w2, unit.b2)
    return a, ops.softmax(a)


@dataclass
class GateMatrix:
    """Per-sample n x m gate matrix; column i holds the gates computed from X_i."""

    values: np.ndarray  # (N, n, m)

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def m(self) -> int:
        return self.values.shape[2]

    def column_sums(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def is_column_stochastic(self, atol: float = 1e-6) -> bool:
        v = self.values
        return bool(np.all(v > 0) and np.all(v < 1 + atol) and np.allclose(self.column_sums(), 1.0, atol=atol, rtol=0))


@dataclass
class CrossOutput:
    outputs: list[Tensor]
    gates: GateMatrix
    logits: list[Tensor] | None  # A_i per input (adaptive mode only)
    gate_tensors: list[Tensor] | None


class CrossConnectLayer:
    """m-input / n-output mixing layer.

    ``mode="adaptive"`` owns one GateUnit per input; ``mode="fixed-stitch"``
    owns an n x m coefficient matrix initialised to 1/n plus small noise and
    left unconstrained during training.
    """

    def __init__(self, m: int, n: int, channels: int, mode: str = "adaptive", index: int = 0,
                 rng: np.random.Generator | None = None, hidden: int = GATE_HIDDEN, dtype=np.float32,
                 stitch_noise: float = 0.01):
        if m < 1 or n < 1:
            raise ValueError(f"cross-connection needs m, n >= 1, got m={m}, n={n}")
        if mode not in ("adaptive", "fixed-stitch"):
            raise ValueError(f"unknown cross-connection mode {mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.m, self.n, self.channels, self.mode, self.index = m, n, channels, mode, index
        self.gate_units: list[GateUnit] = []
        self.coeffs: Tensor | None = None
        if mode == "adaptive":
            self.gate_units = [GateUnit(channels, n, rng, hidden, dtype) for _ in range(m)]
        else:
            init = 1.0 / n + stitch_noise * rng.standard_normal((n, m))
            self.coeffs = Tensor(init.astype(dtype), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        if self.mode == "adaptive":
            return {f"gate{i}.{k}": t for i, u in enumerate(self.gate_units) for k, t in u.parameters().items()}
        return {"coeffs": self.coeffs}

    def num_parameters(self) -> int:
        if self.mode == "adaptive":
            return sum(u.num_parameters() for u in self.gate_units)
        return self.n * self.m

    def forward(self, xs: Sequence[Tensor]) -> CrossOutput:
        xs = list(xs)
        if len(xs) != self.m:
            raise ShapeError(f"cross-connection {self.index} expects {self.m} inputs, got {len(xs)}")
        shape = xs[0].shape
        for x in xs[1:]:
            if x.shape != shape:
                raise ShapeError(f"cross-connection inputs must share one shape, got {shape} and {x.shape}")
        batch = shape[0]
        if self.mode == "adaptive":
            logits, gates = [], []
            for i, (unit, x) in enumerate(zip(self.gate_units, xs)):
                with name_scope(f"gate{i}"):
                    a, g = compute_gates(unit, x)
                logits.append(a)
                gates.append(g)
            values = np.stack([g.data for g in gates], axis=2)  # (N, n, m)
            matrix = GateMatrix(values)
            if CHECK_GATES and not np.allclose(matrix.column_sums(), 1.0, atol=1e-5, rtol=0):
                raise AssertionError(f"gate matrix of cross-connection {self.index} is not column-stochastic")
            outs = []
            for j in range(self.n):
                terms = [ops.scalar_broadcast_mul(ops.select(gates[i], (slice(None), j)), xs[i]) for i in range(self.m)]
                outs.append(ops.add_n(terms))
            return CrossOutput(outs, matrix, logits, gates)
        outs = []
        for j in range(self.n):
            terms = [ops.scalar_broadcast_mul(ops.select(self.coeffs, (j, i)), xs[i]) for i in range(self.m)]
            outs.append(ops.add_n(terms))
        values = np.broadcast_to(self.coeffs.data, (batch, self.n, self.m)).copy()
        return CrossOutput(outs, GateMatrix(values), None, None)


def cross_connect(layer: CrossConnectLayer, xs: Sequence[Tensor]) -> tuple[list[Tensor], GateMatrix]:
    out = layer.forward(xs)
    return out.outputs, out.gates


def expand_input(layer: CrossConnectLayer, image: Tensor) -> list[Tensor]:
    """Distribute one input tensor over the layer's n outputs."""
    if layer.m != 1:
        raise ValueError(f"input expansion needs a 1-input layer, got m={layer.m}")
    return layer.forward([image]).outputs


def average_heads(heads: Sequence[Tensor]) -> Tensor:
    heads = list(heads)
    if not heads:
        raise ValueError("average_heads needs at least one head")
    shape = heads[0].shape
    for h in heads[1:]:
        if h.shape != shape:
            raise ShapeError(f"head shapes differ: {shape} vs {h.shape}")
    return ops.mean_over(heads)
