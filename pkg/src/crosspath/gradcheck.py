"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import ops
from .tensor import Tape, Tensor


@dataclass
class ParamCheck:
    name: str
    checked: int
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple[int, ...]
    passed: bool
    skipped: int = 0  # coordinates whose +-eps probe crossed a relu/maxpool kink


@dataclass
class GradCheckReport:
    tolerance: float
    eps: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if not p.passed]

    @property
    def checked(self) -> int:
        return sum(p.checked for p in self.params)

    @property
    def skipped(self) -> int:
        return sum(p.skipped for p in self.params)

    def summary(self) -> str:
        lines = [f"{p.name:40s} n={p.checked:5d} skip={p.skipped:3d} rel={p.max_rel_error:.3e} "
                 f"{'ok' if p.passed else 'FAIL'}" for p in self.params]
        lines.append(f"max relative error {self.max_rel_error:.3e} (tol {self.tolerance:g}), "
                     f"{self.skipped} of {self.checked + self.skipped} coordinates skipped at kinks")
        return "\n".join(lines)


def rel_error(a, b, floor: float = 1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _check(evaluate, analytic: Mapping[str, np.ndarray], arrays: Mapping[str, np.ndarray], eps, tolerance,
           max_entries, seed, floor, skip_kinks) -> GradCheckReport:
    """Shared coordinate loop. ``evaluate()`` returns (loss, branch log)."""
    _, base = evaluate()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance, eps=eps)
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        if max_entries is None or max_entries >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst, worst_i, worst_abs, skipped = 0.0, 0, 0.0, 0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up, up_br = evaluate()
            flat[i] = orig - eps
            down, down_br = evaluate()
            flat[i] = orig
            if skip_kinks and not (_same_branches(base, up_br) and _same_branches(base, down_br)):
                skipped += 1
                continue
            numeric = (up - down) / (2 * eps)
            a = analytic[name].reshape(-1)[i]
            err = float(rel_error(a, numeric, floor))
            if err >= worst:
                worst, worst_i, worst_abs = err, int(i), abs(float(a) - numeric)
        report.params.append(ParamCheck(
            name=name,
            checked=len(coords) - skipped,
            max_rel_error=worst,
            max_abs_error=worst_abs,
            worst_index=tuple(int(j) for j in np.unravel_index(worst_i, arr.shape)) if arr.size else (),
            passed=worst < tolerance,
            skipped=skipped,
        ))
    return report


def grad_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    eps: float = 1e-4,
    tolerance: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn`` with central differences.

    ``fn`` receives a dict of Tensors (one per entry of ``inputs``) and must
    return a scalar Tensor built from the engine's ops. Arrays should be
    float64; float32 differences are too noisy to be meaningful. With
    ``max_entries`` set, that many coordinates per input are sampled
    (without replacement) instead of checking all of them.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    With ``skip_kinks``, a coordinate is left out when perturbing it by +-eps
    flips any relu mask or maxpool winner: the function is not differentiable
    inside that interval, so the difference quotient says nothing about the
    gradient there. Skips are counted in the report.
    """
    arrays = {k: np.array(v, dtype=np.float64 if np.asarray(v).dtype.kind != "f" else np.asarray(v).dtype, copy=True)
              for k, v in inputs.items()}
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    with Tape() as tape:
        out = fn(leaves)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    analytic = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in leaves.items()}

    def evaluate():
        with ops.record_branches() as log:
            value = float(fn({k: Tensor(v, name=k) for k, v in arrays.items()}).data)
        return value, log

    return _check(evaluate, analytic, arrays, eps, tolerance, max_entries, seed, floor, skip_kinks)


def grad_check_tensors(
    loss_fn: Callable[[], Tensor],
    leaves: Mapping[str, Tensor],
    eps: float = 1e-4,
    tolerance: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Like :func:`grad_check`, for leaves owned elsewhere (e.g. model parameters).

    ``loss_fn`` closes over the leaf Tensors; their ``.data`` is perturbed in
    place and restored afterwards.
    """
    for t in leaves.values():
        t.zero_grad()
        t.requires_grad = True
    with Tape() as tape:
        out = loss_fn()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    def evaluate():
        with ops.record_branches() as log:
            value = float(loss_fn().data)
        return value, log

    arrays = {k: t.data for k, t in leaves.items()}
    return _check(evaluate, analytic, arrays, eps, tolerance, max_entries, seed, floor, skip_kinks)
