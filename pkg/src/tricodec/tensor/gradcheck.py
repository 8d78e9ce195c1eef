"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from .core import Tensor, no_grad

MAX_INPUT_SCALARS = 10_000


@dataclass
class GradcheckReport:
    per_input: list = field(default_factory=list)  # max rel err per input
    max_rel_err: float = 0.0

    def __str__(self):
        parts = ", ".join(f"input[{i}]={e:.3e}" for i, e in enumerate(self.per_input))
        return f"gradcheck max_rel_err={self.max_rel_err:.3e} ({parts})"


def gradcheck(build, inputs, eps: float = 1e-4) -> GradcheckReport:
    """Compare analytic and central finite-difference gradients.

    build: callable taking one Tensor per input and returning a scalar Tensor.
    inputs: numpy arrays (kept unmodified).  Relative error per element is
    |a - n| / max(|a|, |n|, 1); the report carries the max per input.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    total = sum(a.size for a in arrays)
    if total > MAX_INPUT_SCALARS:
        raise ShapeError(f"gradcheck: {total} input scalars exceed cap {MAX_INPUT_SCALARS}")

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    if not isinstance(out, Tensor):
        raise ShapeError("gradcheck: build must return a Tensor")
    if out.size != 1:
        raise ShapeError(f"gradcheck: output must be scalar, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(a) if leaf.grad is None else leaf.grad
                for a, leaf in zip(arrays, leaves)]

    def evaluate(idx, flat):
        probe = [a.copy() for a in arrays]
        probe[idx] = flat.reshape(arrays[idx].shape)
        with no_grad():
            val = build(*[Tensor(p) for p in probe])
        return val.item()

    report = GradcheckReport()
    for i, a in enumerate(arrays):
        numeric = np.zeros(a.size)
        base = a.reshape(-1)
        for j in range(a.size):
            hi = base.copy()
            lo = base.copy()
            hi[j] += eps
            lo[j] -= eps
            numeric[j] = (evaluate(i, hi) - evaluate(i, lo)) / (2.0 * eps)
        num = numeric.reshape(a.shape)
        ana = analytic[i]
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1.0)
        err = float(np.max(np.abs(ana - num) / denom)) if a.size else 0.0
        report.per_input.append(err)
    report.max_rel_err = max(report.per_input, default=0.0)
    return report


def assert_gradcheck(build, inputs, tol: float = 1e-4, eps: float = 1e-4) -> GradcheckReport:
    report = gradcheck(build, inputs, eps=eps)
    if report.max_rel_err > tol:
        raise AssertionError(f"gradcheck failed: {report} > tol {tol:g}")
    return report


def gradcheck_params(loss_fn, params: dict, eps: float = 1e-4) -> GradcheckReport:
    """Finite-difference check of d(loss)/d(parameter) for a fixed model.

    loss_fn: zero-argument callable returning a scalar Tensor; it must be
    deterministic (fix any sampled quantities in the closure).  params maps
    names to the leaf Tensors whose data is perturbed in place.
    """
    tensors = list(params.values())
    total = sum(p.size for p in tensors)
    if total > MAX_INPUT_SCALARS:
        raise ShapeError(f"gradcheck: {total} parameter scalars exceed cap {MAX_INPUT_SCALARS}")

    for p in tensors:
        p.grad = None
    out = loss_fn()
    if not isinstance(out, Tensor) or out.size != 1:
        raise ShapeError("gradcheck: loss_fn must return a scalar Tensor")
    out.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in tensors]

    report = GradcheckReport()
    for p, ana in zip(tensors, analytic):
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.size)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            with no_grad():
                hi = loss_fn().item()
            flat[j] = keep - eps
            with no_grad():
                lo = loss_fn().item()
            flat[j] = keep
            numeric[j] = (hi - lo) / (2.0 * eps)
        num = numeric.reshape(p.shape)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1.0)
        err = float(np.max(np.abs(ana - num) / denom)) if p.size else 0.0
        report.per_input.append(err)
    report.max_rel_err = max(report.per_input, default=0.0)
    return report
