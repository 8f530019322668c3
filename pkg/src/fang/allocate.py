"""Block-wise sparsity allocation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InputError, NumericalError, ParameterError

ALLOC_MODES = ("uniform", "fc", "taylor")
LOW, HIGH = 0.5, 1.5


@dataclass
class SparsityPlan:
    per_block: np.ndarray
    target: float
    mode: str
    fc: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    notes: list = field(default_factory=list)

    def weighted_mean(self) -> float:
        w = np.ones_like(self.per_block) if self.weights is None else self.weights
        return float(np.sum(w * self.per_block) / np.sum(w))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "target": self.target,
            "per_block": self.per_block.tolist(),
            "fc": None if self.fc is None else self.fc.tolist(),
            "weighted_mean": self.weighted_mean(),
            "notes": list(self.notes),
        }


def functional_complexity(block_in: np.ndarray, block_out: np.ndarray) -> float:
    """``1 - mean_t cos(x_in[:, t], x_out[:, t])``; zero-norm columns are skipped."""
    a = np.asarray(block_in, dtype=np.float64)
    b = np.asarray(block_out, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"block input {a.shape} and output {b.shape} differ")
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    ok = (na > 0) & (nb > 0)
    if not ok.any():
        raise NumericalError("every token column has zero norm")
    skipped = int((~ok).sum())
    if skipped:
        warnings.warn(f"skipped {skipped} zero-norm token columns", RuntimeWarning, stacklevel=2)
    cos = (a[:, ok] * b[:, ok]).sum(0) / (na[ok] * nb[ok])
    return float(1.0 - np.clip(cos, -1.0, 1.0).mean())


def _check_target(sp):
    if not 0 < sp < 2.0 / 3.0:
        raise ParameterError(f"target sparsity {sp} must lie in (0, 2/3)")


def _scaled(values, sp):
    """Map ``values`` affinely so the largest lands on 1.5*sp and the smallest on 0.5*sp."""
    lo, hi = values.min(), values.max()
    if hi - lo <= 1e-15 * max(1.0, abs(hi)):
        return np.full(values.shape, sp)
    return LOW * sp + (values - lo) / (hi - lo) * (HIGH - LOW) * sp


def _rebalance(raw, sp, weights):
    """Shift every entry by one constant and clip back into [0.5sp, 1.5sp]
    so the weighted mean hits ``sp``. The weighted mean of the clipped shift
    is monotone in the shift, so bisection finds it exactly."""
    lo, hi = LOW * sp, HIGH * sp

    def mean_at(s):
        return np.sum(weights * np.clip(raw + s, lo, hi)) / np.sum(weights)

    if abs(mean_at(0.0) - sp) <= 1e-12:
        return np.clip(raw, lo, hi)
    a, b = -sp, sp
    for _ in range(200):
        mid = 0.5 * (a + b)
        if mean_at(mid) < sp:
            a = mid
        else:
            b = mid
    return np.clip(raw + 0.5 * (a + b), lo, hi)


def sparsity_plan(fc, sp: float, mode: str = "fc", weights=None) -> SparsityPlan:
    """Per-block sparsities from functional complexity.

    Blocks with higher complexity get lower sparsity: ``1 - FC`` is mapped
    linearly onto ``[0.5sp, 1.5sp]`` and then shifted so the
    parameter-weighted mean equals ``sp``.
    """
    _check_target(sp)
    fc = np.asarray(fc, dtype=np.float64)
    w = np.ones_like(fc) if weights is None else np.asarray(weights, dtype=np.float64)
    if mode == "uniform":
        return SparsityPlan(np.full(fc.shape, sp), sp, mode, fc, w)
    if mode not in ("fc", "taylor"):
        raise ParameterError(f"unknown allocation mode {mode!r}")
    raw = _scaled(1.0 - fc, sp)
    return SparsityPlan(_rebalance(raw, sp, w), sp, mode, fc, w)


def block_sensitivity(hidden: np.ndarray, grad: np.ndarray) -> float:
    return float(np.mean(np.abs(hidden * grad)))


def taylor_allocation(captures, sp: float, weights=None) -> SparsityPlan:
    """Allocation driven by output sensitivity ``mean |h * dL/dh|`` per block.

    Sensitivities are normalized by their maximum and used in place of the
    functional complexity, so the least sensitive block gets the most
    sparsity.
    """
    _check_target(sp)
    sens = []
    for cap in captures:
        if cap.grad is None:
            raise InputError(f"block {cap.layer} has no gradient snapshot")
        sens.append(block_sensitivity(cap.hidden, cap.grad))
    sens = np.array(sens)
    top = sens.max()
    norm = sens / top if top > 0 else np.zeros_like(sens)
    plan = sparsity_plan(norm, sp, "taylor", weights)
    plan.notes.append("taylor allocation: 1 - sensitivity/max(sensitivity) mapped onto [0.5sp, 1.5sp]")
    return plan
