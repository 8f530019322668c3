"""Layer-wise structured pruning of input channels.

Every routine prunes input channels (columns) of a ``C_out x C_in`` weight
``W`` fed by activations ``X`` (``C_in x T``). OBC compensates the surviving
columns through the inverse Hessian of ``X X^T``; FLAP leaves surviving
weights alone and folds the pruned channels' calibration means into a bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import InputError, NumericalError, ParameterError, SingularityError
from .numcore import DEFAULT_DAMPING, sym_inverse_damped

MAX_GROUP_SPARSITY = 0.95


@dataclass
class PruneResult:
    mask: np.ndarray
    new_weights: np.ndarray
    bias: Optional[np.ndarray]
    recon_error_before: float
    recon_error_after: float
    method: str
    groups: list = field(default_factory=list)
    shortfall: int = 0

    @property
    def n_pruned(self) -> int:
        return int(self.mask.sum())


def hessian(x: np.ndarray, weights=None) -> np.ndarray:
    """``sum_t w_t x_t x_t^T`` over the columns of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if weights is None:
        return x @ x.T
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (x.shape[1],):
        raise InputError("need one weight per token column")
    if (w < 0).any():
        raise InputError("token weights must be nonnegative")
    return (x * w) @ x.T


def token_weights(labels: np.ndarray, alpha_row: np.ndarray) -> np.ndarray:
    return np.asarray(alpha_row, dtype=np.float64)[np.asarray(labels)]


def reweighted_hessian(hidden, labels, alpha_row, group) -> np.ndarray:
    """Hessian of the group's rows with each token weighted by the alpha of
    its cluster."""
    alpha_row = np.asarray(alpha_row, dtype=np.float64)
    if abs(alpha_row.sum() - 1.0) > 1e-9:
        raise ParameterError("alpha row must sum to 1")
    return hessian(np.asarray(hidden)[np.asarray(group)], token_weights(labels, alpha_row))


def obc_importance(w: np.ndarray, hinv: np.ndarray, dead=None) -> np.ndarray:
    """Per-column saliency ``sum_i W_ij^2 / [H^-1]_jj``; dead columns score 0."""
    diag = np.diag(hinv)
    if dead is None:
        dead = np.zeros(diag.shape, dtype=bool)
    bad = np.flatnonzero((diag <= 0) & ~dead)
    if bad.size:
        raise NumericalError(f"non-positive inverse-Hessian diagonal at column {int(bad[0])}")
    e = np.zeros(diag.shape)
    live = ~dead
    e[live] = (w[:, live] ** 2).sum(0) / diag[live]
    return e


def obc_compensate(w: np.ndarray, hinv: np.ndarray, mask) -> np.ndarray:
    """Joint update ``dW = -W_M [H^-1_MM]^-1 H^-1_{M,:}`` zeroing every masked column."""
    idx = np.flatnonzero(np.asarray(mask).astype(bool))
    if idx.size == 0:
        return np.zeros_like(w)
    sub = hinv[np.ix_(idx, idx)]
    try:
        factor = scipy.linalg.cho_factor(sub, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("pruned block of the inverse Hessian is singular; raise damping") from exc
    coef = scipy.linalg.cho_solve(factor, w[:, idx].T)  # |M| x C_out
    return -(hinv[:, idx] @ coef).T


def weighted_error(delta: np.ndarray, h: np.ndarray) -> float:
    """``sum_t ||delta x_t||^2`` expressed through ``H = sum_t x_t x_t^T``."""
    return float(np.sum((delta @ h) * delta))


def prune_count(sp: float, n: int, n_prune: Optional[int] = None) -> int:
    if n_prune is not None:
        if not 0 <= n_prune <= n:
            raise ParameterError(f"cannot prune {n_prune} of {n} channels")
        return int(n_prune)
    if not 0 <= sp < 1:
        raise ParameterError(f"sparsity {sp} outside [0, 1)")
    return int(math.floor(sp * n + 1e-9))


def _lowest(scores: np.ndarray, count: int) -> np.ndarray:
    mask = np.zeros(scores.size, dtype=bool)
    mask[np.lexsort((np.arange(scores.size), scores))[:count]] = True
    return mask


def obc_variant_prune(w, h, sp: float = 0.0, damping: float = DEFAULT_DAMPING, n_prune=None, name: str = "") -> PruneResult:
    """Rank columns once, drop the lowest, compensate the rest in one shot."""
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    n = w.shape[1]
    count = prune_count(sp, n, n_prune)
    if count == 0:
        return PruneResult(np.zeros(n, dtype=bool), w.copy(), None, 0.0, 0.0, "obc")
    dead = np.diag(h) <= 0
    hinv = sym_inverse_damped(h, damping, name)
    mask = _lowest(obc_importance(w, hinv, dead), count)
    new = w + obc_compensate(w, hinv, mask & ~dead)
    new[:, mask] = 0.0
    before = np.where(mask, w, 0.0)
    return PruneResult(mask, new, None, weighted_error(before, h), weighted_error(w - new, h), "obc")


def obc_traditional_prune(w, h, sp: float = 0.0, damping: float = DEFAULT_DAMPING, n_prune=None, trace=None, name: str = "") -> PruneResult:
    """Greedy one-column-at-a-time OBC with inverse-Hessian elimination.

    If ``trace`` is a list, ``(column, weights)`` is appended after each step.
    """
    w = np.array(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    n = w.shape[1]
    count = prune_count(sp, n, n_prune)
    orig = w.copy()
    dead = np.diag(h) <= 0
    mask = np.zeros(n, dtype=bool)
    if count:
        hinv = sym_inverse_damped(h, damping, name)
    for _ in range(count):
        e = np.full(n, np.inf)
        alive = ~mask
        e[alive] = obc_importance(w[:, alive], hinv[np.ix_(alive, alive)], dead[alive])
        j = int(np.argmin(e))
        pivot = hinv[j, j]
        if pivot <= 0:
            raise NumericalError(f"non-positive inverse-Hessian diagonal at column {j}")
        w -= np.outer(w[:, j] / pivot, hinv[j, :])
        hinv -= np.outer(hinv[:, j], hinv[j, :]) / pivot
        w[:, j] = 0.0
        hinv[j, :] = 0.0
        hinv[:, j] = 0.0
        mask[j] = True
        if trace is not None:
            trace.append((j, w.copy()))
    before = np.where(mask, orig, 0.0)
    return PruneResult(mask, w, None, weighted_error(before, h), weighted_error(orig - w, h), "obc-traditional")


def flap_stats(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-row mean and sum of squared deviations from it."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] < 1:
        raise InputError("need at least one token")
    mean = x.mean(axis=1)
    varsum = ((x - mean[:, None]) ** 2).sum(axis=1)
    varsum[np.ptp(x, axis=1) == 0] = 0.0  # summation rounding can leave ~1e-29 on a constant row
    return mean, varsum


def flap_importance(w, x) -> np.ndarray:
    _, varsum = flap_stats(x)
    return varsum * (np.asarray(w) ** 2).sum(0)


def flap_group_importance(w, hidden, labels, alpha_row, group) -> np.ndarray:
    """Fluctuation score for the channels of ``group`` with tokens weighted by
    the alpha of their cluster; the centering mean spans all tokens."""
    group = np.asarray(group)
    x = np.asarray(hidden, dtype=np.float64)[group]
    mean = x.mean(axis=1, keepdims=True)
    tw = token_weights(labels, alpha_row)
    fluct = (((x - mean) ** 2) * tw).sum(axis=1)
    return fluct * (np.asarray(w)[:, group] ** 2).sum(0)


def flap_bias(w, mask, means) -> np.ndarray:
    return np.asarray(w) @ (np.asarray(mask, dtype=np.float64) * np.asarray(means))


def _flap_errors(w, x, mask, mean, tw=None):
    """Squared output residual of dropping ``mask`` columns, without and with
    the mean-substitution bias."""
    xm = x[mask]
    wm = w[:, mask]
    raw = wm @ xm
    cen = wm @ (xm - mean[mask][:, None])
    if tw is None:
        return float((raw**2).sum()), float((cen**2).sum())
    return float(((raw**2) * tw).sum()), float(((cen**2) * tw).sum())


def flap_prune(w, x, sp: float = 0.0, n_prune=None) -> PruneResult:
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n = w.shape[1]
    count = prune_count(sp, n, n_prune)
    mean, _ = flap_stats(x)
    mask = _lowest(flap_importance(w, x), count)
    new = np.where(mask, 0.0, w)
    before, after = _flap_errors(w, x, mask, mean)
    return PruneResult(mask, new, flap_bias(w, mask, mean), before, after, "flap")


def split_count(total: int, sizes, cap: float = MAX_GROUP_SPARSITY) -> tuple[list[int], int]:
    """Spread ``total`` prunes over groups in proportion to size, capped per group.

    Largest-remainder rounding, ties to the lower group index. Returns the
    per-group counts and the unmet remainder.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    if sizes.sum() == 0 or total == 0:
        return [0] * sizes.size, int(total)
    quota = total * sizes / sizes.sum()
    counts = np.floor(quota + 1e-9).astype(np.int64)
    left = int(total - counts.sum())
    order = np.lexsort((np.arange(sizes.size), -(quota - counts)))
    for i in order[:left]:
        counts[i] += 1
    limits = np.floor(cap * sizes + 1e-9).astype(np.int64)
    counts = np.minimum(counts, limits)
    return counts.tolist(), int(total - counts.sum())


def fang_prune_ffn(w, hidden, grouping, method: str = "obc", sp_layer: float = 0.0, n_prune=None, damping: float = DEFAULT_DAMPING, name: str = "") -> PruneResult:
    """Group-wise reweighted pruning of ``W_down``.

    Each functional group is pruned on its own column block using tokens
    weighted by its alpha row; the shared group is never touched. The layer
    budget (``n_prune`` or ``floor(sp_layer * N_n)``) is split evenly over
    the groups, which amounts to inflating the group sparsity by
    ``N_n / (N_n - |shared|)``.
    """
    w = np.asarray(w, dtype=np.float64)
    hidden = np.asarray(hidden, dtype=np.float64)
    n = w.shape[1]
    if method not in ("obc", "flap"):
        raise ParameterError(f"unknown pruning backend {method!r}")
    grouping.check_partition(n)
    total = prune_count(sp_layer, n, n_prune)
    sizes = [len(g) for g in grouping.groups]
    counts, shortfall = split_count(total, sizes)
    labels, alpha = grouping.labels, grouping.alpha
    mask = np.zeros(n, dtype=bool)
    new = w.copy()
    stats = []
    for k, (idx, c) in enumerate(zip(grouping.groups, counts)):
        idx = np.asarray(idx, dtype=np.int64)
        row = alpha[k]
        if method == "obc":
            hk = reweighted_hessian(hidden, labels, row, idx)
            res = obc_variant_prune(w[:, idx], hk, n_prune=c, damping=damping, name=f"{name} group {k}")
            new[:, idx] = res.new_weights
            gmask = res.mask
            before, after = res.recon_error_before, res.recon_error_after
        else:
            scores = flap_group_importance(w, hidden, labels, row, idx)
            gmask = _lowest(scores, c)
            tw = token_weights(labels, row)
            before, after = _flap_errors(w[:, idx], hidden[idx], gmask, hidden[idx].mean(axis=1), tw)
        mask[idx[gmask]] = True
        stats.append({"group": k, "size": int(idx.size), "pruned": int(gmask.sum()), "error_before": before, "error_after": after})
    bias = None
    if method == "flap":
        bias = flap_bias(w, mask, hidden.mean(axis=1))
    new[:, mask] = 0.0
    return PruneResult(
        mask,
        new,
        bias,
        float(sum(s["error_before"] for s in stats)),
        float(sum(s["error_after"] for s in stats)),
        f"fang-{method}",
        groups=stats,
        shortfall=shortfall,
    )


def head_columns(mask_heads, d_head: int) -> np.ndarray:
    return np.repeat(np.asarray(mask_heads, dtype=bool), d_head)


def prune_heads(wo, attn_out, d_head: int, method: str = "obc", sp: float = 0.0, n_prune=None, damping: float = DEFAULT_DAMPING, name: str = "") -> PruneResult:
    """Prune whole heads, i.e. contiguous ``d_head``-column blocks of ``W_o``.

    OBC scores a block by ``tr(W_B [H^-1_BB]^-1 W_B^T)`` and compensates all
    pruned blocks jointly; FLAP sums the channel fluctuation scores per head
    and returns a bias for ``b_o``.
    """
    wo = np.asarray(wo, dtype=np.float64)
    x = np.asarray(attn_out, dtype=np.float64)
    nh = wo.shape[1] // d_head
    count = prune_count(sp, nh, n_prune)
    if count >= nh:
        raise InputError(f"refusing to prune all {nh} heads")
    head_mask = np.zeros(nh, dtype=bool)
    if count == 0:
        return PruneResult(head_mask, wo.copy(), None, 0.0, 0.0, method)
    blocks = [slice(i * d_head, (i + 1) * d_head) for i in range(nh)]
    if method == "obc":
        h = hessian(x)
        hinv = sym_inverse_damped(h, damping, name)
        scores = np.empty(nh)
        for i, b in enumerate(blocks):
            wb = wo[:, b]
            try:
                scores[i] = np.trace(wb @ np.linalg.solve(hinv[b, b], wb.T))
            except np.linalg.LinAlgError as exc:
                raise SingularityError(f"{name}: head {i} block is singular") from exc
        head_mask = _lowest(scores, count)
        cols = head_columns(head_mask, d_head)
        new = wo + obc_compensate(wo, hinv, cols)
        new[:, cols] = 0.0
        before = np.where(cols, wo, 0.0)
        return PruneResult(head_mask, new, None, weighted_error(before, h), weighted_error(wo - new, h), "obc")
    if method == "flap":
        chan = flap_importance(wo, x)
        scores = np.array([chan[b].sum() for b in blocks])
        head_mask = _lowest(scores, count)
        cols = head_columns(head_mask, d_head)
        mean = x.mean(axis=1)
        before, after = _flap_errors(wo, x, cols, mean)
        return PruneResult(head_mask, np.where(cols, 0.0, wo), flap_bias(wo, cols, mean), before, after, "flap")
    raise ParameterError(f"unknown head pruning method {method!r}")
