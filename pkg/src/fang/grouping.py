"""Context clustering and neuron-to-function grouping for one FFN layer.

Pipeline for a layer: PCA-reduce the FFN inputs, K-Means the tokens, score
every (cluster, neuron) pair by mean ``|h * dL/dh|``, carve out a shared
group of multiply-selected neurons, then split the rest into K equal groups
by an exact balanced assignment. Group ``k`` is tied to token cluster ``k``
and reweights the token clusters by ``alpha[k]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, DimensionError, InputError, NumericalError, ParameterError
from .numcore import eigh_topk

REWEIGHT_MODES = ("ours", "reverse", "uniform", "only_matched")
GROUPING_MODES = ("fang", "random")


def pca_fit(x: np.ndarray, r: int):
    """Center the columns of ``x`` (d x T) and return ``(mean, components, eigvals)``."""
    d, T = x.shape
    if r > min(d, T) or r < 1:
        raise DimensionError(f"PCA dimension {r} not in [1, min(d={d}, T={T})]")
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    cov = xc @ xc.T / T
    vals, vecs = eigh_topk(cov, r)
    return mean, vecs, vals


def pca_reduce(x: np.ndarray, r: int) -> np.ndarray:
    mean, comps, _ = pca_fit(x, r)
    return comps.T @ (x - mean)


@dataclass
class ContextClusters:
    labels: np.ndarray
    centroids_pca: np.ndarray
    counts: np.ndarray
    objective: list = field(default_factory=list)
    n_iter: int = 0
    centroids_hidden: Optional[np.ndarray] = None

    @property
    def k(self) -> int:
        return self.centroids_pca.shape[0]


def _sq_dists(points, centers):
    # points: T x r, centers: K x r
    d2 = (points * points).sum(1)[:, None] - 2 * points @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def _kmeans_pp(points, k, rng):
    T = points.shape[0]
    centers = [points[rng.integers(T)]]
    closest = _sq_dists(points, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(T)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, T - 1)
        centers.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx][None, :])[:, 0])
    return np.array(centers)


def _repair_empty(points, labels, centers, k):
    """Move the point farthest from its centroid into each empty cluster."""
    counts = np.bincount(labels, minlength=k)
    while (counts == 0).any():
        empty = int(np.flatnonzero(counts == 0)[0])
        dist = ((points - centers[labels]) ** 2).sum(1)
        dist[counts[labels] <= 1] = -1.0
        far = int(np.argmax(dist))
        counts[labels[far]] -= 1
        labels[far] = empty
        counts[empty] = 1
        centers[empty] = points[far]
    return labels


def kmeans(xr: np.ndarray, k: int, seed: int, tol: float = 1e-4, max_iter: int = 100) -> ContextClusters:
    """Lloyd's algorithm with k-means++ seeding on the columns of ``xr``."""
    points = np.asarray(xr, dtype=np.float64).T
    T = points.shape[0]
    if k < 1:
        raise InputError("k must be positive")
    if T < k:
        raise InputError(f"cannot form {k} clusters from {T} tokens")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(points, k, rng)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(points, centers)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(T), labels].sum()))
        labels = _repair_empty(points, labels, centers, k)
        new = np.zeros_like(centers)
        np.add.at(new, labels, points)
        new /= np.bincount(labels, minlength=k)[:, None]
        shift = float(np.sqrt(((new - centers) ** 2).sum(1)).max())
        centers = new
        if shift < tol:
            break
    d2 = _sq_dists(points, centers)
    labels = _repair_empty(points, np.argmin(d2, axis=1), centers, k)
    counts = np.bincount(labels, minlength=k)
    final = np.zeros_like(centers)
    np.add.at(final, labels, points)
    centers = final / counts[:, None]
    history.append(float(((points - centers[labels]) ** 2).sum()))
    return ContextClusters(labels=labels, centroids_pca=centers, counts=counts, objective=history, n_iter=it)


def score_matrix(hidden: np.ndarray, grad: np.ndarray, labels: np.ndarray, k: Optional[int] = None) -> np.ndarray:
    """Mean first-order Taylor sensitivity ``|h * dL/dh|`` per (cluster, neuron)."""
    hidden = np.asarray(hidden, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    labels = np.asarray(labels)
    if hidden.shape != grad.shape:
        raise DimensionError(f"hidden {hidden.shape} and grad {grad.shape} differ")
    if labels.shape != (hidden.shape[1],):
        raise DimensionError("one label per token column is required")
    k = int(labels.max()) + 1 if k is None else k
    onehot = np.zeros((k, labels.size))
    onehot[labels, np.arange(labels.size)] = 1.0
    counts = onehot.sum(1)
    sums = onehot @ np.abs(hidden * grad).T
    return sums / np.maximum(counts, 1)[:, None]


def _top(scores: np.ndarray, m: int) -> np.ndarray:
    # higher score first, then lower index
    return np.lexsort((np.arange(scores.size), -scores))[:m]


def select_shared_group(s: np.ndarray, m: int, size: Optional[int] = None) -> np.ndarray:
    """Neurons picked by several clusters' top-``m`` lists, most frequent first.

    Frequency ties go to the higher total score, then the lower index. Slots
    left over when fewer than ``size`` neurons are multiply selected are filled
    by total score. Returns sorted indices.
    """
    s = np.asarray(s, dtype=np.float64)
    k, n = s.shape
    size = m if size is None else size
    if m > n or size > n or m < 0 or size < 0:
        raise InputError(f"shared group size exceeds {n} neurons")
    freq = np.zeros(n, dtype=np.int64)
    for row in s:
        freq[_top(row, m)] += 1
    total = s.sum(0)
    order = np.lexsort((np.arange(n), -total, -freq))
    multi = [j for j in order if freq[j] >= 2][:size]
    if len(multi) < size:
        taken = set(multi)
        fill = [j for j in _top(total, n) if j not in taken]
        multi += fill[: size - len(multi)]
    return np.sort(np.array(multi, dtype=np.int64))


def assign_groups(s: np.ndarray, shared, k: int, m: int, exact: bool = True) -> list[np.ndarray]:
    """Split the non-shared neurons into ``k`` groups of ``m`` maximizing the
    total score ``sum_k sum_{j in G_k} S[k, j]``.

    The exact path solves the capacity-expanded assignment (every cluster
    repeated ``m`` times); ``exact=False`` is a greedy best-pair-first fill.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape[0] != k:
        raise DimensionError(f"score matrix has {s.shape[0]} rows, expected {k}")
    n = s.shape[1]
    shared = set(int(j) for j in shared)
    rest = np.array([j for j in range(n) if j not in shared], dtype=np.int64)
    if rest.size != k * m:
        raise ConfigError(f"{rest.size} assignable neurons cannot form {k} groups of {m}")
    groups: list[list[int]] = [[] for _ in range(k)]
    if m == 0:
        return [np.zeros(0, dtype=np.int64) for _ in range(k)]
    if exact:
        sub = s[:, rest]
        cost = -np.repeat(sub, m, axis=0).T  # neurons x slots
        rows, cols = linear_sum_assignment(cost)
        for r, c in zip(rows, cols):
            groups[c // m].append(int(rest[r]))
    else:
        pairs = [(-s[c, j], j, c) for c in range(k) for j in rest]
        pairs.sort()
        used = set()
        for _, j, c in pairs:
            if j in used or len(groups[c]) >= m:
                continue
            groups[c].append(int(j))
            used.add(j)
    return [np.sort(np.array(g, dtype=np.int64)) for g in groups]


def centroid_distance_matrix(hidden: np.ndarray, labels: np.ndarray, k: Optional[int] = None):
    """Pairwise L2 distances between per-cluster mean hidden vectors.

    Returns ``(D, centers)`` with ``centers`` shaped ``k x N_n``.
    """
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if k is None else k
    if k < 1:
        raise InputError("need at least one cluster")
    counts = np.bincount(labels, minlength=k)
    if (counts == 0).any():
        raise NumericalError(f"cluster {int(np.flatnonzero(counts == 0)[0])} is empty")
    centers = np.zeros((k, hidden.shape[0]))
    np.add.at(centers, labels, hidden.T)
    centers /= counts[:, None]
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return dist, centers


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def alpha_weights(dist: np.ndarray, tau: float, mode: str = "ours") -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    k = dist.shape[0]
    if mode == "uniform":
        return np.full((k, k), 1.0 / k)
    if mode == "only_matched":
        return np.eye(k)
    if mode not in ("ours", "reverse"):
        raise ParameterError(f"unknown reweight mode {mode!r}")
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    sign = -1.0 if mode == "ours" else 1.0
    return _softmax_rows(sign * dist / tau)


@dataclass
class NeuronGrouping:
    groups: list
    shared: np.ndarray
    alpha: Optional[np.ndarray] = None
    dist: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None
    mode: str = "fang"
    solver: str = "exact"

    @property
    def k(self) -> int:
        return len(self.groups)

    def check_partition(self, n: int) -> None:
        sets = [np.asarray(g) for g in self.groups] + [np.asarray(self.shared)]
        allidx = np.concatenate(sets) if sets else np.zeros(0, dtype=np.int64)
        if allidx.size != n or np.unique(allidx).size != n or (allidx.size and (allidx.min() < 0 or allidx.max() >= n)):
            raise NumericalError("neuron groups do not partition the layer")

    def to_dict(self) -> dict:
        def lst(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "mode": self.mode,
            "solver": self.solver,
            "groups": [lst(g) for g in self.groups],
            "shared": lst(self.shared),
            "alpha": lst(self.alpha),
            "D": lst(self.dist),
            "cluster_counts": lst(self.counts),
        }


def random_grouping(n: int, k: int, seed: int, shared: bool = True) -> NeuronGrouping:
    """Seeded uniform balanced partition; one of the ``k+1`` sets is shared."""
    if n < k + (1 if shared else 0):
        raise InputError(f"{n} neurons cannot form {k} groups")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    parts = k + 1 if shared else k
    m = n // parts
    chunks = [perm[i * m : (i + 1) * m] for i in range(parts)]
    rem = perm[parts * m :]
    if shared:
        pick = int(rng.integers(parts))
        shared_idx = np.concatenate([chunks.pop(pick), rem])
    else:
        shared_idx = rem
    return NeuronGrouping(
        groups=[np.sort(c) for c in chunks],
        shared=np.sort(shared_idx).astype(np.int64),
        mode="random",
        solver="random",
    )


def group_sizes(n: int, k: int, shared: bool) -> tuple[int, int]:
    """``(m, shared_size)``; leftover neurons always join the shared set."""
    m = n // (k + 1) if shared else n // k
    return m, n - k * m


def build_grouping(
    ffn_input: np.ndarray,
    hidden: np.ndarray,
    grad: np.ndarray,
    k: int,
    tau: float = 9.0,
    pca_dim: int = 64,
    reweight: str = "ours",
    mode: str = "fang",
    shared: bool = True,
    seed: int = 0,
    exact: bool = True,
) -> NeuronGrouping:
    """Full grouping for one layer from its captured FFN input, ``W_down``
    input and gradient snapshot."""
    if mode not in GROUPING_MODES:
        raise ParameterError(f"unknown grouping mode {mode!r}")
    n, T = hidden.shape
    if n < k + (1 if shared else 0):
        raise ConfigError(f"{n} neurons cannot host {k} groups" + (" plus a shared group" if shared else ""))
    r = min(pca_dim, ffn_input.shape[0], T)
    clusters = kmeans(pca_reduce(ffn_input, r), k, seed)
    dist, centers = centroid_distance_matrix(hidden, clusters.labels, k)
    clusters.centroids_hidden = centers
    alpha = alpha_weights(dist, tau, reweight)
    m, shared_size = group_sizes(n, k, shared)
    if mode == "random":
        g = random_grouping(n, k, seed, shared=shared)
    else:
        s = score_matrix(hidden, grad, clusters.labels, k)
        shared_idx = select_shared_group(s, m, shared_size) if shared else select_shared_group(s, 0, shared_size)
        groups = assign_groups(s, shared_idx, k, m, exact=exact)
        g = NeuronGrouping(groups, shared_idx, solver="exact" if exact else "greedy")
    g.alpha, g.dist, g.labels, g.counts = alpha, dist, clusters.labels, clusters.counts
    g.check_partition(n)
    return g
