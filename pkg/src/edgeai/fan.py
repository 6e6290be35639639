"""Filter activation network over a teacher's final-conv filters, and its
partitioning into budget-balanced communities via modularity maximization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .tensor import Tensor
from .zoo import Model

DEAD_FILTER_REL_THRESHOLD = 1e-4


@dataclass
class FilterGraph:
    """Weighted co-activation graph over live final-conv filters.

    profiles[i, c] is the class-mean spatially-averaged post-ReLU activation
    of filter i; weights is a dense symmetric matrix indexed like `nodes`.
    """

    nodes: list[int]            # live filter ids
    dead: list[int]
    profiles: np.ndarray        # (C_t, L) for all filters, dead included
    weights: np.ndarray         # (n_live, n_live), zero diagonal

    @property
    def activity(self) -> np.ndarray:
        """Per-live-node overall activity score (max over classes)."""
        return self.profiles[self.nodes].max(axis=1)

    def to_json(self) -> str:
        return json.dumps({
            "nodes": self.nodes,
            "dead": self.dead,
            "profiles": self.profiles.tolist(),
            "weights": self.weights.tolist(),
        })

    @staticmethod
    def from_json(text: str) -> "FilterGraph":
        doc = json.loads(text)
        return FilterGraph(doc["nodes"], doc["dead"],
                           np.asarray(doc["profiles"]), np.asarray(doc["weights"]))

    def write_edge_list(self, path):
        with open(path, "w") as f:
            for a in range(len(self.nodes)):
                for b in range(a + 1, len(self.nodes)):
                    w = self.weights[a, b]
                    if w > 0:
                        f.write(f"{self.nodes[a]} {self.nodes[b]} {w:.10g}\n")


@dataclass
class Partition:
    """Disjoint covering assignment of live nodes to communities."""

    communities: list[list[int]]   # lists of filter ids
    modularity: float

    def sizes(self) -> list[int]:
        return [len(c) for c in self.communities]

    def assignment(self) -> dict[int, int]:
        return {n: i for i, comm in enumerate(self.communities) for n in comm}

    def to_json(self) -> str:
        return json.dumps({"communities": self.communities, "modularity": self.modularity})

    @staticmethod
    def from_json(text: str) -> "Partition":
        doc = json.loads(text)
        return Partition([list(c) for c in doc["communities"]], doc["modularity"])


def build_fan(teacher: Model, ds: Dataset, batch_size: int = 256,
              dead_threshold: float = DEAD_FILTER_REL_THRESHOLD) -> FilterGraph:
    """Class-profile every final-conv filter and connect filters that
    activate for the same classes: w_ij = sum_c profile_i(c) * profile_j(c)."""
    L = ds.num_classes
    sums = None
    counts = np.zeros(L)
    for i in range(0, len(ds), batch_size):
        maps = teacher.forward(Tensor(ds.images[i : i + batch_size])).final_conv.data
        pooled = np.maximum(maps, 0.0).mean(axis=(2, 3))  # (n, C_t), post-ReLU
        labels = ds.labels[i : i + batch_size]
        if sums is None:
            sums = np.zeros((pooled.shape[1], L))
        for c in np.unique(labels):
            sel = labels == c
            sums[:, c] += pooled[sel].sum(axis=0)
            counts[c] += sel.sum()
    if np.any(counts == 0):
        raise ValueError(f"empty class(es): {np.flatnonzero(counts == 0).tolist()}")
    profiles = sums / counts[None, :]
    peak = profiles.max(axis=1)
    threshold = dead_threshold * peak.max() if peak.max() > 0 else 0.0
    live = [int(i) for i in np.flatnonzero(peak >= threshold)] if peak.max() > 0 else []
    dead = [int(i) for i in range(profiles.shape[0]) if i not in set(live)]
    P = profiles[live]
    W = P @ P.T
    np.fill_diagonal(W, 0.0)
    return FilterGraph(live, dead, profiles, W)


# ---------------------------------------------------------------------------
# modularity


def modularity(g: FilterGraph, part: Partition) -> float:
    """Weighted Newman modularity Q = sum_c (e_c/m - (d_c/2m)^2)."""
    return _modularity_matrix(g.weights, _labels_for(g, part))


def _labels_for(g: FilterGraph, part: Partition) -> np.ndarray:
    assign = part.assignment()
    missing = [n for n in g.nodes if n not in assign]
    if missing:
        raise ValueError(f"partition does not cover nodes {missing[:5]}")
    return np.array([assign[n] for n in g.nodes])


def _modularity_matrix(W: np.ndarray, labels: np.ndarray) -> float:
    two_m = W.sum()
    if two_m == 0:
        return 0.0
    degrees = W.sum(axis=1)
    q = 0.0
    for c in np.unique(labels):
        sel = labels == c
        e_c = W[np.ix_(sel, sel)].sum() / 2.0   # intra-community weight
        d_c = degrees[sel].sum()
        q += e_c / (two_m / 2.0) - (d_c / two_m) ** 2
    return float(q)


def detect_communities(g: FilterGraph, resolution: float = 1.0, seed: int = 0) -> Partition:
    """Greedy modularity maximization: local node moves then community
    aggregation, repeated until no phase improves Q. Deterministic per seed."""
    n = len(g.nodes)
    if n == 0:
        raise ValueError("empty graph")
    W = g.weights.astype(np.float64)
    if W.sum() == 0:
        return Partition([[node] for node in g.nodes], 0.0)
    labels = _louvain(W, resolution, np.random.default_rng(seed))
    communities = [
        [g.nodes[i] for i in np.flatnonzero(labels == c)] for c in np.unique(labels)
    ]
    part = Partition(communities, 0.0)
    part.modularity = modularity(g, part)
    return part


def _louvain(W: np.ndarray, resolution: float, rng) -> np.ndarray:
    n = W.shape[0]
    mapping = np.arange(n)  # original node -> current community label
    current = W
    prev_q = _modularity_matrix(W, mapping)
    while True:
        labels = _local_moves(current, resolution, rng)
        new_map = labels[mapping]
        q = _modularity_matrix(W, new_map)
        assert q >= prev_q - 1e-12, "greedy phase decreased modularity"
        if q <= prev_q + 1e-12:
            return mapping
        prev_q = q
        mapping = _renumber(new_map)
        current = _aggregate(W, mapping)


def _renumber(labels: np.ndarray) -> np.ndarray:
    uniq, inv = np.unique(labels, return_inverse=True)
    return inv


def _aggregate(W: np.ndarray, mapping: np.ndarray) -> np.ndarray:
    k = mapping.max() + 1
    agg = np.zeros((k, k))
    for a in range(k):
        sel_a = mapping == a
        for b in range(a, k):
            sel_b = mapping == b
            w = W[np.ix_(sel_a, sel_b)].sum()
            agg[a, b] = agg[b, a] = w
    # self-weight: keep intra-community weight on the diagonal (counted twice in 2m)
    return agg


def _local_moves(W: np.ndarray, resolution: float, rng) -> np.ndarray:
    n = W.shape[0]
    labels = np.arange(n)
    # aggregated graphs carry 2x intra-community weight on the diagonal, so a
    # plain row sum keeps every node's degree equal to the sum of its members'
    degrees = W.sum(axis=1)
    two_m = float(degrees.sum())
    if two_m == 0:
        return labels
    comm_degree = degrees.copy()
    improved = True
    while improved:
        improved = False
        for i in rng.permutation(n):
            li = labels[i]
            comm_degree[li] -= degrees[i]
            # weight from i to each community (excluding self-edge)
            w_to = np.zeros(n)
            for j in range(n):
                if j != i and W[i, j] > 0:
                    w_to[labels[j]] += W[i, j]
            candidates = np.flatnonzero(w_to > 0)
            best_l, best_gain = li, w_to[li] - resolution * degrees[i] * comm_degree[li] / two_m
            for l in candidates:
                gain = w_to[l] - resolution * degrees[i] * comm_degree[l] / two_m
                if gain > best_gain + 1e-12:
                    best_gain, best_l = gain, l
            labels[i] = best_l
            comm_degree[best_l] += degrees[i]
            if best_l != li:
                improved = True
    return _renumber(labels)


def brute_force_best_partition(W: np.ndarray):
    """Exhaustive Bell-number search over all set partitions; oracle only."""
    n = W.shape[0]
    best_q, best_labels = -np.inf, None
    labels = np.zeros(n, dtype=np.int64)

    def rec(i, max_label):
        nonlocal best_q, best_labels
        if i == n:
            q = _modularity_matrix(W, labels)
            if q > best_q:
                best_q, best_labels = q, labels.copy()
            return
        for l in range(max_label + 1):
            labels[i] = l
            rec(i + 1, max(max_label, l + 1))

    rec(0, 0)
    return best_q, best_labels


# ---------------------------------------------------------------------------
# budget balancing


def balance_partitions(g: FilterGraph, part: Partition, k_devices: int,
                       budget_filters: int) -> Partition:
    """Repack communities into exactly k groups, each within the filter
    budget, by first-fit-decreasing; oversized communities are split by
    descending node activity first. Modularity is recomputed (it may drop)."""
    total = sum(part.sizes())
    if total > k_devices * budget_filters:
        raise ValueError(
            f"infeasible: {total} filters > {k_devices} devices x {budget_filters}"
        )
    if len(part.communities) == k_devices and all(s <= budget_filters for s in part.sizes()):
        return Partition([list(c) for c in part.communities], modularity(g, part))

    activity = {n: a for n, a in zip(g.nodes, g.activity)}
    pieces: list[list[int]] = []
    for comm in part.communities:
        if len(comm) <= budget_filters:
            pieces.append(list(comm))
        else:
            ordered = sorted(comm, key=lambda n: -activity[n])
            pieces.extend(ordered[i : i + budget_filters]
                          for i in range(0, len(ordered), budget_filters))

    pieces.sort(key=len, reverse=True)
    bins: list[list[int]] = [[] for _ in range(k_devices)]
    for piece in pieces:
        placed = False
        for b in bins:
            if len(b) + len(piece) <= budget_filters:
                b.extend(piece)
                placed = True
                break
        if not placed:
            raise ValueError("first-fit-decreasing could not pack within budget")
    # no group may stay empty: steal highest-activity filters from the fullest
    for b in bins:
        if not b:
            donor = max(bins, key=len)
            if len(donor) < 2:
                raise ValueError("cannot populate every device group")
            donor.sort(key=lambda n: -activity[n])
            b.append(donor.pop(0))
    result = Partition([sorted(b) for b in bins], 0.0)
    result.modularity = modularity(g, result)
    return result
