"""Directed road graphs, k-hop neighborhoods and aggregation matrices."""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

ROW = "row"
SYMMETRIC = "symmetric"


@dataclass(frozen=True)
class RoadGraph:
    n: int
    edges: tuple  # ((src, dst, weight), ...), sorted and unique
    labels: tuple = field(default=())

    @property
    def adjacency(self):
        """Dense weights, ``A[src, dst]``."""
        a = np.zeros((self.n, self.n))
        for s, d, w in self.edges:
            a[s, d] = w
        return a

    def predecessors(self, i):
        return [s for s, d, _ in self.edges if d == i]

    def successors(self, i):
        return [d for s, d, _ in self.edges if s == i]

    def relabel(self, perm):
        """Graph whose node ``perm[i]`` is this graph's node ``i``."""
        perm = list(perm)
        edges = [(perm[s], perm[d], w) for s, d, w in self.edges]
        labels = ()
        if self.labels:
            inv = np.argsort(perm)
            labels = tuple(self.labels[j] for j in inv)
        return build_graph(edges, self.n, labels)


def build_graph(edges, n=None, labels=None):
    """Validate an edge list of ``(src, dst)`` or ``(src, dst, weight)``.

    Duplicate directed edges keep the first weight and log a warning.
    """
    norm = []
    for e in edges:
        s, d = int(e[0]), int(e[1])
        w = float(e[2]) if len(e) > 2 else 1.0
        if w < 0 or not np.isfinite(w):
            raise ValueError(f"edge ({s}, {d}) has invalid weight {w}")
        norm.append((s, d, w))
    if n is None:
        n = 1 + max((max(s, d) for s, d, _ in norm), default=-1)
    for s, d, _ in norm:
        if not (0 <= s < n and 0 <= d < n):
            raise ValueError(f"edge ({s}, {d}) has an endpoint outside 0..{n - 1}")
    seen = {}
    for s, d, w in norm:
        if (s, d) in seen:
            log.warning("duplicate edge (%d, %d) dropped", s, d)
            continue
        seen[(s, d)] = w
    labels = tuple(labels) if labels else ()
    if labels and len(labels) != n:
        raise ValueError("label count does not match node count")
    return RoadGraph(n, tuple(sorted((s, d, w) for (s, d), w in seen.items())), labels)


def read_edges_csv(path, n=None):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"src", "dst"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must be src,dst,weight")
        edges = []
        for lineno, row in enumerate(reader, start=2):
            try:
                w = row.get("weight")
                edges.append((int(row["src"]), int(row["dst"]), float(w) if w not in (None, "") else 1.0))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad edge row {row}") from exc
    return build_graph(edges, n)


def write_edges_csv(g, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "weight"])
        for s, d, wt in g.edges:
            w.writerow([s, d, repr(wt)])


@dataclass(frozen=True)
class Neighborhood:
    target: int
    members: frozenset
    k: int


def _hops(g, i, k, undirected):
    back = {j: [] for j in range(g.n)}
    for s, d, _ in g.edges:
        back[d].append(s)
        if undirected:
            back[s].append(d)
    dist = {i: 0}
    queue = deque([i])
    while queue:
        u = queue.popleft()
        if dist[u] == k:
            continue
        for v in back[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def k_hop_neighborhood(g, i, k, undirected=False):
    """Nodes with a directed path of length <= k into ``i``, plus ``i`` itself."""
    if not 0 <= i < g.n:
        raise ValueError(f"node {i} out of range 0..{g.n - 1}")
    if k < 1:
        raise ValueError("hop radius must be >= 1")
    return Neighborhood(i, frozenset(_hops(g, i, k, undirected)), k)


def neighborhood_mask(g, k, undirected=False):
    """Boolean N x N mask, ``mask[i, n]`` true when ``n`` is in the k-hop neighborhood of ``i``."""
    m = np.zeros((g.n, g.n), dtype=bool)
    for i in range(g.n):
        for j in _hops(g, i, k, undirected):
            m[i, j] = True
    return m


def aggregation_matrix(g, k=1, scheme=ROW, undirected=False):
    """Fixed aggregation coefficients ``a[i, n]`` over k-hop neighborhoods.

    ``row``: row-normalized ``(A^T + I)^k`` so row i aggregates from upstream
    nodes.  ``symmetric``: ``D^-1/2 (S + I)^k D^-1/2`` with ``S`` the
    symmetrized adjacency.  Self-loops are always present, so isolated nodes
    get a unit row.
    """
    if k < 1:
        raise ValueError("hop radius must be >= 1")
    a = g.adjacency
    np.fill_diagonal(a, 0.0)
    eye = np.eye(g.n)
    if scheme == ROW:
        base = a.T + a if undirected else a.T
        m = np.linalg.matrix_power(base + eye, k)
        mask = neighborhood_mask(g, k, undirected)
        m = np.where(mask, m, 0.0)
        return m / m.sum(axis=1, keepdims=True)
    if scheme == SYMMETRIC:
        s = np.maximum(a, a.T)
        m = np.linalg.matrix_power(s + eye, k)
        m = np.where(neighborhood_mask(g, k, undirected=True), m, 0.0)
        d = m.sum(axis=1) ** -0.5
        return d[:, None] * m * d[None, :]
    raise ValueError(f"unknown aggregation scheme {scheme!r}")
