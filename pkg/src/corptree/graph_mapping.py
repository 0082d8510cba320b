"""Per-enterprise indicator graphs.

Each indicator column of a lookback window is a vertex; edge weights are the
cosine similarity between columns. The mapped graph is the maximum spanning
tree of the complete similarity graph ("tree"), optionally augmented with the
top remaining high-weight edges ("tree_plus").
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataset import IndicatorPanel
from .errors import DataError, InsufficientHistory, UnknownFormat

NORM_EPS = 1e-12


class DisjointSet:
    """Union-find with path compression and union by rank."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


@dataclass(frozen=True)
class CorpGraph:
    """Weighted undirected graph over indicator vertices 0..n-1.

    Edges are (i, j, weight) with i < j. ``kind`` is "tree" for a spanning
    tree or "tree_plus" for a tree plus ``k_extra`` additional edges.
    """

    n: int
    edges: tuple[tuple[int, int, float], ...]  # canonically sorted by (i, j)
    kind: str = "tree"
    k_extra: int = 0

    def __post_init__(self):
        if self.kind not in ("tree", "tree_plus"):
            raise DataError(f"unknown graph kind {self.kind!r}")
        object.__setattr__(self, "edges", tuple(sorted(self.edges)))
        seen = set()
        for i, j, _ in self.edges:
            if not (0 <= i < j < self.n):
                raise DataError(f"bad edge ({i}, {j}) for n={self.n}")
            if (i, j) in seen:
                raise DataError(f"duplicate edge ({i}, {j})")
            seen.add((i, j))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_array(self) -> np.ndarray:
        """Edge endpoints as an (m, 2) int64 array."""
        if not self.edges:
            return np.empty((0, 2), dtype=np.int64)
        return np.array([(i, j) for i, j, _ in self.edges], dtype=np.int64)

    def total_weight(self) -> float:
        """Sum of edge weights over edges sorted by (i, j)."""
        return float(np.sum(np.array([w for _, _, w in sorted(self.edges)], dtype=np.float64)))


def is_spanning_tree(n: int, edges) -> bool:
    """True iff the (i, j) pairs form a connected acyclic cover of n vertices."""
    pairs = [(e[0], e[1]) for e in edges]
    if len(pairs) != n - 1:
        return False
    ds = DisjointSet(n)
    for i, j in pairs:
        if not ds.union(i, j):
            return False
    return True


def indicator_vectors(panel: IndicatorPanel, end_year: int, window: int) -> np.ndarray:
    """Last up-to-``window`` rows ending at ``end_year``, oldest first.

    Requires at least 2 usable rows; short histories are clamped, not padded.
    """
    if window < 2:
        raise DataError(f"window must be >= 2, got {window}")
    usable = [k for k, year in enumerate(panel.years) if year <= end_year]
    if len(usable) < 2:
        raise InsufficientHistory(panel.enterprise_id, end_year, len(usable))
    return panel.values[usable[-window:]]


def node_features(panel: IndicatorPanel, end_year: int, window: int) -> np.ndarray:
    """Per-vertex feature matrix (n_indicators x window).

    Each vertex carries its indicator's values over the lookback window,
    oldest first. Histories shorter than the window are left-padded with
    zeros so every sample has a fixed feature width.
    """
    rows = indicator_vectors(panel, end_year, window)
    feats = np.zeros((panel.values.shape[1], window))
    feats[:, window - rows.shape[0]:] = rows.T
    return feats


def cosine_similarity(m: np.ndarray) -> np.ndarray:
    """Symmetric cosine-similarity matrix over the columns of ``m``.

    Columns with norm below ``NORM_EPS`` get similarity 0 to every other
    vertex; the diagonal is forced to exactly 1.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2:
        raise DataError(f"need a 2-D matrix with >= 2 rows, got shape {m.shape}")
    norms = np.linalg.norm(m, axis=0)
    gram = m.T @ m
    safe = np.where(norms < NORM_EPS, 1.0, norms)
    s = gram / np.outer(safe, safe)
    degenerate = norms < NORM_EPS
    s[degenerate, :] = 0.0
    s[:, degenerate] = 0.0
    # Mirror the upper triangle so symmetry holds bitwise.
    upper = np.triu(s, k=1)
    s = upper + upper.T
    np.fill_diagonal(s, 1.0)
    return s


def _sorted_pairs(s: np.ndarray) -> list[tuple[int, int]]:
    """All i<j pairs by (weight descending, i ascending, j ascending)."""
    n = s.shape[0]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    pairs.sort(key=lambda p: (-s[p[0], p[1]], p[0], p[1]))
    return pairs


def max_spanning_tree(s: np.ndarray) -> CorpGraph:
    """Greedy maximum spanning tree of the complete weighted graph.

    Edges are scanned in (weight descending, (i, j) ascending) order and
    accepted unless they would close a cycle, until n-1 edges are placed.
    """
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[0]
    if s.shape != (n, n) or n < 2:
        raise DataError(f"similarity matrix must be square with n >= 2, got {s.shape}")
    ds = DisjointSet(n)
    edges = []
    for i, j in _sorted_pairs(s):
        if ds.union(i, j):
            edges.append((i, j, float(s[i, j])))
            if len(edges) == n - 1:
                break
    return CorpGraph(n=n, edges=tuple(edges), kind="tree")


def augment_plus(s: np.ndarray, tree: CorpGraph, k: int = 10) -> CorpGraph:
    """Add the ``k`` highest-weight non-tree edges (clamped to the complete graph)."""
    if k < 0:
        raise DataError(f"k must be >= 0, got {k}")
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (tree.n, tree.n):
        raise DataError("similarity matrix does not match the tree's vertex set")
    in_tree = {(i, j) for i, j, _ in tree.edges}
    extras = []
    for i, j in _sorted_pairs(s):
        if len(extras) == k:
            break
        if (i, j) not in in_tree:
            extras.append((i, j, float(s[i, j])))
    return CorpGraph(
        n=tree.n, edges=tree.edges + tuple(extras), kind="tree_plus", k_extra=len(extras)
    )


def build_graph(
    window_matrix: np.ndarray,
    plus_k: int = 0,
    abs_similarity: bool = False,
) -> CorpGraph:
    """Window matrix (w x n_indicators) to its mapped graph in one step."""
    s = cosine_similarity(window_matrix)
    if abs_similarity:
        s = np.abs(s)
        np.fill_diagonal(s, 1.0)
    tree = max_spanning_tree(s)
    if plus_k > 0:
        return augment_plus(s, tree, plus_k)
    return tree


def export_graph(g: CorpGraph, fmt: str, names: tuple[str, ...] | None = None) -> str:
    """Serialize a graph to DOT or edge-json text, deterministically."""
    if names is not None and len(names) != g.n:
        raise DataError(f"got {len(names)} names for {g.n} vertices")
    edges = sorted(g.edges)
    if fmt == "dot":
        lines = [f"graph {g.kind} {{"]
        for v in range(g.n):
            label = names[v] if names is not None else str(v)
            lines.append(f'  {v} [label="{label}"];')
        for i, j, w in edges:
            lines.append(f'  {i} -- {j} [weight="{w!r}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"
    if fmt == "edge-json":
        payload = {
            "n": g.n,
            "kind": g.kind,
            "k_extra": g.k_extra,
            "names": list(names) if names is not None else None,
            "edges": [[i, j, w] for i, j, w in edges],
        }
        return json.dumps(payload, indent=2) + "\n"
    raise UnknownFormat(fmt)


def parse_edge_json(text: str) -> CorpGraph:
    """Inverse of ``export_graph(..., "edge-json")``."""
    payload = json.loads(text)
    return CorpGraph(
        n=int(payload["n"]),
        edges=tuple((int(i), int(j), float(w)) for i, j, w in payload["edges"]),
        kind=payload["kind"],
        k_extra=int(payload.get("k_extra", 0)),
    )
