"""Communication graphs for decentralized training.

Nodes are integers ``0..n-1``; edges are undirected and stored as sorted
``(low, high)`` pairs.  Every builder returns a connected graph.
"""
from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConstructionFailure, FormatError, InvalidArgument

KINDS = ("ring", "grid", "clique_ring", "random")
MAX_RANDOM_RETRIES = 1000


@dataclass(frozen=True)
class Topology:
    node_count: int
    edges: frozenset[tuple[int, int]]
    kind: str = "random"
    shape: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.node_count < 1:
            raise InvalidArgument("node_count must be positive")
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown topology kind {self.kind!r}")
        for a, b in self.edges:
            if not (0 <= a < b < self.node_count):
                raise InvalidArgument(f"bad edge ({a}, {b}): edges must be (low, high) with distinct valid ids")

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        adj: list[list[int]] = [[] for _ in range(self.node_count)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return tuple(tuple(sorted(nb)) for nb in adj)

    def degree(self, node: int) -> int:
        return len(self.neighbors[node])

    def is_connected(self) -> bool:
        return len(_bfs(self.neighbors, 0)) == self.node_count

    def check_node(self, node: int) -> None:
        if not isinstance(node, (int, np.integer)) or not 0 <= node < self.node_count:
            raise InvalidArgument(f"node id {node!r} outside 0..{self.node_count - 1}")

    @cached_property
    def hops(self) -> np.ndarray:
        """All-pairs hop distances (BFS from every node)."""
        out = np.empty((self.node_count, self.node_count), dtype=np.int64)
        for src in range(self.node_count):
            dist = _bfs(self.neighbors, src)
            if len(dist) != self.node_count:
                raise InvalidArgument("topology is not connected")
            for dst, d in dist.items():
                out[src, dst] = d
        out.setflags(write=False)
        return out

    def to_edge_list(self) -> str:
        lines = [str(self.node_count)]
        lines.extend(f"{a} {b}" for a, b in sorted(self.edges))
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_edge_list().encode()).hexdigest()


def _bfs(neighbors, src: int) -> dict[int, int]:
    dist = {src: 0}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in neighbors[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _edge(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def build_ring(n: int) -> Topology:
    if n < 3:
        raise InvalidArgument(f"ring needs at least 3 nodes, got {n}")
    edges = frozenset(_edge(i, (i + 1) % n) for i in range(n))
    return Topology(n, edges, "ring", (n,))


def build_grid(rows: int, cols: int) -> Topology:
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise InvalidArgument(f"grid needs rows*cols >= 2, got {rows}x{cols}")
    edges = set()
    for r in range(rows):
        for c in range(cols):
            node = r * cols + c
            if c + 1 < cols:
                edges.add((node, node + 1))
            if r + 1 < rows:
                edges.add((node, node + cols))
    return Topology(rows * cols, frozenset(edges), "grid", (rows, cols))


def build_clique_ring(num_cliques: int, clique_size: int) -> Topology:
    """Complete graphs on a cycle.

    Clique ``k`` occupies ids ``k*clique_size .. (k+1)*clique_size - 1``.  Its
    local node 0 bridges to local node 1 of clique ``k+1``.
    """
    if num_cliques < 3 or clique_size < 2:
        raise InvalidArgument(
            f"clique ring needs >= 3 cliques of size >= 2, got {num_cliques}x{clique_size}")
    edges = set()
    for k in range(num_cliques):
        base = k * clique_size
        for i in range(clique_size):
            for j in range(i + 1, clique_size):
                edges.add((base + i, base + j))
        nxt = ((k + 1) % num_cliques) * clique_size
        edges.add(_edge(base, nxt + 1))
    return Topology(num_cliques * clique_size, frozenset(edges), "clique_ring", (num_cliques, clique_size))


def build_random(n: int, target_degree: int, seed: int) -> Topology:
    """Connected near-regular random graph.

    Starts from a deterministic circulant graph with the requested degree, then
    randomizes it with seeded degree-preserving edge swaps.  Disconnected
    results are rejected and swapping resumes, up to ``MAX_RANDOM_RETRIES``.
    """
    if not 2 <= target_degree < n:
        raise InvalidArgument(f"need 2 <= target_degree < n, got degree {target_degree} for n={n}")
    rng = np.random.default_rng(seed)
    edges = set()
    for i in range(n):
        for off in range(1, target_degree // 2 + 1):
            edges.add(_edge(i, (i + off) % n))
    if target_degree % 2:
        # odd degree: chords across the circle; an odd n leaves one node one short
        half = n // 2
        for i in range(half):
            edges.add(_edge(i, i + half))
    for _ in range(MAX_RANDOM_RETRIES):
        edge_list = sorted(edges)
        for _ in range(10 * len(edge_list)):
            i, j = rng.integers(len(edge_list), size=2)
            a, b = edge_list[i]
            c, d = edge_list[j]
            if rng.random() < 0.5:
                c, d = d, c
            if len({a, b, c, d}) < 4:
                continue
            e1, e2 = _edge(a, d), _edge(c, b)
            if e1 in edges or e2 in edges:
                continue
            edges -= {edge_list[i], edge_list[j]}
            edges |= {e1, e2}
            edge_list[i], edge_list[j] = e1, e2
        topo = Topology(n, frozenset(edges), "random", (n, target_degree))
        if topo.is_connected():
            return topo
    raise ConstructionFailure(f"no connected random graph after {MAX_RANDOM_RETRIES} retries")


def hop_distance(t: Topology, a: int, b: int) -> int:
    t.check_node(a)
    t.check_node(b)
    return int(t.hops[a, b])


def metropolis_weights(t: Topology) -> np.ndarray:
    """Metropolis-Hastings gossip weights; symmetric and doubly stochastic."""
    n = t.node_count
    w = np.zeros((n, n))
    deg = [t.degree(i) for i in range(n)]
    for a, b in t.edges:
        w[a, b] = w[b, a] = 1.0 / (1 + max(deg[a], deg[b]))
    w[np.diag_indices(n)] = 1.0 - w.sum(axis=1)
    return w


def parse_edge_list(text: str, kind: str = "random") -> Topology:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty edge list", 0)
    try:
        n = int(lines[0])
        edges = frozenset(_edge(*map(int, ln.split())) for ln in lines[1:])
    except (ValueError, TypeError) as exc:
        raise FormatError(f"malformed edge list: {exc}") from exc
    return Topology(n, edges, kind)


def build_topology(spec: str) -> Topology:
    """Build from a compact string such as ``ring:16``, ``grid:4x4``,
    ``clique_ring:4x4`` or ``random:20:3:7`` (n, degree, seed)."""
    kind, _, args = spec.partition(":")
    try:
        if kind == "ring":
            return build_ring(int(args))
        if kind == "grid":
            r, c = args.split("x")
            return build_grid(int(r), int(c))
        if kind == "clique_ring":
            k, s = args.split("x")
            return build_clique_ring(int(k), int(s))
        if kind == "random":
            n, d, s = args.split(":")
            return build_random(int(n), int(d), int(s))
    except ValueError as exc:
        if isinstance(exc, InvalidArgument):
            raise
        raise InvalidArgument(f"bad topology spec {spec!r}") from exc
    raise InvalidArgument(f"unknown topology kind in {spec!r}")
