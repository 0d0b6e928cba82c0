import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfl_backdoor.errors import InvalidArgument
from dfl_backdoor.topology import (build_clique_ring, build_grid, build_random, build_ring, build_topology,
                                   hop_distance, metropolis_weights, parse_edge_list)

from .oracles import floyd_warshall


def small_topologies():
    out = [build_ring(n) for n in (3, 4, 6, 10, 16, 20)]
    out += [build_grid(r, c) for r, c in ((1, 2), (1, 5), (2, 2), (3, 3), (4, 4), (4, 5))]
    out += [build_clique_ring(k, s) for k, s in ((3, 2), (4, 3), (4, 4), (5, 4))]
    out += [build_random(n, d, s) for n, d, s in ((10, 3, 7), (12, 4, 1), (20, 3, 5), (4, 3, 1))]
    return out


def test_ring_40():
    t = build_ring(40)
    assert t.node_count == 40 and len(t.edges) == 40
    assert all(t.degree(i) == 2 for i in range(40))


def test_ring_small():
    assert build_ring(3).edges == frozenset({(0, 1), (1, 2), (0, 2)})
    assert build_ring(6).neighbors[0] == (1, 5)
    with pytest.raises(InvalidArgument):
        build_ring(2)


def test_grid():
    g = build_grid(3, 3)
    assert g.node_count == 9 and len(g.edges) == 2 * 3 * 3 - 3 - 3
    assert g.degree(4) == 4
    path = build_grid(1, 5)
    assert sorted(path.degree(i) for i in range(5)) == [1, 1, 2, 2, 2]
    assert len(build_grid(2, 2).edges) == 4
    assert all(build_grid(2, 2).degree(i) == 2 for i in range(4))
    with pytest.raises(InvalidArgument):
        build_grid(1, 1)


def test_clique_ring():
    t = build_clique_ring(4, 3)
    assert t.node_count == 12 and len(t.edges) == 16
    assert len(build_clique_ring(3, 2).edges) == 6
    # local node 0 of clique k bridges to local node 1 of clique k+1
    for k in range(4):
        assert tuple(sorted((k * 3, ((k + 1) % 4) * 3 + 1))) in t.edges
    t44 = build_clique_ring(4, 4)
    for k in range(4):
        assert t44.degree(k * 4) == 4 and t44.degree(k * 4 + 1) == 4
        assert t44.degree(k * 4 + 2) == 3
    with pytest.raises(InvalidArgument):
        build_clique_ring(2, 3)
    with pytest.raises(InvalidArgument):
        build_clique_ring(3, 1)


def test_random_graph():
    a = build_random(10, 3, 7)
    b = build_random(10, 3, 7)
    assert a.edges == b.edges
    assert a.is_connected()
    assert build_random(4, 3, 1).edges == frozenset(itertools.combinations(range(4), 2))
    with pytest.raises(InvalidArgument):
        build_random(5, 5, 0)


def test_hop_distance_examples():
    assert hop_distance(build_ring(6), 0, 3) == 3
    assert hop_distance(build_grid(3, 3), 0, 8) == 4
    t = build_clique_ring(4, 3)
    assert all(hop_distance(t, a, a) == 0 for a in range(12))
    with pytest.raises(InvalidArgument):
        hop_distance(t, 0, 12)


@pytest.mark.parametrize("t", small_topologies(), ids=lambda t: f"{t.kind}{t.shape}")
def test_bfs_matches_floyd_warshall(t):
    assert t.is_connected()
    assert np.array_equal(t.hops, floyd_warshall(t))
    h = t.hops
    assert np.array_equal(h, h.T)
    n = t.node_count
    # triangle inequality h[a, c] <= h[a, b] + h[b, c]
    for a in range(n):
        assert np.all(h[a][:, None] <= h[a][None, :] + h)


@pytest.mark.parametrize("t", small_topologies(), ids=lambda t: f"{t.kind}{t.shape}")
def test_metropolis_doubly_stochastic(t):
    w = metropolis_weights(t)
    assert np.all(w >= 0)
    assert np.allclose(w, w.T, atol=0)
    assert np.max(np.abs(w.sum(axis=1) - 1)) < 1e-12
    assert np.max(np.abs(w.sum(axis=0) - 1)) < 1e-12
    off = (w > 0) & ~np.eye(t.node_count, dtype=bool)
    assert {tuple(sorted(e)) for e in zip(*np.nonzero(off))} == set(t.edges)


def test_metropolis_examples():
    w = metropolis_weights(build_ring(4))
    assert np.allclose(w[w > 0], 1 / 3)
    assert np.allclose(np.diag(w), 1 / 3)
    path = build_grid(1, 3)
    assert metropolis_weights(path)[0, 1] == pytest.approx(1 / 3)


def test_edge_list_roundtrip():
    t = build_clique_ring(3, 3)
    text = t.to_edge_list()
    assert text.splitlines()[0] == "9"
    back = parse_edge_list(text, "clique_ring")
    assert back.edges == t.edges
    assert back.content_hash() == t.content_hash()


def test_build_topology_strings():
    assert build_topology("ring:16").node_count == 16
    assert build_topology("grid:4x4").node_count == 16
    assert build_topology("clique_ring:4x4").node_count == 16
    assert build_topology("random:12:3:2").is_connected()
    with pytest.raises(InvalidArgument):
        build_topology("torus:4")


@settings(max_examples=30, deadline=None)
@given(n=st.integers(5, 20), d=st.integers(2, 4), seed=st.integers(0, 10_000))
def test_random_graphs_connected_and_deterministic(n, d, seed):
    d = min(d, n - 1)
    a = build_random(n, d, seed)
    assert a.is_connected()
    assert a.edges == build_random(n, d, seed).edges
    assert np.array_equal(a.hops, floyd_warshall(a))
