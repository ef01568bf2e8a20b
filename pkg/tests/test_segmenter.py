import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from fgmask.segmenter import (FlowNetwork, SeedSet, SegmenterParams, build_graph, center_disk,
                              max_flow, neighbour_links, nlink_capacity, sample_center_seeds, segment)


def brute_force_min_cut(n, s, t, edges):
    """Minimum s-t cut by enumerating every partition of the non-terminal nodes."""
    inner = [v for v in range(n) if v not in (s, t)]
    best = None
    for bits in itertools.product((0, 1), repeat=len(inner)):
        side = {s} | {v for v, b in zip(inner, bits) if b}
        cut = sum(c for u, v, c in edges if u in side and v not in side)
        best = cut if best is None else min(best, cut)
    return best


def random_network(rng, max_inner=8, max_cap=20):
    k = int(rng.integers(0, max_inner + 1))
    n = k + 2
    edges = []
    for u in range(n):
        for v in range(n):
            if u != v and rng.random() < 0.4:
                edges.append((u, v, int(rng.integers(0, max_cap + 1))))
    return n, 0, n - 1, edges


def solve(n, s, t, edges):
    net = FlowNetwork(n, s, t)
    for u, v, c in edges:
        net.add_edge(u, v, c)
    value, side = max_flow(net)
    return net, value, side


# max_flow --------------------------------------------------------------------

def test_single_edge():
    _, value, side = solve(2, 0, 1, [(0, 1, 7)])
    assert value == 7 and side == {0}


def test_no_path():
    # s -> a, b -> t: nothing crosses
    _, value, side = solve(4, 0, 3, [(0, 1, 5), (2, 3, 4)])
    assert value == 0 and side == {0, 1}


def test_four_node_example():
    s, a, b, t = range(4)
    edges = [(s, a, 3), (s, b, 2), (a, b, 1), (a, t, 2), (b, t, 3)]
    assert brute_force_min_cut(4, s, t, edges) == 5
    net, value, side = solve(4, s, t, edges)
    assert value == 5 and side == {s, a, b}
    assert net.cut_capacity(side) == 5


def test_rejects_bad_networks():
    with pytest.raises(ValueError):
        FlowNetwork(3, 1, 1)
    net = FlowNetwork(3, 0, 2)
    with pytest.raises(ValueError):
        net.add_edge(0, 1, -1)
    with pytest.raises(ValueError):
        net.add_edge(0, 3, 1)
    with pytest.raises(ValueError):
        net.add_edge(0, 1, 1.5)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_duality_conservation_capacity(seed):
    n, s, t, edges = random_network(np.random.default_rng(seed))
    net, value, side = solve(n, s, t, edges)
    assert value == brute_force_min_cut(n, s, t, edges)
    assert net.cut_capacity(side) == value
    assert s in side and t not in side
    balance = [0] * n
    for e in range(len(net.head)):
        if net.explicit[e]:
            f = net.flow(e)
            assert 0 <= f <= net.cap[e]
            balance[net.tail(e)] -= f
            balance[net.head[e]] += f
    assert all(balance[v] == 0 for v in range(n) if v not in (s, t))
    assert balance[t] == value == -balance[s]


def test_matches_scipy_on_larger_graphs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = 40
        dense = np.zeros((n, n), np.int32)
        edges = []
        for u in range(n):
            for v in rng.choice(n, 5, replace=False):
                if u != v:
                    c = int(rng.integers(0, 100))
                    edges.append((u, int(v), c))
                    dense[u, v] += c
        _, value, _ = solve(n, 0, n - 1, edges)
        assert value == maximum_flow(csr_matrix(dense), 0, n - 1).flow_value


# seeds -----------------------------------------------------------------------

def test_seeds_3x3():
    p = SegmenterParams(radius=0.2, n_seeds=1)
    seeds = sample_center_seeds(3, 3, p, 0)
    assert seeds.foreground == ((1, 1),)
    assert sorted(seeds.background) == sorted((r, c) for r in range(3) for c in range(3) if (r, c) != (1, 1))
    assert sample_center_seeds(3, 3, p, 0) == seeds


def test_seeds_9x9_membership():
    p = SegmenterParams(radius=0.45, n_seeds=5)
    seeds = sample_center_seeds(9, 9, p, 11)
    disk = {(r, c) for r in range(9) for c in range(9)
            if (r - 4) ** 2 + (c - 4) ** 2 <= (0.45 * 9) ** 2 and 0 < r < 8 and 0 < c < 8}
    assert len(set(seeds.foreground)) == 5
    assert set(seeds.foreground) <= disk
    assert not set(seeds.foreground) & set(seeds.background)
    assert seeds == sample_center_seeds(9, 9, p, 11)


def test_seeds_too_few_pixels():
    with pytest.raises(ValueError, match="need at least 30"):
        sample_center_seeds(9, 9, SegmenterParams(radius=0.2, n_seeds=30), 0)
    with pytest.raises(ValueError):
        sample_center_seeds(2, 5, SegmenterParams(), 0)


def test_params_validation():
    for kwargs in ({"sigma": 0}, {"connectivity": 6}, {"radius": 0.6}, {"n_seeds": 0}, {"quant": 0}):
        with pytest.raises(ValueError):
            SegmenterParams(**kwargs)


# graph -----------------------------------------------------------------------

def test_identical_pair_capacity_is_quant():
    img = np.full((1, 2, 3), 0.4)
    assert neighbour_links(img, SegmenterParams(quant=1000)) == [(0, 1, 1000)]


def test_nlink_at_two_sigma_squared():
    p = SegmenterParams(sigma=0.1, quant=10_000)
    assert int(nlink_capacity(2 * 0.1 ** 2, p)) == round(10_000 * math.exp(-1))


def test_nlink_monotone_in_distance():
    p = SegmenterParams()
    caps = nlink_capacity(np.linspace(0, 3, 200), p)
    assert np.all(np.diff(caps) <= 0)


def test_3x3_uniform_edge_count():
    img = np.full((3, 3, 3), 0.5)
    p = SegmenterParams(quant=1000, radius=0.2, n_seeds=1)
    net = build_graph(img, sample_center_seeds(3, 3, p, 0), p)
    edges = net.edges()
    nlinks = [e for e in edges if e[0] < 9 and e[1] < 9]
    tlinks = [e for e in edges if e[0] >= 9 or e[1] >= 9]
    assert len(nlinks) == 24 and all(c == 1000 for _, _, c in nlinks)
    assert len(tlinks) == 9
    assert sum(1 for u, _, _ in tlinks if u == net.source) == 1


def test_8_connectivity_adds_diagonals():
    img = np.zeros((3, 3, 3))
    assert len(neighbour_links(img, SegmenterParams(connectivity=4))) == 12
    assert len(neighbour_links(img, SegmenterParams(connectivity=8))) == 20


# segment ---------------------------------------------------------------------

def _seeds_3x3():
    return sample_center_seeds(3, 3, SegmenterParams(radius=0.2, n_seeds=1), 0)


def test_segment_red_centre():
    img = np.zeros((3, 3, 3))
    img[:, :, 2] = 1.0
    img[1, 1] = (1.0, 0.0, 0.0)
    p = SegmenterParams(radius=0.2, n_seeds=1)
    mask = segment(img, p, 0)
    expected = np.zeros((3, 3), bool)
    expected[1, 1] = True
    np.testing.assert_array_equal(mask, expected)


def test_segment_uniform_3x3():
    img = np.full((3, 3, 3), 0.3)
    p = SegmenterParams(radius=0.2, n_seeds=1, quant=1000)
    net = build_graph(img, _seeds_3x3(), p)
    value, side = max_flow(net)
    assert value == 4000
    mask = segment(img, p, 0)
    assert mask.sum() == 1 and mask[1, 1]


def _scipy_segment_value(img, seeds, p):
    """Max-flow value of the same pixel graph solved by scipy (int32 capacities)."""
    h, w = img.shape[:2]
    links = neighbour_links(img, p)
    n = h * w + 2
    s, t = h * w, h * w + 1
    big = 2 * sum(c for _, _, c in links) + 1
    dense = np.zeros((n, n), np.int64)
    for a, b, c in links:
        dense[a, b] += c
        dense[b, a] += c
    for r, c in seeds.foreground:
        dense[s, r * w + c] = big
    for r, c in seeds.background:
        dense[r * w + c, t] = big
    return maximum_flow(csr_matrix(dense.astype(np.int32)), s, t).flow_value


def test_segment_8x8_square():
    img = np.zeros((8, 8, 3))
    img[:, :] = (0.1, 0.1, 0.8)
    img[2:6, 2:6] = (0.9, 0.9, 0.1)
    p = SegmenterParams(quant=1000, n_seeds=4)
    seeds = sample_center_seeds(8, 8, p, 0)
    expected = np.zeros((8, 8), bool)
    expected[2:6, 2:6] = True
    net = build_graph(img, seeds, p)
    value, side = max_flow(net)
    side_pixels = {v for v in side if v < 64}
    assert side_pixels == set(np.flatnonzero(expected))
    # the square's boundary cut is optimal according to an independent solver
    assert value == net.cut_capacity(side) == _scipy_segment_value(img, seeds, p)
    np.testing.assert_array_equal(segment(img, p, 0), expected)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_segment_seed_compliance_and_determinism(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((10, 12, 3))
    p = SegmenterParams(sigma=0.3, quant=50, n_seeds=3)
    mask = segment(img, p, seed)
    seeds = sample_center_seeds(10, 12, p, seed)
    assert all(mask[r, c] for r, c in seeds.foreground)
    assert not any(mask[r, c] for r, c in seeds.background)
    np.testing.assert_array_equal(mask, segment(img, p, seed))


def test_grayscale_image_supported():
    img = np.zeros((9, 9))
    img[3:6, 3:6] = 1.0
    mask = segment(img, SegmenterParams(n_seeds=1), 0)
    assert mask.sum() == 9 and mask[3:6, 3:6].all()


def test_seedset_validation():
    with pytest.raises(ValueError, match="overlap"):
        SeedSet(((1, 1),), ((1, 1),)).validate(3, 3)
    with pytest.raises(ValueError, match="outside"):
        SeedSet(((5, 1),), ((0, 0),)).validate(3, 3)
    with pytest.raises(ValueError, match="non-empty"):
        SeedSet((), ((0, 0),)).validate(3, 3)


def test_center_disk_is_interior():
    assert all(0 < r < 31 and 0 < c < 31 for r, c in center_disk(32, 32, 0.5))
