"""Seeded graph-cut foreground segmentation.

Pixels become nodes of a flow network. Neighbouring pixels are joined by
n-links whose integer capacity decays with colour distance; foreground seeds
hang off the source and background seeds off the sink through t-links too
heavy to cut. The source side of the minimum cut is the foreground mask.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import List, Set, Tuple

import numpy as np

Coord = Tuple[int, int]


class FlowNetwork:
    """Directed graph with integer capacities stored as paired residual arcs.

    Arc ``e`` and arc ``e ^ 1`` are mutual reverses. ``add_edge(u, v, c)``
    creates ``u->v`` with capacity ``c`` and a zero-capacity partner;
    ``add_edge(u, v, c, rev_cap=c2)`` makes the partner a real ``v->u`` arc.
    """

    def __init__(self, n: int, source: int, sink: int):
        if not (0 <= source < n and 0 <= sink < n) or source == sink:
            raise ValueError(f"need distinct source/sink inside [0, {n}), got {source}, {sink}")
        self.n = n
        self.source = source
        self.sink = sink
        self.adj: List[List[int]] = [[] for _ in range(n)]
        self.head: List[int] = []
        self.cap: List[int] = []
        self.res: List[int] = []
        self.explicit: List[bool] = []

    def _arc(self, u, v, c, explicit):
        self.adj[u].append(len(self.head))
        self.head.append(v)
        self.cap.append(c)
        self.res.append(c)
        self.explicit.append(explicit)

    def add_edge(self, u: int, v: int, cap: int, rev_cap: int = None) -> int:
        for node in (u, v):
            if not 0 <= node < self.n:
                raise ValueError(f"node {node} outside [0, {self.n})")
        for c in (cap, rev_cap or 0):
            if int(c) != c or c < 0:
                raise ValueError(f"capacities must be non-negative integers, got {c}")
        e = len(self.head)
        self._arc(u, v, int(cap), True)
        self._arc(v, u, int(rev_cap or 0), rev_cap is not None)
        return e

    def tail(self, e: int) -> int:
        return self.head[e ^ 1]

    def flow(self, e: int) -> int:
        return max(0, self.cap[e] - self.res[e])

    def edges(self):
        """Explicitly added arcs as ``(from, to, capacity)``."""
        return [(self.head[e ^ 1], self.head[e], self.cap[e])
                for e in range(len(self.head)) if self.explicit[e]]

    def reset(self):
        self.res = list(self.cap)

    def residual_reachable(self, start: int) -> Set[int]:
        seen = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for e in self.adj[u]:
                v = self.head[e]
                if self.res[e] > 0 and v not in seen:
                    seen.add(v)
                    queue.append(v)
        return seen

    def residual_coreachable(self, target: int) -> Set[int]:
        """Nodes with a residual path to ``target``."""
        seen = {target}
        queue = deque([target])
        while queue:
            v = queue.popleft()
            for e in self.adj[v]:
                u = self.head[e]
                if self.res[e ^ 1] > 0 and u not in seen:
                    seen.add(u)
                    queue.append(u)
        return seen

    def cut_capacity(self, source_side) -> int:
        side = set(source_side)
        return sum(c for u, v, c in self.edges() if u in side and v not in side)


def _levels(net: FlowNetwork):
    level = [-1] * net.n
    level[net.source] = 0
    queue = deque([net.source])
    head, res, adj = net.head, net.res, net.adj
    while queue:
        u = queue.popleft()
        for e in adj[u]:
            v = head[e]
            if res[e] > 0 and level[v] < 0:
                level[v] = level[u] + 1
                queue.append(v)
    return level


def _blocking_flow(net: FlowNetwork, level) -> int:
    head, res, adj = net.head, net.res, net.adj
    s, t = net.source, net.sink
    ptr = [0] * net.n
    total = 0
    path: List[int] = []
    u = s
    while True:
        if u == t:
            push = min(res[e] for e in path)
            for e in path:
                res[e] -= push
                res[e ^ 1] += push
            total += push
            path.clear()
            u = s
            continue
        arcs = adj[u]
        i = ptr[u]
        while i < len(arcs):
            e = arcs[i]
            if res[e] > 0 and level[head[e]] == level[u] + 1:
                break
            i += 1
        ptr[u] = i
        if i < len(arcs):
            path.append(arcs[i])
            u = head[arcs[i]]
            continue
        # dead end: retreat and skip the arc that led here
        if u == s:
            return total
        level[u] = -1
        e = path.pop()
        u = head[e ^ 1]
        ptr[u] += 1


def max_flow(net: FlowNetwork) -> Tuple[int, Set[int]]:
    """Dinic's algorithm. Returns the flow value and the source side of a minimum cut.

    The source side is the largest one: every node that cannot reach the sink
    in the final residual graph. Solves ``net`` in place; flows are readable
    afterwards via ``net.flow(e)``.
    """
    net.reset()
    value = 0
    while True:
        level = _levels(net)
        if level[net.sink] < 0:
            break
        value += _blocking_flow(net, level)
    to_sink = net.residual_coreachable(net.sink)
    return value, {v for v in range(net.n) if v not in to_sink}


# --------------------------------------------------------------------------
# Image graph
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SegmenterParams:
    sigma: float = 0.1
    connectivity: int = 4
    radius: float = 0.15
    n_seeds: int = 25
    quant: int = 10_000

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if not 0 < self.radius <= 0.5:
            raise ValueError("radius fraction must lie in (0, 0.5]")
        if self.n_seeds < 1:
            raise ValueError("need at least one foreground seed")
        if int(self.quant) != self.quant or self.quant < 1:
            raise ValueError("quantization scale must be a positive integer")


@dataclass(frozen=True)
class SeedSet:
    foreground: Tuple[Coord, ...]
    background: Tuple[Coord, ...]

    def validate(self, h: int, w: int):
        if not self.foreground or not self.background:
            raise ValueError("both seed lists must be non-empty")
        for r, c in self.foreground + self.background:
            if not (0 <= r < h and 0 <= c < w):
                raise ValueError(f"seed {(r, c)} outside {h}x{w} image")
        if set(self.foreground) & set(self.background):
            raise ValueError("foreground and background seeds overlap")


def border_pixels(h: int, w: int) -> List[Coord]:
    return [(r, c) for r in range(h) for c in range(w) if r in (0, h - 1) or c in (0, w - 1)]


def center_disk(h: int, w: int, radius: float) -> List[Coord]:
    """Interior pixels within ``radius * min(h, w)`` of the image centre, row-major."""
    cr, cc = (h - 1) / 2, (w - 1) / 2
    rad = radius * min(h, w)
    return [(r, c) for r in range(1, h - 1) for c in range(1, w - 1)
            if (r - cr) ** 2 + (c - cc) ** 2 <= rad * rad]


def sample_center_seeds(h: int, w: int, params: SegmenterParams, rng_seed: int) -> SeedSet:
    if h < 3 or w < 3:
        raise ValueError(f"image must be at least 3x3, got {h}x{w}")
    disk = center_disk(h, w, params.radius)
    if len(disk) < params.n_seeds:
        raise ValueError(f"centre disk holds {len(disk)} interior pixels but {params.n_seeds} seeds "
                         f"were requested; need at least {params.n_seeds}")
    rng = np.random.default_rng(rng_seed)
    pick = np.sort(rng.choice(len(disk), params.n_seeds, replace=False))
    return SeedSet(tuple(disk[i] for i in pick), tuple(border_pixels(h, w)))


def _neighbour_offsets(connectivity):
    return [(0, 1), (1, 0)] if connectivity == 4 else [(0, 1), (1, 0), (1, 1), (1, -1)]


def nlink_capacity(sq_dist, params: SegmenterParams):
    return np.rint(params.quant * np.exp(-np.asarray(sq_dist) / (2 * params.sigma ** 2))).astype(np.int64)


def neighbour_links(image: np.ndarray, params: SegmenterParams):
    """All n-link pairs ``(p, q, capacity)`` with pixel ids in row-major order."""
    img = np.asarray(image, np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, _ = img.shape
    ids = np.arange(h * w).reshape(h, w)
    links = []
    for dr, dc in _neighbour_offsets(params.connectivity):
        r0, r1 = 0, h - dr
        c0, c1 = max(0, -dc), w - max(0, dc)
        a = img[r0:r1, c0:c1]
        b = img[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        caps = nlink_capacity(((a - b) ** 2).sum(axis=-1), params)
        p = ids[r0:r1, c0:c1].ravel()
        q = ids[r0 + dr:r1 + dr, c0 + dc:c1 + dc].ravel()
        links.extend(zip(p.tolist(), q.tolist(), caps.ravel().tolist()))
    return links


def build_graph(image: np.ndarray, seeds: SeedSet, params: SegmenterParams) -> FlowNetwork:
    """Pixel network: nodes 0..h*w-1 row-major, then source, then sink."""
    h, w = image.shape[:2]
    seeds.validate(h, w)
    npix = h * w
    net = FlowNetwork(npix + 2, npix, npix + 1)
    links = neighbour_links(image, params)
    for p, q, c in links:
        net.add_edge(p, q, c, rev_cap=c)
    max_link = max((c for _, _, c in links), default=0)
    hard = params.quant * npix * max(max_link, 1)
    # never below the total n-link mass, so hard seeds cannot be cut even for tiny quant
    hard = max(hard, 2 * sum(c for _, _, c in links) + 1)
    for r, c in seeds.foreground:
        net.add_edge(net.source, r * w + c, hard)
    for r, c in seeds.background:
        net.add_edge(r * w + c, net.sink, hard)
    return net


def segment(image: np.ndarray, params: SegmenterParams = SegmenterParams(), rng_seed: int = 0,
            seeds: SeedSet = None) -> np.ndarray:
    """Foreground mask (bool, h x w): pixels on the source side of the min cut."""
    h, w = image.shape[:2]
    if seeds is None:
        seeds = sample_center_seeds(h, w, params, rng_seed)
    net = build_graph(image, seeds, params)
    _, side = max_flow(net)
    mask = np.zeros(h * w, bool)
    mask[[v for v in side if v < h * w]] = True
    return mask.reshape(h, w)
