"""Vertex-weighted LFPP lengths and exact lattice geodesic distances.

A path P = (v_1, ..., v_N) of nearest-neighbour lattice sites has length
sum_i w(v_i) with w(v) = eps * exp(xi * h_eps(v)).  Distances are computed
by a multi-source Dijkstra on the implicit grid graph where entering vertex
v costs w(v) and a source s starts at w(s).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from .errors import (
    DisconnectedError,
    InvalidQueryError,
    MalformedPathError,
    OracleSizeLimitError,
    ParameterOrderError,
)
from .field import FieldSample, FieldSpec

Site = tuple[int, ...]

BRUTE_FORCE_MAX_SITES = 20


@dataclass(frozen=True, eq=False)
class VertexWeights:
    """Positive weights on a lattice box.

    ``h`` keeps the field the weights were built from (None for explicit
    weight arrays).
    """

    w: np.ndarray
    xi: float = 0.0
    eps: float = 1.0
    spec: FieldSpec | None = None
    h: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if not (np.all(np.isfinite(w)) and np.all(w > 0)):
            raise ValueError("weights must be strictly positive and finite")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @classmethod
    def from_field(cls, sample: FieldSample, xi: float) -> "VertexWeights":
        if xi < 0:
            raise ValueError("xi must be >= 0")
        eps = sample.spec.eps
        if xi == 0:
            w = np.full(sample.values.shape, eps)
        else:
            w = eps * np.exp(xi * sample.values)
        return cls(w, xi=float(xi), eps=eps, spec=sample.spec, h=sample.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.w.shape

    def scaled(self, c: float) -> "VertexWeights":
        return VertexWeights(self.w * c, xi=self.xi, eps=self.eps, spec=self.spec, h=self.h)


@dataclass(frozen=True, eq=False)
class GridRegion:
    """Subset of a lattice box given by a boolean membership mask."""

    shape: tuple[int, ...]
    mask: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != self.shape:
                raise ValueError("mask shape does not match region shape")
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)

    @classmethod
    def box(cls, d: int, k: int) -> "GridRegion":
        """The full grid {0, ..., 2^k}^d."""
        return cls((2**k + 1,) * d)

    @classmethod
    def from_predicate(cls, shape: Sequence[int], predicate: Callable[[Site], bool]) -> "GridRegion":
        mask = np.zeros(tuple(shape), dtype=bool)
        for site in np.ndindex(*mask.shape):
            mask[site] = bool(predicate(site))
        return cls(tuple(shape), mask)

    @property
    def d(self) -> int:
        return len(self.shape)

    def contains(self, site: Sequence[int]) -> bool:
        if len(site) != len(self.shape):
            return False
        if any(c < 0 or c >= n for c, n in zip(site, self.shape)):
            return False
        return True if self.mask is None else bool(self.mask[tuple(site)])

    def full_mask(self) -> np.ndarray:
        return np.ones(self.shape, dtype=bool) if self.mask is None else self.mask

    def face(self, axis: int, index: int) -> list[Site]:
        """Region sites with coordinate ``axis`` equal to ``index``."""
        slicer = [slice(None)] * self.d
        slicer[axis] = index
        sub = self.full_mask()[tuple(slicer)]
        sites = []
        for rest in zip(*np.nonzero(sub)):
            site = list(int(c) for c in rest)
            site.insert(axis, index)
            sites.append(tuple(site))
        return sites


@dataclass(frozen=True, eq=False)
class DistanceQuery:
    region: GridRegion
    sources: tuple[Site, ...]
    targets: tuple[Site, ...]

    def __post_init__(self):
        sources = tuple(tuple(int(c) for c in s) for s in self.sources)
        targets = tuple(tuple(int(c) for c in t) for t in self.targets)
        if not sources or not targets:
            raise InvalidQueryError("source and target sets must be nonempty")
        for site in sources + targets:
            if not self.region.contains(site):
                raise InvalidQueryError(f"site {site} is not in the region")
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "targets", targets)

    @classmethod
    def crossing(cls, region: GridRegion, axis: int = 0) -> "DistanceQuery":
        """Left face to right face along ``axis``."""
        n = region.shape[axis]
        return cls(region, tuple(region.face(axis, 0)), tuple(region.face(axis, n - 1)))


def check_path(path: Sequence[Sequence[int]], region: GridRegion | None = None) -> list[Site]:
    """Validate a nearest-neighbour lattice path and return it as tuples."""
    sites = [tuple(int(c) for c in p) for p in path]
    if not sites:
        raise MalformedPathError("empty path")
    for a, b in zip(sites, sites[1:]):
        if len(a) != len(b) or sum(abs(x - y) for x, y in zip(a, b)) != 1:
            raise MalformedPathError(f"sites {a} and {b} are not nearest neighbours")
    if region is not None:
        for s in sites:
            if not region.contains(s):
                raise MalformedPathError(f"site {s} lies outside the region")
    return sites


def path_length(path: Sequence[Sequence[int]], weights: VertexWeights) -> float:
    """Sum of vertex weights along the path (pairwise summation)."""
    sites = check_path(path, GridRegion(weights.shape))
    idx = tuple(np.array(sites).T)
    return float(np.sum(weights.w[idx]))


# ---------------------------------------------------------------------------
# Dijkstra on the implicit grid


@numba.njit(cache=True)
def _heap_push(keys, nodes, size, key, node):
    i = size
    keys[i] = key
    nodes[i] = node
    while i > 0:
        parent = (i - 1) >> 1
        pk = keys[parent]
        if pk < key or (pk == key and nodes[parent] < node):
            break
        keys[i] = pk
        nodes[i] = nodes[parent]
        i = parent
    keys[i] = key
    nodes[i] = node
    return size + 1


@numba.njit(cache=True)
def _heap_pop(keys, nodes, size):
    top_key = keys[0]
    top_node = nodes[0]
    size -= 1
    key = keys[size]
    node = nodes[size]
    i = 0
    while True:
        child = 2 * i + 1
        if child >= size:
            break
        right = child + 1
        if right < size and (keys[right] < keys[child] or (keys[right] == keys[child] and nodes[right] < nodes[child])):
            child = right
        ck = keys[child]
        if ck > key or (ck == key and nodes[child] > node):
            break
        keys[i] = ck
        nodes[i] = nodes[child]
        i = child
    if size > 0:
        keys[i] = key
        nodes[i] = node
    return top_key, top_node, size


@numba.njit(cache=True)
def _dijkstra(w, shape, inside, source_idx, is_target):
    """Lazy-deletion binary-heap Dijkstra with vertex costs.

    Returns (distance, reached target or -1, predecessor array).  Among
    equally short predecessors the smallest flat index is kept.
    """
    n = w.size
    d = shape.size
    strides = np.empty(d, dtype=np.int64)
    acc = 1
    for a in range(d - 1, -1, -1):
        strides[a] = acc
        acc *= shape[a]
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=np.bool_)
    cap = max(1024, 4 * source_idx.size)
    keys = np.empty(cap, dtype=np.float64)
    nodes = np.empty(cap, dtype=np.int64)
    size = 0
    for s in source_idx:
        if w[s] < dist[s]:
            dist[s] = w[s]
            if size == cap:
                cap *= 2
                keys = np.concatenate((keys, np.empty(cap - keys.size)))
                nodes = np.concatenate((nodes, np.empty(cap - nodes.size, dtype=np.int64)))
            size = _heap_push(keys, nodes, size, w[s], s)
    while size > 0:
        du, u, size = _heap_pop(keys, nodes, size)
        if done[u] or du > dist[u]:
            continue
        done[u] = True
        if is_target[u]:
            return du, u, pred
        for a in range(d):
            c = (u // strides[a]) % shape[a]
            for step in (-1, 1):
                if (step < 0 and c == 0) or (step > 0 and c == shape[a] - 1):
                    continue
                v = u + step * strides[a]
                if not inside[v] or done[v]:
                    continue
                nd = du + w[v]
                if nd < dist[v]:
                    dist[v] = nd
                    pred[v] = u
                    if size == cap:
                        cap *= 2
                        keys = np.concatenate((keys, np.empty(cap - keys.size)))
                        nodes = np.concatenate((nodes, np.empty(cap - nodes.size, dtype=np.int64)))
                    size = _heap_push(keys, nodes, size, nd, v)
                elif nd == dist[v] and u < pred[v]:
                    pred[v] = u
    return np.inf, -1, pred


def _flat(sites: Sequence[Site], shape: tuple[int, ...]) -> np.ndarray:
    return np.ravel_multi_index(tuple(np.array(sites, dtype=np.int64).T), shape).astype(np.int64)


def set_to_set_distance(query: DistanceQuery, weights: VertexWeights) -> tuple[float, list[Site]]:
    """Exact minimum path length from any source to any target inside the region.

    Returns the distance and one minimizing path (source first).
    """
    region = query.region
    if weights.shape != region.shape:
        raise InvalidQueryError(f"weights shape {weights.shape} does not cover region {region.shape}")
    shape = np.array(region.shape, dtype=np.int64)
    inside = np.ascontiguousarray(region.full_mask().ravel())
    is_target = np.zeros(inside.size, dtype=np.bool_)
    is_target[_flat(query.targets, region.shape)] = True
    sources = np.unique(_flat(query.sources, region.shape))
    w = np.ascontiguousarray(weights.w.ravel())
    dist, reached, pred = _dijkstra(w, shape, inside, sources, is_target)
    if reached < 0:
        raise DisconnectedError("no path from sources to targets inside the region")
    chain = [int(reached)]
    while pred[chain[-1]] >= 0:
        chain.append(int(pred[chain[-1]]))
    chain.reverse()
    path = [tuple(int(c) for c in np.unravel_index(i, region.shape)) for i in chain]
    return float(dist), path


def point_to_point_distance(x: Sequence[int], y: Sequence[int], region: GridRegion, weights: VertexWeights) -> float:
    return set_to_set_distance(DistanceQuery(region, (tuple(x),), (tuple(y),)), weights)[0]


def crossing_distance(weights: VertexWeights, axis: int = 0) -> tuple[float, list[Site]]:
    """Left-right crossing distance of the full box, paths confined to the box."""
    return set_to_set_distance(DistanceQuery.crossing(GridRegion(weights.shape), axis), weights)


def brute_force_distance(query: DistanceQuery, weights: VertexWeights) -> float:
    """Minimum length over every simple source-to-target path (small regions only)."""
    region = query.region
    mask = region.full_mask()
    if int(mask.sum()) > BRUTE_FORCE_MAX_SITES:
        raise OracleSizeLimitError(f"region has {int(mask.sum())} sites; oracle limit is {BRUTE_FORCE_MAX_SITES}")
    w = weights.w
    targets = set(query.targets)
    best = math.inf
    offsets = []
    for a in range(region.d):
        for step in (-1, 1):
            off = [0] * region.d
            off[a] = step
            offsets.append(tuple(off))

    def extend(site, length, visited):
        nonlocal best
        if site in targets:
            best = min(best, length)
            return
        for off in offsets:
            nxt = tuple(c + o for c, o in zip(site, off))
            if nxt not in visited and region.contains(nxt):
                visited.add(nxt)
                extend(nxt, length + w[nxt], visited)
                visited.remove(nxt)

    for s in set(query.sources):
        extend(s, w[s], {s})
    if best == math.inf:
        raise DisconnectedError("no path from sources to targets inside the region")
    return float(best)


def two_parameter_length_comparison(
    path: Sequence[Sequence[int]],
    weights_xi: VertexWeights,
    weights_xitilde: VertexWeights,
    alpha: float,
) -> tuple[float, float]:
    """Split the xi-tilde length of ``path`` at the threshold alpha * log(eps).

    Returns (A1, A2): the xi-tilde partial lengths over sites with
    h < alpha log eps and over the remaining sites.  A1 + A2 equals
    ``path_length(path, weights_xitilde)``.
    """
    if weights_xitilde.xi > weights_xi.xi:
        raise ParameterOrderError(f"xi_tilde={weights_xitilde.xi} exceeds xi={weights_xi.xi}")
    h = weights_xitilde.h
    if h is None or weights_xi.h is None or not (h is weights_xi.h or np.array_equal(h, weights_xi.h)):
        raise ValueError("both weights must come from the same field sample")
    sites = check_path(path, GridRegion(weights_xitilde.shape))
    idx = tuple(np.array(sites).T)
    low = h[idx] < alpha * math.log(weights_xitilde.eps)
    along = weights_xitilde.w[idx]
    return float(np.sum(along[low])), float(np.sum(along[~low]))


def split_threshold(xi: float, lam: float, d: int) -> float:
    """Threshold -xi + sqrt(xi^2 + 2 lam + 2 (d - 1)) balancing the two parts of the split."""
    return -xi + math.sqrt(xi * xi + 2 * lam + 2 * (d - 1))
