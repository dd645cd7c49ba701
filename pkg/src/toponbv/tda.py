"""Vietoris-Rips complexes and Betti numbers over Z/2.

Two computation paths, both on top of a KD-tree neighbor search:

* ``build_vr_complex`` / ``betti0`` / ``betti1`` materialize one complex at one
  radius and reduce its triangle-boundary matrix column by column in
  lexicographic order.
* ``filtration_profile`` builds the complex once at the largest radius and
  reads every smaller radius off a single filtration-ordered reduction
  (coboundary matrix with clearing), so K_r1 is a subcomplex of K_r2 by
  construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud

DEFAULT_RADII = (0.002, 0.003, 0.004)


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


@dataclass(frozen=True)
class VRComplex:
    radius: float
    vertex_count: int
    edges: np.ndarray       # (E, 2) int64, i < j, lexicographic
    triangles: np.ndarray   # (T, 3) int64, i < j < k, lexicographic


@dataclass(frozen=True)
class FiltrationProfile:
    radii: tuple
    betti0: tuple
    betti1: tuple

    def __post_init__(self):
        if not (len(self.radii) == len(self.betti0) == len(self.betti1)):
            raise ValueError("profile columns must have equal length")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise ValueError("radii must be strictly increasing")

    def __iter__(self):
        return iter(zip(self.radii, self.betti0, self.betti1))

    def to_dict(self) -> dict:
        return {"radii": list(self.radii), "betti0": list(self.betti0), "betti1": list(self.betti1)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "FiltrationProfile":
        return cls(tuple(float(r) for r in d["radii"]),
                   tuple(int(b) for b in d["betti0"]),
                   tuple(int(b) for b in d["betti1"]))

    @classmethod
    def from_json(cls, text: str) -> "FiltrationProfile":
        return cls.from_dict(json.loads(text))


# ------------------------------------------------------------- neighbor search

def neighbor_pairs(points: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
    """All pairs ``i < j`` with squared distance <= r**2, lexicographically sorted.

    Returns ``(edges, squared_lengths)``.
    """
    n = len(points)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    tree = cKDTree(points)
    # pad the tree query, then apply the exact inclusive squared-distance test
    pairs = tree.query_pairs(r * (1.0 + 1e-9) + 1e-15, output_type="ndarray").astype(np.int64)
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    pairs.sort(axis=1)
    diff = points[pairs[:, 0]] - points[pairs[:, 1]]
    sq = (diff * diff).sum(axis=1)
    keep = sq <= r * r
    pairs, sq = pairs[keep], sq[keep]
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order], sq[order]


# ------------------------------------------------------------------ kernels

@numba.njit(cache=True)
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@numba.njit(cache=True)
def _component_count(n, edges):
    parent = np.arange(n)
    count = n
    for e in range(edges.shape[0]):
        a = _find(parent, edges[e, 0])
        b = _find(parent, edges[e, 1])
        if a != b:
            if a < b:
                parent[b] = a
            else:
                parent[a] = b
            count -= 1
    return count


@numba.njit(cache=True)
def _enumerate_triangles(indptr, indices):
    """Triangles of the clique complex of a graph given as forward CSR (j > i, sorted).

    Returns (triangles, edge ids) in lexicographic order; edge ids index the
    lexicographically ordered edge list underlying the CSR.
    """
    n = indptr.shape[0] - 1
    count = 0
    for i in range(n):
        for a in range(indptr[i], indptr[i + 1]):
            j = indices[a]
            p = a + 1
            q = indptr[j]
            while p < indptr[i + 1] and q < indptr[j + 1]:
                if indices[p] == indices[q]:
                    count += 1
                    p += 1
                    q += 1
                elif indices[p] < indices[q]:
                    p += 1
                else:
                    q += 1
    tris = np.empty((count, 3), dtype=np.int64)
    tri_edges = np.empty((count, 3), dtype=np.int64)
    t = 0
    for i in range(n):
        for a in range(indptr[i], indptr[i + 1]):
            j = indices[a]
            p = a + 1
            q = indptr[j]
            while p < indptr[i + 1] and q < indptr[j + 1]:
                if indices[p] == indices[q]:
                    tris[t, 0] = i
                    tris[t, 1] = j
                    tris[t, 2] = indices[p]
                    tri_edges[t, 0] = a   # (i, j)
                    tri_edges[t, 1] = p   # (i, k)
                    tri_edges[t, 2] = q   # (j, k)
                    t += 1
                    p += 1
                    q += 1
                elif indices[p] < indices[q]:
                    p += 1
                else:
                    q += 1
    return tris, tri_edges


@numba.njit(cache=True)
def _xor_sorted(a, b):
    out = np.empty(a.shape[0] + b.shape[0], dtype=np.int64)
    i = 0
    j = 0
    k = 0
    while i < a.shape[0] and j < b.shape[0]:
        if a[i] == b[j]:
            i += 1
            j += 1
        elif a[i] < b[j]:
            out[k] = a[i]
            i += 1
            k += 1
        else:
            out[k] = b[j]
            j += 1
            k += 1
    while i < a.shape[0]:
        out[k] = a[i]
        i += 1
        k += 1
    while j < b.shape[0]:
        out[k] = b[j]
        j += 1
        k += 1
    return out[:k]


@numba.njit(cache=True)
def _reduce_columns(col_ptr, col_rows, n_rows):
    """Standard Z/2 column reduction, pivot = largest row index.

    Columns are processed in storage order; each column's rows must be sorted
    ascending.  Returns the pivot row of every reduced column (-1 if it
    reduced to zero).
    """
    n_cols = col_ptr.shape[0] - 1
    owner = np.full(n_rows, -1, dtype=np.int64)
    pivots = np.full(n_cols, -1, dtype=np.int64)
    # reduced columns are stored only when they become pivots
    store_ptr = np.zeros(n_cols + 1, dtype=np.int64)
    store = np.empty(max(16, col_rows.shape[0]), dtype=np.int64)
    used = 0
    for c in range(n_cols):
        col = col_rows[col_ptr[c]:col_ptr[c + 1]].copy()
        while col.shape[0] > 0:
            low = col[col.shape[0] - 1]
            o = owner[low]
            if o < 0:
                break
            col = _xor_sorted(col, store[store_ptr[o]:store_ptr[o + 1]])
        if col.shape[0] > 0:
            low = col[col.shape[0] - 1]
            owner[low] = c
            pivots[c] = low
            if used + col.shape[0] > store.shape[0]:
                grown = np.empty(max(2 * store.shape[0], used + col.shape[0]), dtype=np.int64)
                grown[:used] = store[:used]
                store = grown
            store[used:used + col.shape[0]] = col
            used += col.shape[0]
        store_ptr[c + 1] = used
    return pivots


@numba.njit(cache=True)
def _filtered_csr(points, pairs, top):
    """Forward CSR (rows sorted) of the pairs within squared radius ``top``.

    Also returns each kept edge's squared length, aligned with ``indices``.
    """
    n = points.shape[0]
    m = pairs.shape[0]
    sq = np.empty(m)
    deg = np.zeros(n + 1, dtype=np.int64)
    for e in range(m):
        i = pairs[e, 0]
        j = pairs[e, 1]
        d = 0.0
        for c in range(3):
            diff = points[i, c] - points[j, c]
            d += diff * diff
        sq[e] = d
        if d <= top:
            deg[min(i, j) + 1] += 1
    for i in range(n):
        deg[i + 1] += deg[i]
    indptr = deg
    fill = indptr[:-1].copy()
    # pack (neighbor, pair id) so sorting a row keeps the id attached
    packed = np.empty(indptr[n], dtype=np.int64)
    for e in range(m):
        if sq[e] <= top:
            i = min(pairs[e, 0], pairs[e, 1])
            j = max(pairs[e, 0], pairs[e, 1])
            packed[fill[i]] = j * m + e
            fill[i] += 1
    esq = np.empty(indptr[n])
    for i in range(n):
        packed[indptr[i]:indptr[i + 1]].sort()
    for a in range(indptr[n]):
        esq[a] = sq[packed[a] % m]
    return indptr, packed // m, esq


@numba.njit(cache=True)
def _symmetric_adjacency(n, indptr, indices):
    """Sorted full neighbor lists, each neighbor paired with its edge id."""
    deg = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        for a in range(indptr[i], indptr[i + 1]):
            deg[i + 1] += 1
            deg[indices[a] + 1] += 1
    for i in range(n):
        deg[i + 1] += deg[i]
    ptr = deg
    nbr = np.empty(ptr[n], dtype=np.int64)
    eid = np.empty(ptr[n], dtype=np.int64)
    fill = ptr[:-1].copy()
    # lower neighbors first (rows visited in increasing order), then upper ones
    for i in range(n):
        for a in range(indptr[i], indptr[i + 1]):
            j = indices[a]
            nbr[fill[j]] = i
            eid[fill[j]] = a
            fill[j] += 1
    for i in range(n):
        for a in range(indptr[i], indptr[i + 1]):
            nbr[fill[i]] = indices[a]
            eid[fill[i]] = a
            fill[i] += 1
    return ptr, nbr, eid


@numba.njit(cache=True)
def _coboundary(i, j, re, ptr, nbr, eid, rank, n):
    """Cofaces of edge (i, j) as sorted triangle keys.

    A triangle's key is ``latest_edge_rank * n + opposite_vertex``: triangles
    enter the filtration with their latest edge, ties broken by the vertex
    opposite that edge.
    """
    out = np.empty(min(ptr[i + 1] - ptr[i], ptr[j + 1] - ptr[j]), dtype=np.int64)
    k = 0
    p = ptr[i]
    q = ptr[j]
    while p < ptr[i + 1] and q < ptr[j + 1]:
        if nbr[p] == nbr[q]:
            out[k] = _coface_key(i, j, nbr[p], re, rank[eid[p]], rank[eid[q]], n)
            k += 1
            p += 1
            q += 1
        elif nbr[p] < nbr[q]:
            p += 1
        else:
            q += 1
    out = out[:k]
    out.sort()
    return out


@numba.njit(cache=True)
def _coface_key(i, j, k, re, r1, r2, n):
    if re > r1 and re > r2:
        return re * n + k
    if r1 > r2:
        return r1 * n + j
    return r2 * n + i


@numba.njit(cache=True)
def _earliest_coface(i, j, re, ptr, nbr, eid, rank, n):
    """Smallest coface key of edge (i, j), or -1 if it has no cofaces."""
    best = -1
    p = ptr[i]
    q = ptr[j]
    while p < ptr[i + 1] and q < ptr[j + 1]:
        if nbr[p] == nbr[q]:
            key = _coface_key(i, j, nbr[p], re, rank[eid[p]], rank[eid[q]], n)
            if best < 0 or key < best:
                best = key
            p += 1
            q += 1
        elif nbr[p] < nbr[q]:
            p += 1
        else:
            q += 1
    return best


@numba.njit(cache=True)
def _slot(table, key):
    """Open-addressing slot for ``key`` (its own slot or the first empty one)."""
    mask = table.shape[0] - 1
    h = (key * 2654435761) & mask
    while table[h] != -1 and table[h] != key:
        h = (h + 1) & mask
    return h


@numba.njit(cache=True)
def _profile_counts(n, indptr, indices, esq, sq_radii):
    """Per-radius counts of tree edges, cycle-creating edges and killed cycles.

    Edges are filtered by (length, lex).  Tree edges of the Kruskal pass are
    cleared; every other edge becomes a cohomology column, reduced in reverse
    filtration order with its coboundary generated on demand.  A column whose
    earliest coface is unclaimed is paired without being stored.
    """
    nb = sq_radii.shape[0]
    n_edges = indices.shape[0]
    ebucket = np.empty(n_edges, dtype=np.int64)
    for e in range(n_edges):
        b = 0
        while esq[e] > sq_radii[b]:
            b += 1
        ebucket[e] = b
    src = np.empty(n_edges, dtype=np.int64)
    for i in range(n):
        for a in range(indptr[i], indptr[i + 1]):
            src[a] = i
    edge_order = np.argsort(esq, kind="mergesort")
    rank = np.empty(n_edges, dtype=np.int64)
    for idx in range(n_edges):
        rank[edge_order[idx]] = idx

    parent = np.arange(n)
    is_tree = np.zeros(n_edges, dtype=np.bool_)
    tree_count = np.zeros(nb, dtype=np.int64)
    cycle_count = np.zeros(nb, dtype=np.int64)
    for idx in range(n_edges):
        e = edge_order[idx]
        a = _find(parent, src[e])
        b = _find(parent, indices[e])
        if a != b:
            if a < b:
                parent[b] = a
            else:
                parent[a] = b
            is_tree[e] = True
            tree_count[ebucket[e]] += 1
        else:
            cycle_count[ebucket[e]] += 1

    ptr, nbr, eid = _symmetric_adjacency(n, indptr, indices)
    killed = np.zeros(nb, dtype=np.int64)
    size = 1024
    while size < 2 * n_edges:
        size *= 2
    owner_key = np.full(size, -1, dtype=np.int64)    # pivot key -> owning edge
    owner_val = np.empty(size, dtype=np.int64)
    stored_at = np.full(n_edges, -1, dtype=np.int64)     # -1: recompute from scratch
    stored_len = np.zeros(n_edges, dtype=np.int64)
    store = np.empty(1024, dtype=np.int64)
    used = 0
    for idx in range(n_edges - 1, -1, -1):
        e = edge_order[idx]
        if is_tree[e]:
            continue
        piv = _earliest_coface(src[e], indices[e], idx, ptr, nbr, eid, rank, n)
        if piv < 0:
            continue
        h = _slot(owner_key, piv)
        if owner_key[h] == -1:
            # apparent pair: nothing to reduce, nothing to store
            owner_key[h] = piv
            owner_val[h] = e
            killed[ebucket[edge_order[piv // n]]] += 1
            continue
        col = _coboundary(src[e], indices[e], idx, ptr, nbr, eid, rank, n)
        while col.shape[0] > 0:
            h = _slot(owner_key, col[0])
            if owner_key[h] == -1:
                break
            o = owner_val[h]
            if stored_at[o] >= 0:
                other = store[stored_at[o]:stored_at[o] + stored_len[o]]
            else:
                other = _coboundary(src[o], indices[o], rank[o], ptr, nbr, eid, rank, n)
            col = _xor_sorted(col, other)
        if col.shape[0] > 0:
            owner_key[h] = col[0]
            owner_val[h] = e
            killed[ebucket[edge_order[col[0] // n]]] += 1
            if used + col.shape[0] > store.shape[0]:
                grown = np.empty(max(2 * store.shape[0], used + col.shape[0]), dtype=np.int64)
                grown[:used] = store[:used]
                store = grown
            store[used:used + col.shape[0]] = col
            stored_at[e] = used
            stored_len[e] = col.shape[0]
            used += col.shape[0]
    return tree_count, cycle_count, killed


# --------------------------------------------------------------- public API

def _forward_csr(n: int, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    indptr = np.zeros(n + 1, dtype=np.int64)
    if len(edges):
        np.cumsum(np.bincount(edges[:, 0], minlength=n), out=indptr[1:])
    return indptr, np.ascontiguousarray(edges[:, 1], dtype=np.int64)


def build_vr_complex(cloud, r: float) -> VRComplex:
    """2-skeleton of the Vietoris-Rips complex at radius ``r``."""
    if r <= 0:
        raise ValueError("radius must be positive")
    points = _as_points(cloud)
    edges, _ = neighbor_pairs(points, r)
    indptr, indices = _forward_csr(len(points), edges)
    tris, _ = _enumerate_triangles(indptr, indices)
    return VRComplex(float(r), len(points), edges, tris)


def betti0(cx: VRComplex) -> int:
    """Number of connected components of the 1-skeleton (union-find)."""
    if cx.vertex_count == 0:
        return 0
    return int(_component_count(cx.vertex_count, cx.edges))


def boundary2_rank(cx: VRComplex) -> int:
    """Z/2 rank of the triangle-boundary matrix, lexicographic column order."""
    if len(cx.triangles) == 0:
        return 0
    indptr, indices = _forward_csr(cx.vertex_count, cx.edges)
    _, tri_edges = _enumerate_triangles(indptr, indices)
    rows = np.sort(tri_edges, axis=1).ravel()
    col_ptr = np.arange(0, 3 * len(tri_edges) + 1, 3, dtype=np.int64)
    pivots = _reduce_columns(col_ptr, rows, len(cx.edges))
    return int(np.count_nonzero(pivots >= 0))


def betti1(cx: VRComplex) -> int:
    """beta_1 = E - V + beta_0 - rank(d2)."""
    if cx.vertex_count == 0:
        return 0
    return len(cx.edges) - cx.vertex_count + betti0(cx) - boundary2_rank(cx)


def _check_radii(radii: Sequence[float]) -> tuple:
    radii = tuple(float(r) for r in radii)
    if not radii or radii[0] <= 0 or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be positive and strictly increasing")
    return radii


def filtration_profile(cloud, radii: Sequence[float] = DEFAULT_RADII) -> FiltrationProfile:
    """(beta_0, beta_1) at every radius from one reduction at the largest radius."""
    radii = _check_radii(radii)
    points = _as_points(cloud)
    n = len(points)
    if n == 0:
        zeros = (0,) * len(radii)
        return FiltrationProfile(radii, zeros, zeros)

    sq_radii = np.array(radii) ** 2
    pairs = cKDTree(points).query_pairs(radii[-1] * (1.0 + 1e-9) + 1e-15, output_type="ndarray")
    indptr, indices, esq = _filtered_csr(points, pairs.astype(np.int64).reshape(-1, 2), sq_radii[-1])
    tree, cycles, killed = _profile_counts(n, indptr, indices, esq, sq_radii)
    b0 = [int(v) for v in n - np.cumsum(tree)]
    b1 = [int(v) for v in np.cumsum(cycles) - np.cumsum(killed)]
    return FiltrationProfile(radii, tuple(b0), tuple(b1))


# ------------------------------------------------------- persistent homology

def gf2_rank(vectors) -> int:
    """Rank over Z/2 of vectors given as Python-int bitsets."""
    basis: dict[int, int] = {}
    for v in vectors:
        while v:
            top = v.bit_length() - 1
            b = basis.get(top)
            if b is None:
                basis[top] = v
                break
            v ^= b
    return len(basis)


def persistent_betti(cloud, radii: Sequence[float], l: int, p: int, k: int) -> int:
    """Rank of Z_k(K_l) / (B_k(K_{l+p}) ∩ Z_k(K_l)), by Z/2 elimination.

    Intended as a validation path on small clouds.
    """
    radii = _check_radii(radii)
    if k not in (0, 1):
        raise ValueError("only k in {0, 1} is supported")
    if l < 0 or p < 0 or l + p >= len(radii):
        raise IndexError(f"scale indices out of range: l={l}, p={p}, {len(radii)} radii")
    points = _as_points(cloud)
    n = len(points)
    if n == 0:
        return 0

    big = build_vr_complex(points, radii[l + p])
    edge_id = {tuple(e): i for i, e in enumerate(big.edges.tolist())}
    diff = points[big.edges[:, 0]] - points[big.edges[:, 1]] if len(big.edges) else np.zeros((0, 3))
    in_small = (diff * diff).sum(axis=1) <= radii[l] ** 2

    d1_big = [(1 << int(i)) | (1 << int(j)) for i, j in big.edges]
    if k == 0:
        # every 0-chain is a cycle, so the quotient is C_0 / B_0(K_{l+p})
        return n - gf2_rank(d1_big)

    d1_small = [v for v, keep in zip(d1_big, in_small) if keep]
    z1_small = int(in_small.sum()) - gf2_rank(d1_small)

    d2 = [(1 << edge_id[(i, j)]) | (1 << edge_id[(i, m)]) | (1 << edge_id[(j, m)])
          for i, j, m in big.triangles.tolist()]
    # B(K_{l+p}) ∩ C_1(K_l) is the kernel of projecting boundaries onto edges absent from K_l
    outside = 0
    for e in np.flatnonzero(~in_small):
        outside |= 1 << int(e)
    inter = gf2_rank(d2) - gf2_rank([v & outside for v in d2])
    return z1_small - inter
