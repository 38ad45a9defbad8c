"""Bipartite CT-to-dose voxel graph.

A CT node and a dose node are joined when their voxel centers are within
``threshold`` millimetres (inclusive). Dose nodes with no neighbor in range
get a single fallback edge to their nearest CT node, so every dose node
receives at least one message.
"""

from __future__ import annotations

import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dosegnn.volume import GeometryError, VoxelGrid

# cells are padded by this relative amount so that float rounding in the
# cell assignment can never split an in-range pair across non-adjacent cells
_CELL_PAD = 1e-9


@dataclass(frozen=True)
class GraphConfig:
    threshold: float = 5.0
    ct_margin: float | None = None

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if self.ct_margin is None:
            object.__setattr__(self, "ct_margin", float(self.threshold))
        if self.ct_margin < self.threshold:
            raise ValueError("ct_margin must be >= threshold")


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    ct_flat: np.ndarray      # CT flat index of each CT node
    ct_points: np.ndarray    # (n_ct, 3) world mm
    dose_flat: np.ndarray
    dose_points: np.ndarray
    offsets: np.ndarray      # CSR row pointers, length n_dose + 1
    indices: np.ndarray      # CT node ordinals
    fallback: np.ndarray     # per dose node
    threshold: float

    @property
    def n_ct(self) -> int:
        return len(self.ct_flat)

    @property
    def n_dose(self) -> int:
        return len(self.dose_flat)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.offsets[v]:self.offsets[v + 1]]

    def edges(self) -> set[tuple[int, int]]:
        """Edge set as ``(dose ordinal, ct ordinal)`` pairs."""
        rows = np.repeat(np.arange(self.n_dose), self.degrees)
        return set(zip(rows.tolist(), self.indices.tolist()))

    def summary(self) -> dict:
        return {
            "n_ct_nodes": self.n_ct,
            "n_dose_nodes": self.n_dose,
            "n_edges": int(len(self.indices)),
            "n_fallback": int(self.fallback.sum()),
            "threshold": self.threshold,
            "degree_histogram": {str(k): v for k, v in degree_histogram(self).items()},
        }


def select_ct_nodes(ct: VoxelGrid, dose: VoxelGrid, cfg: GraphConfig) -> np.ndarray:
    """Flat indices (ascending) of CT voxels whose centers fall inside the dose
    bounding box dilated by ``cfg.ct_margin``."""
    lo, hi = dose.bounds()
    lo = lo - cfg.ct_margin
    hi = hi + cfg.ct_margin
    origin = np.asarray(ct.origin)
    spacing = np.asarray(ct.spacing)
    ranges = []
    for a in range(3):
        coords = origin[a] + np.arange(ct.dims[a]) * spacing[a]
        inside = np.flatnonzero((coords >= lo[a]) & (coords <= hi[a]))
        if inside.size == 0:
            raise GeometryError(
                f"no CT voxels near the dose grid on axis {'xyz'[a]}: geometry mismatch too severe"
            )
        ranges.append(inside)
    ix, iy, iz = np.meshgrid(*ranges, indexing="ij")
    idx = np.stack([ix.ravel("F"), iy.ravel("F"), iz.ravel("F")], axis=1)
    return np.sort(ct.flatten_index(idx))


def _hash_edges(ct_pts: np.ndarray, dose_pts: np.ndarray, threshold: float, threads: int = 1):
    """All (dose, ct) ordinal pairs within threshold, via a uniform cell hash."""
    cell = threshold * (1.0 + _CELL_PAD)
    base = ct_pts.min(axis=0)
    ct_cells = np.floor((ct_pts - base) / cell).astype(np.int64)
    ncell = ct_cells.max(axis=0) + 1
    keys = ct_cells[:, 0] + ncell[0] * (ct_cells[:, 1] + ncell[1] * ct_cells[:, 2])
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    dose_cells = np.floor((dose_pts - base) / cell).astype(np.int64)
    t2 = threshold * threshold

    def scan(offset):
        q = dose_cells + offset
        ok = np.all((q >= 0) & (q < ncell), axis=1)
        rows = np.flatnonzero(ok)
        qk = q[rows, 0] + ncell[0] * (q[rows, 1] + ncell[1] * q[rows, 2])
        start = np.searchsorted(sorted_keys, qk, "left")
        stop = np.searchsorted(sorted_keys, qk, "right")
        counts = stop - start
        total = int(counts.sum())
        if total == 0:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        dose_ord = np.repeat(rows, counts)
        pos = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts) + np.repeat(start, counts)
        ct_ord = order[pos]
        diff = dose_pts[dose_ord] - ct_pts[ct_ord]
        keep = np.sum(diff * diff, axis=1) <= t2
        return dose_ord[keep], ct_ord[keep]

    offsets = [np.array([dx, dy, dz]) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(scan, offsets))
    else:
        parts = [scan(o) for o in offsets]
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    return rows, cols


def _nearest_ct(ct_pts: np.ndarray, query: np.ndarray) -> np.ndarray:
    # CT ordinals ascend with flat index and argmin keeps the first minimum,
    # which is exactly the smaller-flat-index tie rule
    out = np.empty(len(query), dtype=np.int64)
    chunk = max(1, 4_000_000 // max(1, len(ct_pts)))
    for s in range(0, len(query), chunk):
        diff = query[s:s + chunk, None, :] - ct_pts[None, :, :]
        out[s:s + chunk] = np.argmin(np.sum(diff * diff, axis=-1), axis=1)
    return out


def build_graph(ct: VoxelGrid, dose: VoxelGrid, cfg: GraphConfig | None = None,
                threads: int = 1) -> BipartiteGraph:
    cfg = cfg or GraphConfig()
    ct_flat = select_ct_nodes(ct, dose, cfg)
    ct_pts = ct.index_to_world(ct.unflatten_index(ct_flat))
    dose_flat = np.arange(dose.size)
    dose_pts = dose.voxel_centers()

    rows, cols = _hash_edges(ct_pts, dose_pts, cfg.threshold, threads)
    degree = np.bincount(rows, minlength=dose.size)
    isolated = np.flatnonzero(degree == 0)
    fallback = np.zeros(dose.size, dtype=bool)
    if isolated.size:
        nearest = _nearest_ct(ct_pts, dose_pts[isolated])
        rows = np.concatenate([rows, isolated])
        cols = np.concatenate([cols, nearest])
        fallback[isolated] = True
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    offsets = np.zeros(dose.size + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=dose.size), out=offsets[1:])
    return BipartiteGraph(
        ct_flat=ct_flat,
        ct_points=ct_pts,
        dose_flat=dose_flat,
        dose_points=dose_pts,
        offsets=offsets,
        indices=cols.astype(np.int64),
        fallback=fallback,
        threshold=float(cfg.threshold),
    )


def brute_force_edges(ct_nodes, dose_nodes, threshold: float) -> set[tuple[int, int]]:
    """O(n*m) reference edge set over ``(flat index, world point)`` node lists.

    Same inclusive threshold and the same fallback rule as :func:`build_graph`:
    an isolated dose node links to its nearest CT node, ties going to the
    smaller CT flat index. Pairs are ``(dose ordinal, ct ordinal)``.
    """
    ct_nodes = list(ct_nodes)
    dose_nodes = list(dose_nodes)
    if not dose_nodes:
        return set()
    ct_flat = np.array([f for f, _ in ct_nodes], dtype=np.int64)
    ct_pts = np.array([p for _, p in ct_nodes], dtype=float).reshape(-1, 3)
    dose_pts = np.array([p for _, p in dose_nodes], dtype=float).reshape(-1, 3)
    edges = set()
    t2 = threshold * threshold
    for v, p in enumerate(dose_pts):
        diff = p - ct_pts
        d2 = np.sum(diff * diff, axis=1)
        hits = np.flatnonzero(d2 <= t2)
        if hits.size:
            edges.update((v, int(u)) for u in hits)
        else:
            best = min(range(len(ct_pts)), key=lambda u: (d2[u], ct_flat[u]))
            edges.add((v, best))
    return edges


def graph_nodes(g: BipartiteGraph) -> tuple[list, list]:
    """Node lists in the form :func:`brute_force_edges` expects."""
    ct = list(zip(g.ct_flat.tolist(), g.ct_points))
    dose = list(zip(g.dose_flat.tolist(), g.dose_points))
    return ct, dose


def degree_histogram(g: BipartiteGraph) -> dict[int, int]:
    return dict(sorted(Counter(g.degrees.tolist()).items()))


def write_graph_json(g: BipartiteGraph, path: str | Path, config: dict | None = None) -> None:
    doc = g.summary()
    if config is not None:
        doc["config"] = config
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
