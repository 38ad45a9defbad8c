"""Axis-aligned voxel grids, structure masks and plan bundles.

Voxel coordinates always refer to voxel *centers*. Flat arrays are stored
x-fastest: ``flat = x + nx * (y + ny * z)``, which is numpy Fortran order for
an array indexed ``[x, y, z]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Invalid grid geometry or index."""


def _vec3(v, dtype=float) -> tuple:
    t = tuple(dtype(c) for c in v)
    if len(t) != 3:
        raise GeometryError(f"expected a 3-vector, got {v!r}")
    return t


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Scalar field on a regular grid.

    ``values`` may be ``None`` for a geometry-only grid (resampling targets,
    inference bundles without a ground-truth dose).
    """

    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]
    dims: tuple[int, int, int]
    values: np.ndarray | None = None
    unit: str = ""

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec3(self.origin))
        object.__setattr__(self, "spacing", _vec3(self.spacing))
        object.__setattr__(self, "dims", _vec3(self.dims, int))
        if any(s <= 0 for s in self.spacing):
            raise GeometryError(f"spacing must be positive, got {self.spacing}")
        if any(n < 1 for n in self.dims):
            raise GeometryError(f"dims must be >= 1, got {self.dims}")
        if self.values is not None:
            vals = np.asarray(self.values).reshape(-1)
            if vals.size != self.size:
                raise GeometryError(
                    f"values length {vals.size} does not match dims {self.dims}"
                )
            vals = vals.copy() if vals.flags.writeable else vals
            vals.flags.writeable = False
            object.__setattr__(self, "values", vals)

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def array(self) -> np.ndarray:
        """Values as an ``[x, y, z]`` indexed view."""
        if self.values is None:
            raise GeometryError("geometry-only grid has no values")
        return self.values.reshape(self.dims, order="F")

    def geometry(self) -> VoxelGrid:
        return VoxelGrid(self.origin, self.spacing, self.dims, None, self.unit)

    def same_geometry(self, other: VoxelGrid) -> bool:
        return (
            self.origin == other.origin
            and self.spacing == other.spacing
            and self.dims == other.dims
        )

    def with_values(self, values: np.ndarray, unit: str | None = None) -> VoxelGrid:
        return VoxelGrid(
            self.origin, self.spacing, self.dims, values, self.unit if unit is None else unit
        )

    def translated(self, shift) -> VoxelGrid:
        origin = tuple(o + s for o, s in zip(self.origin, _vec3(shift)))
        return VoxelGrid(origin, self.spacing, self.dims, self.values, self.unit)

    def flatten_index(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        nx, ny, _ = self.dims
        return idx[..., 0] + nx * (idx[..., 1] + ny * idx[..., 2])

    def unflatten_index(self, flat: np.ndarray) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.int64)
        nx, ny, _ = self.dims
        return np.stack([flat % nx, (flat // nx) % ny, flat // (nx * ny)], axis=-1)

    def index_to_world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        for axis, name in enumerate("xyz"):
            comp = idx[..., axis]
            if np.any(comp < 0) or np.any(comp >= self.dims[axis]):
                raise GeometryError(
                    f"index out of range on axis {name}: dims={self.dims}, idx={idx.tolist()}"
                )
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def world_to_nearest_index(self, p) -> np.ndarray:
        """Nearest voxel center, clamped into the grid; ties round away from zero."""
        rel = (np.asarray(p, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)
        idx = round_half_away(rel).astype(np.int64)
        return np.clip(idx, 0, np.asarray(self.dims) - 1)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel center, shape ``(size, 3)``, flat order."""
        return self.index_to_world(self.unflatten_index(np.arange(self.size)))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World bounding box of the voxel centers."""
        lo = np.asarray(self.origin)
        return lo, lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)


@dataclass(frozen=True, eq=False)
class StructureMask:
    name: str
    grid: str  # "ct" or "dose"
    values: np.ndarray

    def __post_init__(self):
        if self.grid not in ("ct", "dose"):
            raise GeometryError(f"mask grid must be 'ct' or 'dose', got {self.grid!r}")
        vals = np.asarray(self.values, dtype=bool).reshape(-1).copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)


def mask_centroid(mask: StructureMask, grid: VoxelGrid) -> np.ndarray:
    if mask.values.size != grid.size:
        raise GeometryError(
            f"mask {mask.name!r} has {mask.values.size} voxels, grid has {grid.size}"
        )
    flat = np.flatnonzero(mask.values)
    if flat.size == 0:
        raise GeometryError(f"mask {mask.name!r} is empty")
    return grid.index_to_world(grid.unflatten_index(flat)).mean(axis=0)


@dataclass(frozen=True, eq=False)
class PlanBundle:
    ct: VoxelGrid
    dose: VoxelGrid  # values is None for inference-only bundles
    structures: list[StructureMask]
    prescription_dose: float
    name: str = ""
    ptv_center: np.ndarray = field(default=None)

    def __post_init__(self):
        ptvs = [s for s in self.structures if s.name == "PTV"]
        if len(ptvs) != 1:
            raise GeometryError(f"expected exactly one PTV structure, found {len(ptvs)}")
        for s in self.structures:
            grid = self.ct if s.grid == "ct" else self.dose
            if s.values.size != grid.size:
                raise GeometryError(f"mask {s.name!r} does not match the {s.grid} grid")
        if self.ptv_center is None:
            object.__setattr__(self, "ptv_center", mask_centroid(ptvs[0], self.grid_of(ptvs[0])))
        object.__setattr__(self, "ptv_center", np.asarray(self.ptv_center, dtype=float))

    def grid_of(self, mask: StructureMask) -> VoxelGrid:
        return self.ct if mask.grid == "ct" else self.dose

    @property
    def ptv(self) -> StructureMask:
        return self.structure("PTV")

    def structure(self, name: str) -> StructureMask:
        for s in self.structures:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def has_dose(self) -> bool:
        return self.dose.values is not None


def transfer_mask(mask: StructureMask, src: VoxelGrid, dst: VoxelGrid) -> StructureMask:
    """Move a mask onto another grid by nearest-voxel lookup."""
    if mask.values.size != src.size:
        raise GeometryError(f"mask {mask.name!r} does not match source grid")
    idx = src.world_to_nearest_index(dst.voxel_centers())
    grid = "dose" if mask.grid == "ct" else "ct"
    return StructureMask(mask.name, grid, mask.values[src.flatten_index(idx)])


def _sq_dist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points - centers
    return np.sum(diff * diff, axis=-1)


def knn_on_grid(grid: VoxelGrid, points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest voxel centers of ``grid`` for each query point.

    Returns ``(flat_indices, squared_distances)``, each ``(n_points, k)``, ordered
    by distance with ties broken by the smaller flat index. Uses a two-pass
    window search on the regular lattice: a 3x3x3 window around the nearest
    voxel bounds the k-th distance, then every voxel inside that radius is
    enumerated.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if k < 1:
        raise ValueError("k must be >= 1")
    if grid.size < k:
        raise GeometryError(f"grid has {grid.size} voxels, fewer than k={k}")
    n = points.shape[0]
    if n == 0:
        return np.zeros((0, k), np.int64), np.zeros((0, k))
    dims = np.asarray(grid.dims)
    origin = np.asarray(grid.origin)
    spacing = np.asarray(grid.spacing)

    # pass 1: window anchored inside the grid, large enough to hold k voxels
    half = 1
    while np.prod(np.minimum(2 * half + 1, dims)) < k:
        half += 1
    width = np.minimum(2 * half + 1, dims)
    near = grid.world_to_nearest_index(points)
    start = np.clip(near - half, 0, dims - width)
    offs = np.stack(
        np.meshgrid(*[np.arange(w) for w in width], indexing="ij"), axis=-1
    ).reshape(-1, 3)
    cand = start[:, None, :] + offs[None, :, :]
    d2 = _sq_dist(points[:, None, :], origin + cand * spacing)
    bound = np.sqrt(np.partition(d2, k - 1, axis=1)[:, k - 1])

    # pass 2: all voxels within the bound
    lo = np.floor((points - bound[:, None] - origin) / spacing).astype(np.int64) - 1
    hi = np.ceil((points + bound[:, None] - origin) / spacing).astype(np.int64) + 1
    lo = np.clip(lo, 0, dims - 1)
    hi = np.clip(hi, 0, dims - 1)
    span = (hi - lo).max(axis=0) + 1
    out_idx = np.empty((n, k), np.int64)
    out_d2 = np.empty((n, k))
    offs = np.stack(
        np.meshgrid(*[np.arange(w) for w in span], indexing="ij"), axis=-1
    ).reshape(-1, 3)
    chunk = max(1, 2_000_000 // len(offs))
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        cand = lo[sl, None, :] + offs[None, :, :]
        valid = np.all(cand <= hi[sl, None, :], axis=-1)
        d2 = _sq_dist(points[sl, None, :], origin + cand * spacing)
        d2 = np.where(valid, d2, np.inf)
        flat = grid.flatten_index(np.minimum(cand, dims - 1))
        order = np.lexsort((flat, d2), axis=-1)[:, :k]
        out_idx[sl] = np.take_along_axis(flat, order, axis=1)
        out_d2[sl] = np.take_along_axis(d2, order, axis=1)
    return out_idx, out_d2
