"""Node inputs: CT patches, dose-node geometry features and their sinusoidal encoding."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dosegnn.volume import VoxelGrid

HU_OFFSET = 1000.0
HU_SCALE = 1080.0


def normalize_hu(values: np.ndarray) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) + HU_OFFSET) / HU_SCALE


def raw_patches(grid: VoxelGrid, center_idx: np.ndarray, p: int) -> np.ndarray:
    """Edge-clamped ``p**3`` cubes of raw voxel values, one row per center.

    Rows are flattened x-fastest, matching the volume layout. Values keep the
    grid's dtype so rows can be de-duplicated bit-exactly.
    """
    if p < 1 or p % 2 == 0:
        raise ValueError(f"patch size must be odd and positive, got {p}")
    h = (p - 1) // 2
    padded = np.pad(grid.array, h, mode="edge")
    windows = sliding_window_view(padded, (p, p, p))  # x, y, z, dx, dy, dz
    idx = np.atleast_2d(np.asarray(center_idx, dtype=np.int64))
    cubes = windows[idx[:, 0], idx[:, 1], idx[:, 2]]  # n, dx, dy, dz
    return np.ascontiguousarray(cubes.transpose(0, 3, 2, 1)).reshape(len(idx), p**3)


def extract_patch(grid: VoxelGrid, center_idx, p: int) -> np.ndarray:
    """Normalized patch around one voxel, shape ``(p**3,)``."""
    return normalize_hu(raw_patches(grid, np.asarray(center_idx)[None, :], p)[0])


def extract_patches(grid: VoxelGrid, center_idx: np.ndarray, p: int) -> np.ndarray:
    return normalize_hu(raw_patches(grid, center_idx, p))


def unique_rows(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bit-exact row de-duplication: ``(unique_rows, inverse)``."""
    rows = np.ascontiguousarray(rows)
    keys = rows.view(np.dtype((np.void, rows.dtype.itemsize * rows.shape[1]))).ravel()
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    return rows[first], inverse.ravel()


def dose_node_features(dose: VoxelGrid, ptv_center) -> np.ndarray:
    """Distance (mm) and polar angle against +z (rad) of each dose voxel to the PTV center.

    Returns ``(n_dose, 2)``; the angle is 0 where the distance is 0.
    """
    rel = dose.voxel_centers() - np.asarray(ptv_center, dtype=float)
    r = np.linalg.norm(rel, axis=1)
    cos_t = np.divide(rel[:, 2], r, out=np.ones_like(r), where=r > 0)
    theta = np.arccos(np.clip(cos_t, -1.0, 1.0))
    return np.stack([r, theta], axis=1)


def positional_encode(features: np.ndarray, d: int, base: float = 10000.0) -> np.ndarray:
    """Sinusoidal encoding of (distance, angle) rows into ``d`` dims.

    Each scalar gets ``d/2`` dims of interleaved sin/cos at frequencies
    ``base**(-4j/d)``; the distance half comes first.
    """
    if d % 4 != 0 or d <= 0:
        raise ValueError(f"encoding dim must be a positive multiple of 4, got {d}")
    f = np.atleast_2d(np.asarray(features, dtype=float))
    freqs = base ** (-4.0 * np.arange(d // 4) / d)
    halves = []
    for col in range(2):
        angles = f[:, col:col + 1] * freqs[None, :]
        half = np.empty((len(f), d // 2))
        half[:, 0::2] = np.sin(angles)
        half[:, 1::2] = np.cos(angles)
        halves.append(half)
    return np.concatenate(halves, axis=1)
