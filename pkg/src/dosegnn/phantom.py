"""Synthetic treatment plans with an analytic ground-truth dose.

The dose falls off exponentially outside a spherical target and is modulated
by the polar angle around the target center, so distance and angle to the
target center fully determine it (given the target radius).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from dosegnn.bundle import write_bundle
from dosegnn.rng import SplitMix64, derive_seed
from dosegnn.volume import PlanBundle, StructureMask, VoxelGrid, mask_centroid

AIR_HU = -1000.0
BODY_HU = 0.0
PTV_HU = 80.0
OAR_HU = -40.0


class PhantomConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    ct_dims: tuple[int, int, int] = (48, 48, 48)
    ct_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dose_dims: tuple[int, int, int] = (16, 16, 16)
    dose_spacing: tuple[float, float, float] = (2.5, 2.5, 2.5)
    dose_origin_jitter: float = 3.0
    ptv_radius_range: tuple[float, float] = (8.0, 14.0)
    prescription_dose: float = 60.0
    falloff_tau: float = 8.0
    angular_amplitude: float = 0.3
    n_oars: int = 2

    def __post_init__(self):
        for name in ("ct_dims", "ct_spacing", "dose_dims", "dose_spacing", "ptv_radius_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if min(self.ct_spacing) <= 0 or min(self.dose_spacing) <= 0:
            raise PhantomConfigError("spacings must be positive")
        if not 0 <= self.angular_amplitude < 1:
            raise PhantomConfigError("angular_amplitude must lie in [0, 1)")
        if self.falloff_tau <= 0:
            raise PhantomConfigError("falloff_tau must be positive")
        lo, hi = self.ptv_radius_range
        if not 0 < lo <= hi:
            raise PhantomConfigError(f"bad ptv_radius_range {self.ptv_radius_range}")
        ct_half = (np.asarray(self.ct_dims) - 1) * np.asarray(self.ct_spacing) / 2
        dose_half = (np.asarray(self.dose_dims) - 1) * np.asarray(self.dose_spacing) / 2
        if np.any(dose_half + abs(self.dose_origin_jitter) > ct_half):
            raise PhantomConfigError(
                f"dose grid (half extent {dose_half.tolist()} mm, jitter "
                f"{self.dose_origin_jitter} mm) does not fit inside the CT extent "
                f"(half extent {ct_half.tolist()} mm)"
            )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def analytic_dose(points: np.ndarray, center, radius: float, prescription: float,
                  tau: float, amplitude: float) -> np.ndarray:
    rel = np.asarray(points, dtype=float) - np.asarray(center, dtype=float)
    r = np.linalg.norm(rel, axis=-1)
    cos_theta = np.divide(rel[..., 2], r, out=np.ones_like(r), where=r > 0)
    angular = (1.0 + amplitude * np.clip(cos_theta, -1.0, 1.0)) / (1.0 + amplitude)
    return prescription * angular * np.exp(-np.maximum(0.0, r - radius) / tau)


def _sphere(centers: np.ndarray, c: np.ndarray, radius: float) -> np.ndarray:
    return np.sum((centers - c) ** 2, axis=1) <= radius * radius


def generate_phantom(cfg: PhantomConfig, case_index: int) -> PlanBundle:
    rng = SplitMix64(derive_seed(cfg.seed, "phantom", case_index))
    ct_dims = np.asarray(cfg.ct_dims)
    ct_spacing = np.asarray(cfg.ct_spacing)
    ct_origin = -(ct_dims - 1) * ct_spacing / 2
    geom = VoxelGrid(ct_origin, ct_spacing, ct_dims, unit="HU")
    pts = geom.voxel_centers()
    half = (ct_dims - 1) * ct_spacing / 2

    # torso-like: elongated along z well past the CT field of view
    semi = half * np.array([0.95, 0.85, 2.5])
    body = np.sum((pts / semi) ** 2, axis=1) <= 1.0

    radius = rng.uniform(*cfg.ptv_radius_range)
    seeded_center = np.array([rng.uniform(-3.0, 3.0) for _ in range(3)])
    ptv = _sphere(pts, seeded_center, radius)

    oars = []
    for _ in range(cfg.n_oars):
        for _attempt in range(1000):
            r_oar = rng.uniform(3.0, 5.0)
            direction = np.array([rng.uniform(-1.0, 1.0) for _ in range(3)])
            norm = np.linalg.norm(direction)
            gap = rng.uniform(1.0, 3.0)
            if not 1e-3 < norm <= 1.0:
                continue
            # OARs abut the target; the PTV is carved out of their masks below
            c = seeded_center + direction / norm * (radius + gap)
            inside_body = np.sum((c / (semi - 2.0)) ** 2) <= 1.0
            clear = all(np.linalg.norm(c - oc) > r_oar + orr + 1.0 for oc, orr in oars)
            if inside_body and clear:
                oars.append((c, r_oar))
                break
        else:
            raise PhantomConfigError(f"could not place OAR {len(oars) + 1} for case {case_index}")

    ct_values = np.full(geom.size, AIR_HU)
    ct_values[body] = BODY_HU
    structures = []
    for i, (c, r_oar) in enumerate(oars, start=1):
        m = _sphere(pts, c, r_oar) & ~ptv
        ct_values[m] = OAR_HU
        structures.append(StructureMask(f"OAR_{i}", "ct", m))
    ct_values[ptv] = PTV_HU
    if not ptv.any():
        raise PhantomConfigError(f"empty PTV for case {case_index}")
    ptv_mask = StructureMask("PTV", "ct", ptv)
    structures.insert(0, ptv_mask)
    ct = geom.with_values(ct_values.astype(np.float32))
    ptv_center = mask_centroid(ptv_mask, ct)

    dose_dims = np.asarray(cfg.dose_dims)
    dose_spacing = np.asarray(cfg.dose_spacing)
    jitter = np.array([rng.uniform(-cfg.dose_origin_jitter, cfg.dose_origin_jitter) for _ in range(3)])
    dose_origin = -(dose_dims - 1) * dose_spacing / 2 + jitter
    dose_geom = VoxelGrid(dose_origin, dose_spacing, dose_dims, unit="Gy")
    dose_values = analytic_dose(
        dose_geom.voxel_centers(), ptv_center, radius, cfg.prescription_dose,
        cfg.falloff_tau, cfg.angular_amplitude,
    )
    return PlanBundle(
        ct=ct,
        dose=dose_geom.with_values(dose_values.astype(np.float32)),
        structures=structures,
        prescription_dose=float(cfg.prescription_dose),
        name=f"case_{case_index:04d}",
        ptv_center=ptv_center,
    )


def generate_dataset(cfg: PhantomConfig, count: int = 20) -> list[PlanBundle]:
    if count < 1:
        raise PhantomConfigError("count must be >= 1")
    return [generate_phantom(cfg, i) for i in range(count)]


def write_dataset(bundles: list[PlanBundle], out: str | Path, cfg: PhantomConfig) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for b in bundles:
        write_bundle(b, out / b.name)
    index = {"cases": [b.name for b in bundles], "config": cfg.to_dict()}
    (out / "dataset.json").write_text(json.dumps(index, indent=2) + "\n")
    return out
