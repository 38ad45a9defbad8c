"""On-disk plan bundles: a directory holding ``plan.json`` plus raw arrays.

Volumes are little-endian float32, masks are single bytes (0/1), both in
x-fastest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from dosegnn.volume import PlanBundle, StructureMask, VoxelGrid


class BundleError(ValueError):
    """A bundle on disk is missing or malformed."""


def _grid_entry(grid: VoxelGrid, file: str | None) -> dict:
    entry = {
        "origin": list(grid.origin),
        "spacing": list(grid.spacing),
        "dims": list(grid.dims),
        "unit": grid.unit,
    }
    if file is not None:
        entry["file"] = file
    return entry


def write_volume(path: Path, values: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(values, dtype="<f4").tobytes())


def read_volume(path: Path, size: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise BundleError(f"missing volume file {path}")
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != size:
        raise BundleError(f"{path} holds {data.size} values, expected {size}")
    return data.astype(np.float32)


def write_bundle(plan: PlanBundle, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_volume(directory / "ct.f32", plan.ct.values)
    dose_file = None
    if plan.has_dose:
        dose_file = "dose.f32"
        write_volume(directory / dose_file, plan.dose.values)
    structures = []
    for s in plan.structures:
        fname = f"mask_{s.name}.u8"
        (directory / fname).write_bytes(s.values.astype(np.uint8).tobytes())
        structures.append({"name": s.name, "grid": s.grid, "file": fname})
    manifest = {
        "name": plan.name,
        "ct": _grid_entry(plan.ct, "ct.f32"),
        "dose": _grid_entry(plan.dose, dose_file),
        "structures": structures,
        "prescription_dose": plan.prescription_dose,
    }
    (directory / "plan.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def _read_grid(entry: dict, directory: Path, what: str) -> VoxelGrid:
    try:
        geom = VoxelGrid(entry["origin"], entry["spacing"], entry["dims"], None, entry.get("unit", ""))
    except KeyError as exc:
        raise BundleError(f"{what} entry in plan.json lacks {exc}") from None
    if entry.get("file"):
        return geom.with_values(read_volume(directory / entry["file"], geom.size))
    return geom


def read_bundle(directory: str | Path) -> PlanBundle:
    directory = Path(directory)
    manifest_path = directory / "plan.json"
    if not manifest_path.exists():
        raise BundleError(f"no plan.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if "dose" not in manifest:
        raise BundleError(f"{manifest_path} has no dose geometry")
    ct = _read_grid(manifest["ct"], directory, "ct")
    dose = _read_grid(manifest["dose"], directory, "dose")
    structures = []
    for entry in manifest.get("structures", []):
        grid = ct if entry["grid"] == "ct" else dose
        path = directory / entry["file"]
        if not path.exists():
            raise BundleError(f"missing mask file {path}")
        raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        if raw.size != grid.size:
            raise BundleError(f"{path} holds {raw.size} voxels, expected {grid.size}")
        structures.append(StructureMask(entry["name"], entry["grid"], raw != 0))
    return PlanBundle(
        ct=ct,
        dose=dose,
        structures=structures,
        prescription_dose=float(manifest["prescription_dose"]),
        name=manifest.get("name", directory.name),
    )


def read_dataset(directory: str | Path) -> list[PlanBundle]:
    """Load every case listed in ``dataset.json`` (or every ``case_*`` dir)."""
    directory = Path(directory)
    index = directory / "dataset.json"
    if index.exists():
        cases = json.loads(index.read_text())["cases"]
    else:
        cases = sorted(p.name for p in directory.glob("case_*") if p.is_dir())
    if not cases:
        raise BundleError(f"no cases found in {directory}")
    return [read_bundle(directory / c) for c in cases]
