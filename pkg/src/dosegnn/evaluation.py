"""RMSE, cumulative dose-volume histograms, and multi-model comparison reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from dosegnn.model import Model, predict
from dosegnn.volume import GeometryError, PlanBundle, StructureMask, VoxelGrid, transfer_mask

TRUTH = "truth"


class EvaluationError(ValueError):
    pass


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.size != truth.size:
        raise EvaluationError(f"rmse: length mismatch {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise EvaluationError("rmse: empty input")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


@dataclass
class DvhCurve:
    structure: str
    dose_gy: np.ndarray
    volume_pct: np.ndarray

    def to_csv(self) -> str:
        lines = ["dose_gy,volume_pct"]
        lines += [f"{d:.6f},{v:.6f}" for d, v in zip(self.dose_gy, self.volume_pct)]
        return "\n".join(lines) + "\n"


def dvh_bins(prescription_dose: float, n_bins: int = 100) -> np.ndarray:
    """Thresholds from 0 to 1.1 x prescription, both ends included."""
    return np.linspace(0.0, 1.1 * prescription_dose, n_bins)


def cdvh(dose, mask: StructureMask, bins) -> DvhCurve:
    """Percent of the structure receiving at least each threshold dose.

    ``dose`` is a :class:`VoxelGrid` or a flat array on the mask's grid;
    ``bins`` is an ascending threshold array.
    """
    values = dose.values if isinstance(dose, VoxelGrid) else np.asarray(dose)
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size != mask.values.size:
        raise EvaluationError(f"mask {mask.name!r} does not match the dose grid")
    inside = values[mask.values]
    if inside.size == 0:
        raise EvaluationError(f"mask {mask.name!r} is empty")
    bins = np.asarray(bins, dtype=np.float64)
    counts = (inside[None, :] >= bins[:, None]).sum(axis=1)
    return DvhCurve(mask.name, bins, 100.0 * counts / inside.size)


def dose_grid_structures(plan: PlanBundle) -> list[StructureMask]:
    """All plan structures on the dose grid; CT-grid masks move by nearest voxel.

    Structures that end up empty on the dose grid are dropped.
    """
    out = []
    for s in plan.structures:
        m = s if s.grid == "dose" else transfer_mask(s, plan.ct, plan.dose)
        if m.values.any():
            out.append(m)
    return out


Predictor = Model | Callable[[PlanBundle], np.ndarray]


@dataclass
class EvalReport:
    per_plan_rmse: dict[str, dict[str, float]] = field(default_factory=dict)
    mean_rmse: dict[str, float] = field(default_factory=dict)
    curves: dict[str, dict[str, dict[str, DvhCurve]]] = field(default_factory=dict)
    cdvh_gap: dict[str, dict[str, float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "per_plan_rmse": self.per_plan_rmse,
            "mean_rmse": self.mean_rmse,
            "mean_cdvh_gap_pct": self.cdvh_gap,
        }

    def write(self, out: str | Path) -> Path:
        """``metrics.json`` plus ``<plan>/cdvh_<model>_<structure>.csv`` files."""
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        for plan, per_struct in self.curves.items():
            (out / plan).mkdir(exist_ok=True)
            for structure, per_model in per_struct.items():
                for model, curve in per_model.items():
                    (out / plan / f"cdvh_{model}_{structure}.csv").write_text(curve.to_csv())
        return out


def _run(name: str, predictor: Predictor, plan: PlanBundle, threads: int) -> np.ndarray:
    try:
        if isinstance(predictor, Model):
            # scored at the float32 precision predictions are written to disk with
            pred = predict(predictor, plan, threads=threads)
            return pred.astype(np.float32).astype(np.float64)
        return np.asarray(predictor(plan), dtype=np.float64).ravel()
    except (ValueError, KeyError, GeometryError) as exc:
        raise EvaluationError(f"model {name!r} cannot be evaluated on plan {plan.name!r}: {exc}") from exc


def compare_models(models: Mapping[str, Predictor], test_set: list[PlanBundle], n_bins: int = 100,
                   config: dict | None = None, threads: int = 1) -> EvalReport:
    """Evaluate every model on every test plan: RMSE and per-structure CDVH gaps.

    The CDVH gap is the mean absolute difference, in volume percent, between a
    model's curve and the true-dose curve, averaged over bins and plans.
    """
    if not models:
        raise EvaluationError("no models to compare")
    if not test_set:
        raise EvaluationError("no test plans")
    report = EvalReport(config=dict(config or {}))
    gaps: dict[str, dict[str, list[float]]] = {name: {} for name in models}
    for plan in test_set:
        if not plan.has_dose:
            raise EvaluationError(f"plan {plan.name!r} has no ground-truth dose")
        truth = plan.dose.values.astype(np.float64)
        bins = dvh_bins(plan.prescription_dose, n_bins)
        structures = dose_grid_structures(plan)
        truth_curves = {s.name: cdvh(truth, s, bins) for s in structures}
        plan_curves = {s.name: {TRUTH: truth_curves[s.name]} for s in structures}
        for name, predictor in models.items():
            pred = _run(name, predictor, plan, threads)
            if pred.size != truth.size:
                raise EvaluationError(
                    f"model {name!r} produced {pred.size} values for plan {plan.name!r} "
                    f"with {truth.size} dose voxels"
                )
            report.per_plan_rmse.setdefault(name, {})[plan.name] = rmse(pred, truth)
            for s in structures:
                curve = cdvh(pred, s, bins)
                plan_curves[s.name][name] = curve
                gap = float(np.mean(np.abs(curve.volume_pct - truth_curves[s.name].volume_pct)))
                gaps[name].setdefault(s.name, []).append(gap)
        report.curves[plan.name] = plan_curves
    for name in models:
        cells = list(report.per_plan_rmse[name].values())
        report.mean_rmse[name] = float(sum(cells) / len(cells))
        report.cdvh_gap[name] = {s: float(np.mean(v)) for s, v in gaps[name].items()}
    return report
