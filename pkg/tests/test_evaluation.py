import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dosegnn.evaluation import (
    TRUTH,
    EvaluationError,
    cdvh,
    compare_models,
    dose_grid_structures,
    dvh_bins,
    rmse,
)
from dosegnn.model import EncoderConfig, ModelConfig, init_model
from dosegnn.phantom import generate_dataset
from dosegnn.volume import StructureMask

finite = st.floats(-1e3, 1e3, allow_nan=False)


def two_pass_rmse(a, b):
    total = 0.0
    for x, y in zip(a, b):
        total += (x - y) ** 2
    return math.sqrt(total / len(a))


def test_rmse_examples():
    a = np.random.default_rng(0).normal(size=50)
    assert rmse(a, a) == 0.0
    assert rmse(a + 1.0, a) == pytest.approx(1.0, rel=1e-15)
    assert rmse([3.0], [0.0]) == 3.0


@pytest.mark.parametrize("seed", range(10))
def test_rmse_formula_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=100), rng.normal(size=100)
    assert abs(rmse(a, b) - two_pass_rmse(a, b)) <= 1e-12


def test_rmse_errors():
    with pytest.raises(EvaluationError):
        rmse([1.0, 2.0], [1.0])
    with pytest.raises(EvaluationError):
        rmse([], [])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40).flatmap(lambda n: st.tuples(arrays(float, n, elements=finite),
                                                       arrays(float, n, elements=finite))),
       st.floats(-100, 100))
def test_rmse_properties(pair, c):
    a, b = pair
    assert rmse(a, b) >= 0
    assert rmse(a, b) == rmse(b, a)
    assert rmse(a, a) == 0
    assert rmse(c * a, c * b) == pytest.approx(abs(c) * rmse(a, b), rel=1e-9, abs=1e-9)


def test_bins():
    b = dvh_bins(60.0)
    assert len(b) == 100 and b[0] == 0.0 and b[-1] == pytest.approx(66.0)
    assert np.all(np.diff(b) > 0)


def test_cdvh_uniform_step():
    dose = np.full(10, 30.0)
    mask = StructureMask("PTV", "dose", np.ones(10, bool))
    curve = cdvh(dose, mask, dvh_bins(60.0))
    np.testing.assert_array_equal(curve.volume_pct, np.where(curve.dose_gy <= 30.0, 100.0, 0.0))


def test_cdvh_two_voxels():
    mask = StructureMask("PTV", "dose", np.array([True, True, False]))
    curve = cdvh(np.array([1.0, 3.0, 9.0]), mask, [0.0, 1.0, 2.0, 3.0, 3.5])
    np.testing.assert_array_equal(curve.volume_pct, [100, 100, 50, 50, 0])


def test_cdvh_empty_mask():
    with pytest.raises(EvaluationError):
        cdvh(np.ones(3), StructureMask("PTV", "dose", np.zeros(3, bool)), [0.0])


def sort_and_count(values, bins):
    s = np.sort(values)
    # voxels >= t are those at or past the left insertion point
    return np.array([100.0 * (len(s) - np.searchsorted(s, t, side="left")) / len(s) for t in bins])


@pytest.mark.parametrize("seed", range(50))
def test_cdvh_random_fields(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 500))
    dose = rng.uniform(0, 70, n)
    dose[rng.random(n) < 0.1] = 30.0  # repeated values land on thresholds
    mask = rng.random(n) < 0.5
    mask[rng.integers(n)] = True
    bins = dvh_bins(60.0)
    curve = cdvh(dose, StructureMask("S", "dose", mask), bins)
    assert np.all(np.diff(curve.volume_pct) <= 0)
    assert curve.volume_pct[0] == 100.0
    np.testing.assert_allclose(curve.volume_pct, sort_and_count(dose[mask], bins), rtol=0, atol=1e-12)


def test_phantom_ptv_curve_matches_oracle(small_plan):
    ptv = [s for s in dose_grid_structures(small_plan) if s.name == "PTV"][0]
    bins = dvh_bins(small_plan.prescription_dose)
    curve = cdvh(small_plan.dose, ptv, bins)
    want = sort_and_count(small_plan.dose.values[ptv.values].astype(float), bins)
    np.testing.assert_allclose(curve.volume_pct, want, rtol=0, atol=1e-12)
    assert curve.volume_pct[-1] == 0.0


def test_csv_format():
    mask = StructureMask("PTV", "dose", np.ones(2, bool))
    text = cdvh(np.array([1.0, 2.0]), mask, [0.0, 1.5]).to_csv()
    assert text == "dose_gy,volume_pct\n0.000000,100.000000\n1.500000,50.000000\n"


def test_dose_grid_structures_transfer(small_plan):
    structures = dose_grid_structures(small_plan)
    assert all(s.grid == "dose" and s.values.size == small_plan.dose.size for s in structures)
    assert "PTV" in [s.name for s in structures]


@pytest.fixture(scope="module")
def plans(small_cfg):
    return generate_dataset(small_cfg, 3)


def test_truth_as_model_scores_zero(plans):
    report = compare_models({TRUTH: lambda p: p.dose.values}, plans)
    assert all(v == 0.0 for v in report.per_plan_rmse[TRUTH].values())
    assert all(v == 0.0 for v in report.cdvh_gap[TRUTH].values())


def test_one_model_one_plan(plans):
    model = init_model(ModelConfig(kind="heuristic1", encoder=EncoderConfig(patch_size=3, embed_dim=8,
                                                                             mlp_hidden=(8,))), 0)
    report = compare_models({"h1": model}, plans[:1])
    assert report.per_plan_rmse == {"h1": {plans[0].name: report.mean_rmse["h1"]}}


def test_report_mean_is_mean_of_cells(plans, tmp_path):
    rng = np.random.default_rng(0)
    models = {
        "noisy": lambda p: p.dose.values + rng.normal(size=p.dose.size),
        "flat": lambda p: np.full(p.dose.size, 30.0),
    }
    report = compare_models(models, plans, config={"seed": 1})
    for name, cells in report.per_plan_rmse.items():
        values = list(cells.values())
        assert report.mean_rmse[name] == sum(values) / len(values)
    out = report.write(tmp_path / "eval")
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["config"] == {"seed": 1}
    assert set(doc["mean_cdvh_gap_pct"]["flat"]) >= {"PTV"}
    csv = out / plans[0].name / "cdvh_flat_PTV.csv"
    assert csv.read_text().startswith("dose_gy,volume_pct\n")
    assert len(csv.read_text().splitlines()) == 101
    assert (out / plans[0].name / f"cdvh_{TRUTH}_PTV.csv").exists()


def test_incompatible_model_named_in_error(plans):
    with pytest.raises(EvaluationError, match="bad.*case_0000"):
        compare_models({"bad": lambda p: np.zeros(3)}, plans[:1])
    with pytest.raises(EvaluationError):
        compare_models({}, plans)
    with pytest.raises(EvaluationError):
        compare_models({"x": lambda p: p.dose.values}, [])
