import json
import math

import numpy as np
import pytest

from flatlora import tensor as T
from flatlora.data import DatasetSpec, make_dataset
from flatlora.errors import ContractError
from flatlora.landscape import (Direction, filter_normalized_direction, generalization_gap,
                                loss_surface, sharpness_metric, symmetric_axis)
from flatlora.model import ModelSpec, build_model
from flatlora.rng import RngStream
from flatlora.toys import QuadraticToy


@pytest.fixture
def setup():
    (x, y), _ = make_dataset(DatasetSpec(size=300, seed=1))
    model = build_model(ModelSpec(widths=[2, 32, 2]), RngStream(1))
    return model, (x, y)


def test_direction_rows_match_weight_rows(setup):
    model, _ = setup
    d = filter_normalized_direction(model, 3)
    for name, w in model.probe_weights().items():
        assert np.allclose(np.linalg.norm(d.tensors[name], axis=1), np.linalg.norm(w, axis=1),
                           rtol=1e-12)
    assert d.filter_normalized and d.seed_label == (3, 0)


def test_zero_weight_row_gives_zero_direction_row():
    toy = QuadraticToy({"w": np.array([[1.0, 2.0], [0.0, 0.0]])})
    d = filter_normalized_direction(toy, 0)
    assert np.array_equal(d.tensors["w"][1], [0.0, 0.0])


def test_distinct_directions_nearly_orthogonal():
    toy = QuadraticToy({"w": np.random.default_rng(0).normal(size=(100, 100))})
    a = filter_normalized_direction(toy, 1).tensors["w"].ravel()
    b = filter_normalized_direction(toy, 2).tensors["w"].ravel()
    assert abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b)) < 0.2


def test_symmetric_axis():
    ax = symmetric_axis(7, 0.3)
    assert ax[3] == 0.0 and np.array_equal(ax, -ax[::-1]) and ax[-1] == 0.3
    with pytest.raises(ContractError):
        symmetric_axis(6, 1.0)


def test_surface_origin_restore_and_determinism(setup):
    model, data = setup
    snap = model.state_arrays()
    d = filter_normalized_direction(model, 0)
    g1 = loss_surface(model, data, d, k=11, radius=0.5)
    g2 = loss_surface(model, data, d, k=11, radius=0.5)
    with T.no_grad():
        assert g1.origin == model.loss(*data).item()
    assert np.array_equal(g1.values, g2.values)
    assert all(np.array_equal(v, snap[k]) for k, v in model.state_arrays().items())
    assert all(p.delta is None for p in model.params().values())


def test_surface_2d_and_exports(setup, tmp_path):
    model, data = setup
    dirs = [filter_normalized_direction(model, 0, i) for i in range(2)]
    g = loss_surface(model, data, dirs, k=5, radius=0.2, dataset_id="blobs", snapshot_id="s")
    assert g.values.shape == (5, 5) and g.dims == 2
    g.to_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "alpha,beta,loss" and len(lines) == 26
    doc = json.loads(g.to_json(tmp_path / "g.json"))
    assert doc["dims"] == 2 and len(doc["values"]) == 25 and doc["dataset_id"] == "blobs"


def test_quadratic_toy_surface_is_alpha_squared():
    toy = QuadraticToy({"w": np.zeros((1, 1))})
    g = loss_surface(toy, None, Direction({"w": np.ones((1, 1))}), k=201, radius=1.0)
    assert np.max(np.abs(g.values - g.alphas ** 2)) < 1e-10


def test_non_finite_cells_become_inf():
    class Blowup(QuadraticToy):
        def probe_loss(self, data=None, offsets=None):
            v = super().probe_loss(data, offsets)
            return math.inf if v > 0.5 else v

    toy = Blowup({"w": np.zeros((1, 1))})
    g = loss_surface(toy, None, Direction({"w": np.ones((1, 1))}), k=5, radius=1.0)
    assert np.isinf(g.values[0]) and np.isfinite(g.values[2])
    assert json.loads(g.to_json())["values"][0] == "inf"


def test_sharpness_radius_zero(setup):
    model, data = setup
    assert sharpness_metric(model, data, 0.0, 5) == 0.0
    with pytest.raises(ContractError):
        sharpness_metric(model, data, 0.1, 0)


def test_sharpness_quadratic_closed_form():
    # L = h‖W − W*‖² with W* = 0; each filter-normalised d has ‖d‖ = ‖W‖, and
    # max over ±r of h‖W + r d‖² − h‖W‖² = h r²‖W‖² + 2 h r |<W, d>|
    w = np.random.default_rng(0).normal(size=(4, 6))
    h, r = 2.0, 0.1
    toy = QuadraticToy({"w": w}, curvature=h)
    dirs = [filter_normalized_direction(toy, 0, s).tensors["w"] for s in range(8)]
    expected = np.mean([h * r * r * np.sum(w * w) + 2 * h * r * abs(np.sum(w * d)) for d in dirs])
    assert math.isclose(sharpness_metric(toy, None, r, 8, seed=0), expected, rel_tol=1e-10)
    at_min = QuadraticToy({"w": w}, minimum={"w": w}, curvature=h)
    assert math.isclose(sharpness_metric(at_min, None, r, 8), h * r * r * np.sum(w * w),
                        rel_tol=1e-10)


def test_generalization_gap():
    s = {"step": [10, 20], "acc": [0.9, 0.98], "loss": [0.3, 0.1]}
    t = {"step": [10, 20], "acc": [0.9, 0.91], "loss": [0.3, 0.4]}
    assert generalization_gap(s, s)["acc_gap"] == [0.0, 0.0]
    gap = generalization_gap(s, t)
    assert math.isclose(gap["acc_gap"][1], 0.07) and math.isclose(gap["loss_gap"][1], 0.3)
    with pytest.raises(ContractError):
        generalization_gap(s, {**t, "step": [10, 30]})
    with pytest.raises(ContractError):
        generalization_gap(s, {**t, "acc": [0.9]})
