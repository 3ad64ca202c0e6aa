import math

import numpy as np
import pytest

from flatlora import tensor as T
from flatlora.data import DatasetSpec, make_dataset
from flatlora.errors import ContractError, TrainingAborted
from flatlora.model import ModelSpec, build_model, merge_weights
from flatlora.optim import SGD, AdamW
from flatlora.perturb import SigmaSchedule
from flatlora.rng import RngStream
from flatlora.toys import DoubleWell, noisy_descent
from flatlora.trainers import (SamConfig, Trainer, approx_equivalent,
                               equivalent_perturbation, extra_memory, flat_lora_step,
                               lora_sam_perturbations, lora_sam_step, lora_step, ratio_statistic,
                               sam_perturbation, sam_step_full)


def blob_model(seed=0, widths=(2, 16, 2), noise=0.0):
    (x, y), _ = make_dataset(DatasetSpec(size=200, noise=noise, seed=seed))
    model = build_model(ModelSpec(widths=list(widths), rank=2, alpha=4), RngStream(seed))
    return model, (x, y)


def params_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_lora_step_reduces_loss_and_freezes_base():
    model, batch = blob_model(noise=0.3)
    opt = SGD(model.trainable(), lr=0.1)
    frozen = {k: p.data.copy() for k, p in model.frozen().items()}
    first = lora_step(model, batch, opt).clean_loss
    with T.no_grad():
        after = model.loss(*batch).item()
    assert after < first
    assert all(p.grad is None for p in model.frozen().values())
    assert params_equal({k: p.data for k, p in model.frozen().items()}, frozen)


def test_zero_learning_rate_leaves_parameters():
    model, batch = blob_model()
    snap = model.state_arrays()
    lora_step(model, batch, SGD(model.trainable(), lr=0.0))
    assert params_equal(model.state_arrays(), snap)


def test_flat_step_with_zero_sigma_matches_lora_step():
    states = []
    for use_flat in (False, True):
        model, batch = blob_model(1)
        opt = AdamW(model.trainable(), lr=1e-2, total_steps=3)
        for t in range(3):
            if use_flat:
                flat_lora_step(model, batch, opt, SigmaSchedule(0.0, 3), t)
            else:
                lora_step(model, batch, opt, t)
        states.append(model.state_arrays())
    assert params_equal(*states)


def test_flat_step_reports_and_restores():
    model, batch = blob_model(2)
    opt = AdamW(model.trainable(), lr=1e-2)
    base = {k: p.data.copy() for k, p in model.frozen().items()}
    rep = flat_lora_step(model, batch, opt, SigmaSchedule(0.1, 10, "constant"), 3, seed=4,
                         track_clean=True)
    assert rep.strength == 0.1 and rep.grad_evals == 1
    assert rep.clean_loss is not None and rep.perturbed_loss != rep.clean_loss
    assert rep.extra_state_floats == sum(l.out_features for l in model.lora_layers())
    assert rep.seed_labels == len(model.lora_layers())
    assert all(p.delta is None for p in model.params().values())
    assert params_equal({k: p.data for k, p in model.frozen().items()}, base)
    assert "flat_lora" in rep.to_json()


def test_flat_step_multi_sample_and_all_layers():
    model, batch = blob_model(3)
    model.grad_evals = 0
    opt = AdamW(model.trainable(), lr=1e-2)
    rep = flat_lora_step(model, batch, opt, SigmaSchedule(0.1, 10, "constant"), 1,
                         n_samples=3, all_layers=True)
    assert rep.grad_evals == 3 and model.grad_evals == 3
    assert all(p.delta is None for p in model.params().values())


def test_non_finite_loss_aborts_with_sigma():
    model, batch = blob_model()

    def bad_loss(m, b):
        return T.scale(m.loss(*b), float("nan"))

    T.CHECK_FINITE = False
    try:
        with pytest.raises(TrainingAborted) as exc:
            flat_lora_step(model, batch, SGD(model.trainable()), SigmaSchedule(0.1, 5, "constant"),
                           2, loss_fn=bad_loss)
    finally:
        T.CHECK_FINITE = True
    assert exc.value.diagnostics["sigma_t"] == 0.1
    assert all(p.delta is None for p in model.params().values())


# ---------------------------------------------------------------- SAM

def test_sam_perturbation_has_norm_rho():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    eps, norm = sam_perturbation(g, 0.5)
    assert norm == 5.0
    assert math.isclose(math.sqrt(sum(np.sum(e ** 2) for e in eps.values())), 0.5)
    eps, norm = sam_perturbation({"a": np.zeros(2)}, 0.5)
    assert norm == 0.0 and np.array_equal(eps["a"], np.zeros(2))


def _quadratic_layer_model(seed=0):
    model = build_model(ModelSpec(widths=[3, 4], rank=2, alpha=2), RngStream(seed))
    layer = model.lora_layers()[0]
    layer.bias.data = np.zeros(4)
    layer.B.data = np.random.default_rng(seed).normal(size=layer.B.shape)
    return model, layer


def _half_square(model, batch):
    h = model.forward(np.eye(3))  # rows of h are columns of W′
    return T.scale(T.sum(T.mul(h, h)), 0.5)


def test_sam_full_on_quadratic_matches_closed_form():
    # L(W′) = ½‖W′‖², so ∇ at the ascent point is W′ + ρ·W′/‖W′‖
    model, layer = _quadratic_layer_model()
    A, B, s = layer.A.data.copy(), layer.B.data.copy(), layer.scaling
    Wm = merge_weights(layer)
    rho = 0.3
    G = Wm + rho * Wm / np.linalg.norm(Wm)
    opt = SGD(model.trainable(), lr=1.0)
    rep = sam_step_full(model, None, opt, SamConfig(rho, "full_W"), loss_fn=_half_square)
    assert math.isclose(rep.perturbation_norm, rho, rel_tol=1e-12)
    assert rep.grad_evals == 2
    assert np.allclose(layer.B.data, B - s * G @ A.T, atol=1e-12)
    assert np.allclose(layer.A.data, A - s * B.T @ G, atol=1e-12)
    assert layer.weight.delta is None


def test_sam_full_small_rho_matches_lora_direction():
    deltas = []
    for method in ("lora", "sam"):
        model, batch = blob_model(5, noise=0.5)
        model.lora_layers()[0].B.data += 0.1
        before = {k: p.data.copy() for k, p in model.trainable().items()}
        opt = SGD(model.trainable(), lr=1.0)
        if method == "lora":
            lora_step(model, batch, opt)
        else:
            sam_step_full(model, batch, opt, SamConfig(1e-8, "full_W"))
        deltas.append(np.concatenate([(p.data - before[k]).ravel()
                                      for k, p in model.trainable().items()]))
    a, b = deltas
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) > 0.999


def test_sam_zero_gradient_is_degenerate():
    model, layer = _quadratic_layer_model()
    opt = SGD(model.trainable(), lr=0.1)
    rep = sam_step_full(model, None, opt, SamConfig(0.1), loss_fn=lambda m, b: T.scale(
        T.sum(m.forward(np.eye(3))), 0.0))
    assert rep.degenerate and rep.perturbation_norm == 0.0


def test_sam_config_validation():
    with pytest.raises(ContractError):
        SamConfig(0.0)
    with pytest.raises(ContractError):
        SamConfig(0.1, "weights")
    model, batch = blob_model()
    with pytest.raises(ContractError):
        lora_sam_step(model, batch, SGD(model.trainable()), SamConfig(0.1, "full_W"))


def test_lora_sam_at_init_only_perturbs_B():
    model, batch = blob_model(6)
    opt = SGD(model.trainable(), lr=0.0)
    rep = lora_sam_step(model, batch, opt, SamConfig(0.05, "lora_AB"), track_ratio=True)
    assert all(v == 1.0 for v in rep.ratio.values())
    A = np.ones((2, 3))
    eA, eB = lora_sam_perturbations(A, np.zeros((4, 2)), np.ones((4, 3)), 0.1)
    assert np.array_equal(eA, np.zeros((2, 3))) and np.any(eB)
    assert rep.grad_evals == 2 and math.isclose(rep.perturbation_norm, 0.05)


def test_lora_sam_tiny_instance_against_explicit_sums():
    rng = np.random.default_rng(0)
    A, B, G = rng.normal(size=(1, 3)), rng.normal(size=(3, 1)), rng.normal(size=(3, 3))
    rho = 0.2
    # gradients of <G, BA> with respect to A and B, element by element
    gA = np.array([[sum(B[i, 0] * G[i, j] for i in range(3)) for j in range(3)]])
    gB = np.array([[sum(G[i, j] * A[0, j] for j in range(3))] for i in range(3)])
    norm = math.sqrt(sum(v * v for v in gA.ravel()) + sum(v * v for v in gB.ravel()))
    eA, eB = rho * gA / norm, rho * gB / norm
    eps_w = (B + eB) @ (A + eA) - B @ A
    assert np.allclose(equivalent_perturbation(A, B, G, rho), eps_w, atol=1e-14)
    got_A, got_B = lora_sam_perturbations(A, B, G, rho)
    assert np.allclose(got_A, eA) and np.allclose(got_B, eB)


def test_equivalent_perturbation_end_to_end():
    model, layer = _quadratic_layer_model(3)
    A, B, s = layer.A.data.copy(), layer.B.data.copy(), layer.scaling
    with model.capture():
        T.backward(_half_square(model, None))
        G = layer.merged_grad()
    model.clear_capture()
    eps, _ = sam_perturbation({"A": layer.A.grad, "B": layer.B.grad}, 0.1)
    actual = s * ((B + eps["B"]) @ (A + eps["A"]) - B @ A)
    assert np.allclose(equivalent_perturbation(A, B, G, 0.1, scaling=s), actual, rtol=0, atol=1e-8)


def test_equivalent_perturbation_edge_cases():
    A, B = np.ones((2, 3)), np.zeros((4, 2))
    G = np.arange(12.0).reshape(4, 3)
    c = 0.1 / np.linalg.norm(G @ A.T)
    assert np.array_equal(equivalent_perturbation(A, B, G, 0.1), c * (G @ A.T @ A))
    assert np.array_equal(approx_equivalent(A, B, G, 0.1), c * (G @ A.T @ A))
    assert np.array_equal(equivalent_perturbation(A, B, np.zeros((4, 3)), 0.1), np.zeros((4, 3)))
    with pytest.raises(ContractError):
        equivalent_perturbation(A, B, np.zeros((3, 3)), 0.1)


def test_ratio_statistic_edge_cases():
    rng = np.random.default_rng(1)
    A, G = rng.normal(size=(2, 5)), rng.normal(size=(4, 5))
    assert ratio_statistic(A, np.zeros((4, 2)), G, 0.05) == 1.0
    assert ratio_statistic(np.zeros((2, 5)), rng.normal(size=(4, 2)), G, 0.05) == 0.0
    assert math.isnan(ratio_statistic(A, np.zeros((4, 2)), np.zeros((4, 5)), 0.05))
    assert ratio_statistic(A, np.zeros((4, 2)), G, 0.05, norm="spectral") == 1.0


def test_extra_memory_bookkeeping():
    model, _ = blob_model(widths=(2, 16, 2))
    lora = model.lora_layers()
    assert extra_memory("flat_lora", model) == {"floats": 18, "seed_labels": 2}
    assert extra_memory("sam_full", model)["floats"] == 16 * 2 + 2 * 16
    assert extra_memory("lora_sam", model)["floats"] == sum(l.A.size + l.B.size for l in lora)
    assert extra_memory("lora", model)["floats"] == 0


def test_trainer_rejects_unknown_method():
    model, _ = blob_model()
    with pytest.raises(ContractError):
        Trainer("adam_sam", model, SGD(model.trainable()), 10)


# ---------------------------------------------------------------- toy basin selection

def test_noisy_descent_escapes_sharp_minimum():
    toy = DoubleWell()
    assert toy.basin(noisy_descent(toy, -0.95, 0.0, steps=6000)) == "sharp"
    for sigma in (0.2, 0.3):
        assert toy.basin(noisy_descent(toy, -0.95, sigma, steps=6000)) == "wide"
