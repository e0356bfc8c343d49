import json

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.optimize import linear_sum_assignment

from mhnforget import bm
from mhnforget.acceptance import bm_tangent_gradient_error
from mhnforget.geometry import build_equal_angular, rotate_memories, sample_rotation


def _unit_model(seed, n_h=3, d=2, beta=4.0):
    rng = np.random.default_rng(seed)
    return bm.BmModel(bm.project_rows(rng.standard_normal((n_h, d))), beta)


def _grid_mass(model, form, L=4.0, n=801):
    g = np.linspace(-L, L, n)
    xx, yy = np.meshgrid(g, g)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    dens = np.exp(bm.log_density(pts, model, form)).reshape(n, n)
    return trapezoid(trapezoid(dens, g, axis=1), g)


@pytest.mark.parametrize("seed", range(5))
def test_density_forms_agree(seed):
    model = _unit_model(seed, n_h=4, d=5, beta=6.0)
    x = np.random.default_rng(seed + 50).standard_normal((20, 5))
    np.testing.assert_allclose(bm.log_density(x, model, "mixture"), bm.log_density(x, model, "boltzmann"),
                               atol=1e-10)


def test_unit_density_integrates_to_one():
    assert _grid_mass(_unit_model(0), "mixture") == pytest.approx(1.0, abs=1e-3)


def test_free_row_density_integrates_to_one():
    rows = np.array([[1.3, 0.2], [-0.4, 0.7], [0.1, -1.1]])
    model = bm.BmModel(rows, 4.0, unit_norm=False)
    assert _grid_mass(model, "boltzmann", L=5.0) == pytest.approx(1.0, abs=1e-3)


def test_importance_sampling_matches_analytic_partition():
    model = _unit_model(1, n_h=4, d=3, beta=5.0)
    est, rel_se = bm.estimate_log_partition(model, samples=40000, seed=2)
    assert abs(est - bm.log_partition(model)) <= 4 * rel_se + 1e-3


def test_mixture_form_needs_unit_rows():
    model = bm.BmModel(np.array([[2.0, 0.0]]), 3.0, unit_norm=False)
    with pytest.raises(ValueError):
        bm.log_density(np.zeros(2), model, "mixture")
    with pytest.raises(ValueError, match="unit norm"):
        bm.BmModel(np.array([[2.0, 0.0]]), 3.0)


@pytest.mark.parametrize("seed", range(20))
def test_tangent_gradient_matches_differences(seed):
    assert bm_tangent_gradient_error(seed) <= 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_free_row_gradient_matches_differences(seed):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((3, 4))
    batch = rng.standard_normal((6, 4))
    g = bm.log_likelihood_grad(batch, bm.BmModel(rows, 2.5, unit_norm=False))
    fd = np.zeros_like(rows)
    h = 1e-6
    for idx in np.ndindex(rows.shape):
        e = np.zeros_like(rows)
        e[idx] = h
        fd[idx] = (bm.log_likelihood(batch, bm.BmModel(rows + e, 2.5, unit_norm=False))
                   - bm.log_likelihood(batch, bm.BmModel(rows - e, 2.5, unit_norm=False))) / (2 * h)
    assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(g), 1.0)


def test_training_recovers_separated_patterns():
    X = build_equal_angular(4, 8, 0.1, with_outlier=False).vectors
    model = bm.init_model(X, 4, 16.0, seed=0)
    res = bm.train(X, model, bm.TrainConfig(steps=800, seed=0))
    dist = np.linalg.norm(res.model.memories[:, None] - X[None], axis=2)
    r, c = linear_sum_assignment(dist)
    assert dist[r, c].max() <= 0.05
    assert res.trace[-50:].mean() > res.trace[:50].mean()


def test_zero_steps_leave_model_unchanged():
    X = build_equal_angular(3, 6, 0.2).vectors
    model = bm.init_model(X, 4, 8.0, seed=1)
    res = bm.train(X, model, bm.TrainConfig(steps=0))
    assert np.array_equal(res.model.memories, model.memories) and res.trace.size == 0


def test_training_is_reproducible():
    X = build_equal_angular(3, 6, 0.2).vectors
    model = bm.init_model(X, 4, 8.0, seed=1)
    a = bm.train(X, model, bm.TrainConfig(steps=30, seed=5))
    b = bm.train(X, model, bm.TrainConfig(steps=30, seed=5))
    assert np.array_equal(a.model.memories, b.model.memories) and np.array_equal(a.trace, b.trace)


def test_buffer_rows_come_from_their_own_stream():
    """With a buffer, the data part of each batch is the one drawn without it."""
    X = build_equal_angular(3, 6, 0.2).vectors
    extra = X[:2]
    model = bm.init_model(X, 4, 8.0, seed=1)
    cfg = bm.TrainConfig(steps=1, seed=2, batch_size=8)
    res = bm.train(X, model, cfg, extra=extra)
    batch = X[bm._stream(2, 1).integers(0, len(X), size=8)]
    n_extra = int(np.ceil(8 * 2 / len(X)))
    replayed = extra[bm._stream(2, 1001).integers(0, 2, size=n_extra)]
    expected = bm.log_likelihood(np.vstack([batch, replayed]), model)
    assert res.trace[0] == pytest.approx(expected, abs=1e-14)


def test_no_task2_steps_give_no_rise():
    X = build_equal_angular(4, 10, 0.3)
    cfg = bm.TrainConfig(steps=100, seed=0)
    rep = bm.continual_run(X, X, bm.BmModelConfig(beta=16.0), cfg, task2_steps=0)
    np.testing.assert_allclose(rep.rise, 0.0, atol=1e-14)


def test_repeating_task1_rises_far_less_than_a_shift():
    X = build_equal_angular(4, 10, 0.3)
    cfg = bm.TrainConfig(steps=300, seed=0)
    same = bm.continual_run(X, X, bm.BmModelConfig(beta=16.0), cfg)
    moved = bm.continual_run(X, rotate_memories(X, sample_rotation(10, 0.1, 1)), bm.BmModelConfig(beta=16.0), cfg)
    assert np.abs(same.rise).max() < 1e-3 * np.abs(moved.rise).max()


def test_continual_report_csv(tmp_path):
    X = build_equal_angular(4, 10, 0.3)
    cfg = bm.TrainConfig(steps=20, seed=0)
    rep = bm.continual_run(X, X.vectors[::-1].copy(), bm.BmModelConfig(beta=8.0), cfg, buffer=[4])
    assert np.all(np.isfinite(rep.gain_vs_baseline)) and rep.buffer == (4,)
    text = rep.to_csv(tmp_path / "c.csv").read_text()
    assert text.startswith("pattern_index,role,energy_task1,energy_task2,rise,gain_vs_baseline\n")


def test_checkpoint_roundtrip(tmp_path):
    model = _unit_model(3, n_h=3, d=4)
    back = bm.BmModel.from_dict(json.loads(model.save(tmp_path / "m.json").read_text()))
    assert np.array_equal(back.memories, model.memories) and back.unit_norm


def test_divergence_reported():
    X = np.array([[np.nan, 0.0], [1.0, 0.0]])
    model = bm.BmModel(np.eye(2), 2.0)
    with pytest.raises(bm.TrainingDivergedError):
        bm.train(X, model, bm.TrainConfig(steps=3, batch_size=4))
