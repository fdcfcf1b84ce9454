"""Integrated-gradients exactness, completeness trend and export format."""

import numpy as np
import pytest

from enecg import autodiff as ad
from enecg.autodiff import Tensor
from enecg.errors import DimensionError, UsageError
from enecg.saliency import (
    SaliencyMap, export_saliency, integrated_gradients, load_saliency_csv,
)


def linear_model(w):
    """F(x) = sum(w * x) per batch row."""
    wt = Tensor(w)

    def run(batch):
        b = batch.shape[0]
        flat = ad.reshape(batch, (b, w.size))
        return ad.matmul(flat, Tensor(w.reshape(-1)))

    return run


def quadratic_model(scale=1.0):
    def run(batch):
        b = batch.shape[0]
        flat = ad.reshape(batch, (b, -1))
        sq = ad.mul(flat, flat)
        return ad.mul(ad.reduce_sum(sq, axis=1), scale)

    return run


def test_input_equal_to_baseline_gives_zero_attributions():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 8)))
    smap = integrated_gradients(quadratic_model(), x, baseline=Tensor(x.data.copy()), steps=16)
    np.testing.assert_array_equal(smap.attributions, np.zeros((2, 8)))


def test_linear_model_is_exact_for_any_step_count():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 5))
    x = Tensor(rng.normal(size=(3, 5)))
    for steps in (1, 2, 7):
        smap = integrated_gradients(linear_model(w), x, steps=steps)
        np.testing.assert_allclose(smap.attributions, w * x.data, atol=1e-12)
        assert smap.completeness_gap <= 1e-10


def cubic_model():
    """F(x) = sum(x^3): its gradient is curved, so quadrature error is real."""
    def run(batch):
        b = batch.shape[0]
        flat = ad.reshape(batch, (b, -1))
        cube = ad.mul(ad.mul(flat, flat), flat)
        return ad.reduce_sum(cube, axis=1)

    return run


def test_completeness_gap_shrinks_with_steps():
    rng = np.random.default_rng(2)
    gaps_small = []
    gaps_large = []
    for trial in range(20):
        x = Tensor(rng.normal(size=(1, 6)))
        model = cubic_model()
        gaps_small.append(integrated_gradients(model, x, steps=32).completeness_gap)
        gaps_large.append(integrated_gradients(model, x, steps=512).completeness_gap)
    assert np.mean(gaps_large) <= np.mean(gaps_small)
    assert all(b <= s + 1e-12 for s, b in zip(gaps_small, gaps_large))


def test_midpoint_rule_is_exact_for_quadratics():
    # the midpoint rule integrates the linear gradient of x^2 exactly
    x = Tensor(np.array([[2.0, -3.0]]))
    smap = integrated_gradients(quadratic_model(), x, steps=4)
    np.testing.assert_allclose(smap.attributions, x.data**2, atol=1e-12)


def test_scalar_target_picks_the_chosen_class():
    from enecg import tasks as tk
    from enecg.saliency import scalar_target
    logits = Tensor(np.arange(30.0).reshape(2, 15))
    out = scalar_target(tk.TASKS["arrhythmia"], logits, class_index=3)
    np.testing.assert_array_equal(out.data, [3.0, 18.0])
    with pytest.raises(UsageError):
        scalar_target(tk.TASKS["arrhythmia"], logits)
    reg = scalar_target(tk.TASKS["rr"], Tensor([[2.5], [1.5]]))
    np.testing.assert_array_equal(reg.data, [2.5, 1.5])


def test_deterministic_under_fixed_inputs():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 5)))
    model = quadratic_model()
    a = integrated_gradients(model, x, steps=32)
    b = integrated_gradients(model, x, steps=32)
    np.testing.assert_array_equal(a.attributions, b.attributions)
    assert a.completeness_gap == b.completeness_gap


def test_step_and_shape_validation():
    x = Tensor(np.zeros((2, 4)))
    with pytest.raises(UsageError):
        integrated_gradients(quadratic_model(), x, steps=0)
    with pytest.raises(DimensionError):
        integrated_gradients(quadratic_model(), x, baseline=Tensor(np.zeros((2, 5))))


def test_export_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    att = rng.normal(size=(4, 6))
    smap = SaliencyMap(att, "zeros", 32, 1.5e-4, 2.0, 0.0)
    csv_path = tmp_path / "map.csv"
    export_saliency(smap, csv_path)
    back = load_saliency_csv(csv_path)
    np.testing.assert_array_equal(back, att)
    with open(str(csv_path) + ".json") as fh:
        sidecar = fh.read()
    assert '"completeness_gap"' in sidecar and '"steps": 32' in sidecar
    n_lines = len(csv_path.read_text().splitlines())
    assert n_lines == 4 * 6 + 1
