"""LoRA layer identities, the dense-update oracle, parameter accounting,
head gradients and checkpoint round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enecg.adapters import (
    LoraLinear, build_head, head_checksum, head_forward,
    load_head, save_head, trainable_params,
)
from enecg.autodiff import Tensor, Tape, backward, reduce_sum
from enecg.errors import DimensionError, ParseError, UsageError
from enecg.optim import Adam, finite_diff_grad


def test_zero_update_at_init_equals_frozen_forward():
    rng = np.random.default_rng(0)
    layer = LoraLinear(6, 5, rank=2, rng=rng)
    x = Tensor(rng.normal(size=5))
    out = layer.forward(x).data
    # b=0 makes the update term exactly zero: bit-identical to the frozen path
    np.testing.assert_array_equal(out, layer.forward_frozen(x).data)
    # and machine-precision equal to an independent w0 @ x oracle
    np.testing.assert_allclose(out, layer.w0.data @ x.data + layer.bias.data,
                               rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_factored_forward_matches_dense_update_oracle(seed):
    rng = np.random.default_rng(seed)
    d, k, r = rng.integers(1, 9), rng.integers(1, 9), 1
    r = int(rng.integers(1, min(d, k) + 1))
    layer = LoraLinear(int(d), int(k), r, rng)
    layer.lora_a.data[...] = rng.normal(size=(r, k))
    layer.lora_b.data[...] = rng.normal(size=(d, r))
    layer.bias.data[...] = rng.normal(size=d)
    x = rng.normal(size=int(k))
    dense = (layer.w0.data + layer.lora_b.data @ layer.lora_a.data) @ x + layer.bias.data
    got = layer.forward(Tensor(x)).data
    np.testing.assert_allclose(got, dense, rtol=0, atol=1e-12)


def test_full_rank_update_can_cancel_base_weight():
    rng = np.random.default_rng(1)
    d = k = 4
    layer = LoraLinear(d, k, rank=4, rng=rng)
    layer.lora_a.data[...] = np.eye(4)
    layer.lora_b.data[...] = -layer.w0.data
    layer.bias.data[...] = rng.normal(size=4)
    x = rng.normal(size=4)
    np.testing.assert_allclose(layer.forward(Tensor(x)).data, layer.bias.data, atol=1e-12)


def test_trainable_count_formula():
    rng = np.random.default_rng(2)
    layer = LoraLinear(64, 64, rank=4, rng=rng)
    assert layer.trainable_count() == 4 * (64 + 64) + 64 == 576
    full = 64 * 64 + 64
    assert full == 4160
    assert abs(576 / 4160 - 0.138) < 1e-3
    r1 = LoraLinear(64, 64, rank=1, rng=rng)
    assert r1.trainable_count() == 64 + 64 + 64


def test_trainable_params_never_include_w0_in_lora_mode():
    rng = np.random.default_rng(3)
    head = build_head(16, 15, rng, hidden_dim=8, rank=2)
    params = trainable_params(head)
    ids = {id(p) for p in params}
    for layer in head.layers:
        assert id(layer.w0) not in ids
        assert id(layer.lora_a) in ids and id(layer.lora_b) in ids and id(layer.bias) in ids


def test_full_finetune_mode_trains_w0_instead():
    rng = np.random.default_rng(4)
    head = build_head(8, 1, rng, hidden_dim=4, rank=2, lora_only=False)
    params = trainable_params(head)
    ids = {id(p) for p in params}
    for layer in head.layers:
        assert id(layer.w0) in ids
        assert id(layer.lora_a) not in ids


def test_head_output_shapes():
    rng = np.random.default_rng(5)
    head = build_head(32, 15, rng, hidden_dim=16, rank=4)
    single = head_forward(head, Tensor(rng.normal(size=32)))
    assert single.shape == (15,)
    batch = head_forward(head, Tensor(rng.normal(size=(7, 32))))
    assert batch.shape == (7, 15)


def test_zero_features_zero_bias_give_zero_logits():
    rng = np.random.default_rng(6)
    head = build_head(8, 3, rng, hidden_dim=4, rank=2)
    out = head_forward(head, Tensor(np.zeros(8)))
    np.testing.assert_array_equal(out.data, np.zeros(3))


def test_head_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    head = build_head(6, 2, rng, hidden_dim=5, rank=2)
    x = Tensor(rng.normal(size=(3, 6)))
    target = Tensor(rng.normal(size=(3, 2)))

    def loss_fn():
        d = head_forward(head, x) - target
        return reduce_sum(d * d)

    params = trainable_params(head)
    with Tape() as tape:
        backward(loss_fn(), tape)
    for p in params:
        analytic = p.grad.copy()
        p.requires_grad = False
        numeric = finite_diff_grad(lambda t: loss_fn().item(), p, h=1e-5).data
        p.requires_grad = True
        denom = np.maximum(np.abs(numeric), 1e-6)
        assert (np.abs(analytic - numeric) / denom).max() < 1e-4


def test_w0_checksum_stable_across_training():
    rng = np.random.default_rng(8)
    head = build_head(6, 1, rng, hidden_dim=4, rank=2)
    x = Tensor(rng.normal(size=(4, 6)))
    y = Tensor(rng.normal(size=(4, 1)))
    before = head_checksum(head)
    opt = Adam(trainable_params(head), lr=1e-2)
    for _ in range(20):
        opt.zero_grad()
        with Tape() as tape:
            d = head_forward(head, x) - y
            backward(reduce_sum(d * d), tape)
        opt.step()
    assert head_checksum(head) == before


def test_rank_bounds_enforced():
    rng = np.random.default_rng(9)
    with pytest.raises(UsageError):
        LoraLinear(4, 4, rank=5, rng=rng)
    with pytest.raises(UsageError):
        LoraLinear(4, 4, rank=0, rng=rng)


def test_input_width_mismatch():
    rng = np.random.default_rng(10)
    layer = LoraLinear(4, 6, rank=2, rng=rng)
    with pytest.raises(DimensionError):
        layer.forward(Tensor(np.zeros(5)))


def test_checkpoint_roundtrip_is_value_exact(tmp_path):
    rng = np.random.default_rng(11)
    head = build_head(10, 15, rng, hidden_dim=6, rank=3)
    for layer in head.layers:
        layer.lora_a.data[...] = rng.normal(size=layer.lora_a.shape)
        layer.lora_b.data[...] = rng.normal(size=layer.lora_b.shape)
        layer.bias.data[...] = rng.normal(size=layer.bias.shape)
    path = tmp_path / "head.ckpt"
    save_head(head, path)
    loaded = load_head(path)
    assert loaded.output_dim == 15
    for orig, back in zip(head.layers, loaded.layers):
        for key, t in orig.tensors().items():
            np.testing.assert_array_equal(t.data, back.tensors()[key].data)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text("not a checkpoint\n")
    with pytest.raises(ParseError):
        load_head(path)
