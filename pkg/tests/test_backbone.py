import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gradient_check, shift_oracle
from snro.backbone import (
    BackboneConfig,
    ModelState,
    expand_head,
    forward,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    temporal_shift,
    training_loss,
)
from snro.errors import ConfigurationError

SMALL = BackboneConfig(channels=3, frames=4, width=4, feature_dim=8)


def small_model(num_classes=5, seed=0, dtype=torch.float32):
    return ModelState(SMALL, num_classes, seed=seed, dtype=dtype)


def value(t):
    return t.detach().item()


def video_batch(b=2, seed=0, T=4):
    return torch.from_numpy(np.random.default_rng(seed).uniform(size=(b, T, 3, 8, 8)).astype(np.float32))


# -- temporal shift -------------------------------------------------------------


def test_shift_single_frame():
    x = torch.rand(2, 1, 8, 3, 3)
    out = temporal_shift(x, 0.25)
    assert torch.all(out[:, :, :4] == 0)
    assert torch.equal(out[:, :, 4:], x[:, :, 4:])


def test_shift_constant_in_time_unshifted_block():
    x = torch.rand(1, 1, 8, 2, 2).expand(1, 5, 8, 2, 2).contiguous()
    out = temporal_shift(x, 0.25)
    assert torch.equal(out[:, :, 4:], x[:, :, 4:])
    assert torch.equal(out[:, 1:, :2], x[:, 1:, :2])


def test_shift_matches_index_oracle_and_sums():
    x = np.random.default_rng(3).normal(size=(2, 3, 8, 4, 4))
    out = temporal_shift(torch.from_numpy(x), 0.25).numpy()
    assert np.array_equal(out, shift_oracle(x, 2))
    # forward block drops the last frame, backward block drops the first
    fwd_expected = x[:, :, :2].sum() - x[:, -1, :2].sum()
    bwd_expected = x[:, :, 2:4].sum() - x[:, 0, 2:4].sum()
    assert out[:, :, :2].sum() == pytest.approx(fwd_expected)
    assert out[:, :, 2:4].sum() == pytest.approx(bwd_expected)


@pytest.mark.parametrize("frac", [0.0, 0.6, -0.1])
def test_shift_fraction_range(frac):
    with pytest.raises(ConfigurationError):
        temporal_shift(torch.zeros(1, 2, 8, 1, 1), frac)


def test_shift_needs_one_channel():
    with pytest.raises(ConfigurationError):
        temporal_shift(torch.zeros(1, 2, 3, 1, 1), 0.25)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_shift_is_linear(a, b, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, 8, 2, 2, generator=g, dtype=torch.float64)
    y = torch.randn(2, 3, 8, 2, 2, generator=g, dtype=torch.float64)
    lhs = temporal_shift(a * x + b * y, 0.25)
    rhs = a * temporal_shift(x, 0.25) + b * temporal_shift(y, 0.25)
    assert torch.allclose(lhs, rhs, atol=1e-12)


# -- forward / head -------------------------------------------------------------


def test_forward_shapes():
    out = forward(small_model(5), video_batch(1))
    assert out.logits.shape == (1, 5)
    assert out.features.shape == (1, 8)


def test_forward_duplicate_rows_identical():
    x = video_batch(1).repeat(3, 1, 1, 1, 1)
    out = forward(small_model(5), x)
    assert torch.equal(out.logits[0], out.logits[1]) and torch.equal(out.logits[0], out.logits[2])


def test_forward_finite():
    out = forward(small_model(5), torch.ones(2, 4, 3, 8, 8))
    assert torch.isfinite(out.logits).all() and torch.isfinite(out.features).all()


def test_forward_rejects_wrong_dims():
    with pytest.raises(ConfigurationError):
        forward(small_model(), video_batch(T=5))
    with pytest.raises(ConfigurationError):
        forward(small_model(), torch.zeros(1, 4, 1, 8, 8))


def test_expand_preserves_old_logits():
    model = small_model(5)
    x = video_batch(3)
    before = forward(model, x).logits
    expand_head(model, 5)
    after = forward(model, x).logits
    assert after.shape == (3, 10)
    assert torch.equal(after[:, :5], before)


def test_expand_rejects_zero():
    with pytest.raises(ConfigurationError):
        expand_head(small_model(), 0)


def test_expand_widths_add_up():
    a, b = small_model(1), small_model(1)
    expand_head(expand_head(a, 2), 2)
    expand_head(b, 4)
    assert a.num_classes == b.num_classes == 5


def test_expand_from_empty_head():
    model = small_model(0)
    expand_head(model, 3)
    assert forward(model, video_batch(1)).logits.shape == (1, 3)


# -- losses -------------------------------------------------------------------


def test_loss_without_distillation_is_cross_entropy():
    model = small_model(5)
    x, y = video_batch(4), torch.tensor([0, 1, 2, 4])
    expected = F.cross_entropy(forward(model, x).logits, y)
    assert value(training_loss(model, x, y, lambda_distill=0.0)) == pytest.approx(float(expected), rel=1e-6)


def test_distillation_zero_against_identical_snapshot():
    model = small_model(5)
    model.take_snapshot()
    x, y = video_batch(4), torch.tensor([0, 1, 2, 4])
    plain = training_loss(model, x, y, lambda_distill=0.0)
    full = training_loss(model, x, y, lambda_distill=1.0, temperature=2.0)
    assert value(full) == pytest.approx(value(plain), abs=1e-6)


def test_distillation_needs_snapshot():
    with pytest.raises(ConfigurationError):
        training_loss(small_model(), video_batch(), torch.tensor([0, 1]), lambda_distill=1.0)


def test_distillation_positive_when_models_differ():
    model = small_model(3)
    model.take_snapshot()
    with torch.no_grad():
        model.net.head_weight.add_(torch.randn_like(model.net.head_weight))
    expand_head(model, 2)
    x, y = video_batch(2), torch.tensor([0, 4])
    assert value(training_loss(model, x, y, 1.0)) > value(training_loss(model, x, y, 0.0))


def test_gradient_matches_finite_differences():
    model = small_model(3, seed=4, dtype=torch.float64)
    other = small_model(3, seed=9, dtype=torch.float64)
    model.prev_snapshot = other.net
    expand_head(model, 2)
    x = video_batch(2).double()
    y = torch.tensor([1, 4])
    params = list(model.net.parameters())
    errors = gradient_check(lambda: training_loss(model, x, y, 1.0, 2.0), params, 12, np.random.default_rng(0))
    assert len(errors) >= 10
    assert max(errors) <= 1e-4


def test_single_step_decreases_loss():
    model = small_model(5, seed=2, dtype=torch.float64)
    x, y = video_batch(1).double(), torch.tensor([3])
    opt = make_optimizer(model, lr=1e-3)
    before = training_loss(model, x, y, 0.0)
    opt.zero_grad()
    before.backward()
    opt.step()
    assert value(training_loss(model, x, y, 0.0)) < value(before)


# -- checkpoints ----------------------------------------------------------------


@pytest.mark.parametrize("with_snapshot", [False, True])
def test_checkpoint_round_trip(tmp_path, with_snapshot):
    model = small_model(3)
    if with_snapshot:
        model.take_snapshot()
        expand_head(model, 2)
    save_checkpoint(model, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.digest() == model.digest()
    assert back.num_classes == model.num_classes
    if with_snapshot:
        assert back.digest(snapshot=True) == model.digest(snapshot=True)
    x = video_batch(2)
    assert torch.equal(forward(back, x).logits, forward(model, x).logits)


def test_checkpoint_detects_corruption(tmp_path):
    save_checkpoint(small_model(2), tmp_path / "ck")
    blob = bytearray((tmp_path / "ck" / "params.bin").read_bytes())
    blob[0] ^= 0xFF
    (tmp_path / "ck" / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "ck")
