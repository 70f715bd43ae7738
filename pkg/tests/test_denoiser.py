import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from _numerics import check_gradients
from seda.denoiser import (
    ClassifierHead,
    DenoiserConfig,
    ModelSpec,
    attention,
    build_model,
    classify,
    cross_attention_fuse,
    embed_time,
    predict_clean,
    sinusoidal_embedding,
)
from seda.exceptions import InvalidArgumentError


def test_sinusoid_at_zero_alternates():
    emb = sinusoidal_embedding([0], 10)
    assert emb.tolist() == [[0.0, 1.0] * 5]


def test_sinusoid_closed_form_small():
    emb = sinusoidal_embedding([1], 4)[0]
    expected = [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)]
    np.testing.assert_allclose(emb.numpy(), expected, rtol=1e-14)
    np.testing.assert_allclose(emb.numpy(), [0.8415, 0.5403, 0.0100, 0.99995], atol=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 5000), min_size=1, max_size=8), st.sampled_from([2, 8, 64]))
def test_sinusoid_bounded(steps, dim):
    emb = sinusoidal_embedding(steps, dim)
    assert emb.shape == (len(steps), dim)
    assert float(emb.abs().max()) <= 1.0


def test_embed_time_with_identity_layers(tiny_model):
    model = tiny_model(d=4, token_count=1, activation="identity")
    with torch.no_grad():
        model.denoiser.time_embed.w1.weight.copy_(torch.eye(4))
        model.denoiser.time_embed.w2.weight.copy_(torch.eye(4))
    out = embed_time(model, torch.tensor([1]))
    np.testing.assert_allclose(out[0].detach().numpy(), [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)])


def test_attention_rows_sum_to_one(tiny_model):
    model = tiny_model(d=16, token_count=4, attention_heads=2)
    x, v = torch.randn(5, 16, dtype=torch.float64), torch.randn(5, 16, dtype=torch.float64)
    out, weights = model.denoiser.fusion(x, v, return_weights=True)
    assert out.shape == (5, 16)
    assert weights.shape == (5, 2, 4, 4)
    torch.testing.assert_close(weights.sum(-1), torch.ones(5, 2, 4, dtype=torch.float64))


def test_single_token_identity_projection_returns_visual(tiny_model):
    model = tiny_model(d=6, token_count=1, residual=False)
    with torch.no_grad():
        for layer in (model.denoiser.fusion.query, model.denoiser.fusion.key, model.denoiser.fusion.value):
            layer.weight.copy_(torch.eye(6))
    x, v = torch.randn(3, 6, dtype=torch.float64), torch.randn(3, 6, dtype=torch.float64)
    assert torch.equal(cross_attention_fuse(model, x, v), v)


def test_attention_invariant_to_key_value_token_order():
    g = torch.Generator().manual_seed(1)
    q, k, v = (torch.randn(2, 5, 3, generator=g, dtype=torch.float64) for _ in range(3))
    perm = torch.randperm(5, generator=g)
    out, _ = attention(q, k, v)
    out_p, _ = attention(q, k[:, perm], v[:, perm])
    torch.testing.assert_close(out, out_p, rtol=1e-12, atol=1e-12)


def test_residual_identity_with_zero_projections(tiny_model):
    model = tiny_model(d=8, token_count=4)
    with torch.no_grad():
        for layer in (model.denoiser.fusion.query, model.denoiser.fusion.key, model.denoiser.fusion.value):
            layer.weight.zero_()
    x, v = torch.randn(4, 8, dtype=torch.float64), torch.randn(4, 8, dtype=torch.float64)
    assert torch.equal(cross_attention_fuse(model, x, v), x)


@pytest.mark.parametrize("fusion", ["attention", "concat"])
def test_predict_clean_shape_determinism_and_batch_independence(tiny_model, fusion):
    model = tiny_model(d=16, token_count=4, fusion=fusion, seed=3)
    g = torch.Generator().manual_seed(0)
    x, v = torch.randn(7, 16, generator=g, dtype=torch.float64), torch.randn(7, 16, generator=g, dtype=torch.float64)
    steps = torch.randint(1, 100, (7,), generator=g)
    a = predict_clean(model, x, steps, v)
    assert a.shape == (7, 16)
    assert torch.equal(a, predict_clean(model, x, steps, v))
    perm = torch.randperm(7, generator=g)
    torch.testing.assert_close(predict_clean(model, x[perm], steps[perm], v[perm]), a[perm], rtol=1e-12, atol=1e-12)


def test_fresh_model_outputs_finite_and_varied(tiny_model):
    model = tiny_model(d=64, token_count=8, seed=11, dtype=torch.float32)
    g = torch.Generator().manual_seed(5)
    x, v = torch.randn(32, 64, generator=g), torch.randn(32, 64, generator=g)
    with torch.no_grad():
        out = predict_clean(model, x, torch.randint(1, 200, (32,), generator=g), v)
    assert torch.isfinite(out).all()
    assert float(out.std(dim=0).mean()) > 0


@pytest.mark.parametrize("fusion", ["attention", "concat"])
def test_parameter_gradients_match_finite_differences(tiny_model, fusion):
    model = tiny_model(d=8, token_count=2, fusion=fusion, seed=2)
    g = torch.Generator().manual_seed(4)
    x, v = torch.randn(4, 8, generator=g, dtype=torch.float64), torch.randn(4, 8, generator=g, dtype=torch.float64)
    steps = torch.tensor([1, 7, 30, 99])
    target = torch.randn(4, 8, generator=g, dtype=torch.float64)

    def loss():
        return ((predict_clean(model, x, steps, v) - target) ** 2).sum()

    params = [p for p in model.denoiser.parameters()]
    assert check_gradients(loss, params) <= 1e-4


def test_classifier_scores():
    head = ClassifierHead(4, 5).double()
    with torch.no_grad():
        head.linear.weight.zero_()
        head.linear.bias.zero_()
    feats = torch.randn(3, 4, dtype=torch.float64)
    torch.testing.assert_close(head.scores(classify(head, feats)), torch.full((3, 5), 0.2, dtype=torch.float64))

    head = ClassifierHead(4, 5).double()
    probs = head.scores(classify(head, feats * 10))
    torch.testing.assert_close(probs.sum(-1), torch.ones(3, dtype=torch.float64))
    multi = ClassifierHead(4, 5, "multi").double()
    s = multi.scores(classify(multi, feats))
    assert bool(((s > 0) & (s < 1)).all())


@pytest.mark.parametrize(
    "kwargs",
    [dict(feature_dim=10, token_count=3), dict(feature_dim=8, token_count=2, attention_heads=3),
     dict(feature_dim=7, token_count=1), dict(activation="relu6"), dict(fusion="sum"), dict(token_count=0)],
)
def test_invalid_denoiser_config(kwargs):
    with pytest.raises(InvalidArgumentError):
        DenoiserConfig(**kwargs)


def test_input_shape_checks(tiny_model):
    model = tiny_model(d=8)
    with pytest.raises(InvalidArgumentError):
        predict_clean(model, torch.zeros(2, 8), [1], torch.zeros(2, 8))
    with pytest.raises(InvalidArgumentError):
        predict_clean(model, torch.zeros(2, 8), [1, 1], torch.zeros(3, 8))
    with pytest.raises(InvalidArgumentError):
        classify(model.head, torch.zeros(2, 5))
    with pytest.raises(InvalidArgumentError):
        build_model(ModelSpec("gan", 3))


def test_seeded_initialization_is_reproducible(tiny_model):
    a, b = tiny_model(seed=9), tiny_model(seed=9)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    bound = 1 / math.sqrt(16)  # decoder input width 2d
    w = a.denoiser.decoder[0].weight.detach()
    assert float(w.abs().max()) <= bound
