import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from echoone.errors import ShapeMismatch, ZeroVector
from echoone.metrics import dice
from echoone.pcmask import (
    LightUNet,
    compose_prior,
    compose_prior_torch,
    generate_prompt,
    pcm_loss,
    pcm_loss_terms,
    similarity_weights,
    similarity_weights_torch,
)

from oracles import finite_difference


def test_similarity_examples():
    protos = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(similarity_weights([1.0, 0.0], protos), [1.0, 0.0])
    assert similarity_weights([-1.0, 0.0], protos)[0] == -1.0
    w = similarity_weights(np.array([1.0, 1.0]) / math.sqrt(2), protos)
    assert np.allclose(w, [0.7071, 0.7071], atol=1e-4)
    assert np.allclose(w, [math.sqrt(0.5)] * 2, atol=1e-6)


def test_zero_vectors_rejected():
    with pytest.raises(ZeroVector):
        similarity_weights([0.0, 0.0], np.eye(2))
    with pytest.raises(ZeroVector):
        similarity_weights([1.0, 0.0], np.array([[1.0, 0.0], [0.0, 0.0]]))


vectors = arrays(np.float64, 5, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3)


@given(vectors, st.floats(1e-3, 1e3))
def test_scale_invariance(v, c):
    protos = np.random.default_rng(0).normal(size=(4, 5))
    assert np.allclose(similarity_weights(c * v, protos), similarity_weights(v, protos), atol=1e-6)


def test_torch_weights_match_numpy(rng):
    protos = rng.normal(size=(3, 6))
    lat = rng.normal(size=(4, 6))
    wt = similarity_weights_torch(torch.from_numpy(lat), torch.from_numpy(protos)).numpy()
    wn = np.stack([similarity_weights(v, protos) for v in lat])
    assert np.allclose(wt, wn, atol=1e-12)


def test_compose_examples():
    masks = np.random.default_rng(0).random((4, 3, 5, 5))
    pe = compose_prior([1, 0, 0, 0], masks)
    assert pe.shape == (12, 5, 5)
    assert np.array_equal(pe[:3], masks[0]) and not pe[3:].any()
    assert not compose_prior(np.zeros(4), masks).any()
    ones = np.ones((2, 3, 4, 4))
    pe = compose_prior([0.5, -0.5], ones)
    assert (pe[:3] == 0.5).all() and (pe[3:] == -0.5).all()


def test_compose_rejects_mismatched_masks():
    with pytest.raises(ShapeMismatch):
        compose_prior([1, 1], [np.zeros((3, 4, 4)), np.zeros((3, 5, 5))])
    with pytest.raises(ShapeMismatch):
        compose_prior([1, 1, 1], np.zeros((2, 3, 4, 4)))


def test_compose_linearity_float64_exact_cases(rng):
    masks = rng.random((3, 3, 6, 6))
    w, v = rng.normal(size=3), rng.normal(size=3)
    lhs = compose_prior(2.0 * w + 3.0 * v, masks)
    rhs = 2.0 * compose_prior(w, masks) + 3.0 * compose_prior(v, masks)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_compose_torch_matches_numpy(rng):
    masks = rng.random((3, 2, 4, 4))
    w = rng.normal(size=(2, 3))
    out = compose_prior_torch(torch.from_numpy(w), torch.from_numpy(masks)).numpy()
    for i in range(2):
        assert np.allclose(out[i], compose_prior(w[i], masks), atol=1e-14)


def test_unet_shapes_and_errors():
    net = LightUNet(6, 3)
    out = net(torch.zeros(2, 6, 16, 16))
    assert out.shape == (2, 3, 16, 16)
    assert ((out >= 0) & (out <= 1)).all()
    with pytest.raises(ShapeMismatch):
        net(torch.zeros(1, 5, 16, 16))
    with pytest.raises(ShapeMismatch):
        net(torch.zeros(1, 6, 12, 12))


def test_generate_prompt_deterministic_and_constant_on_zero_input():
    torch.manual_seed(0)
    net = LightUNet(6, 3)
    pe = np.random.default_rng(0).random((6, 32, 32)).astype(np.float32)
    assert np.array_equal(generate_prompt(pe, net), generate_prompt(pe, net))
    # border effects reach ~44 px inward through the three levels; look past them
    out = generate_prompt(np.zeros((6, 128, 128), np.float32), net)
    interior = out[:, 48:-48, 48:-48]
    assert interior.var(axis=(1, 2)).max() < 1e-6


def test_unet_single_sample_overfit():
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    net = LightUNet(4, 2)
    pe = torch.from_numpy(rng.random((1, 4, 32, 32)).astype(np.float32))
    target = torch.zeros(1, 2, 32, 32)
    target[0, 0, 8:20, 6:26] = 1
    target[0, 1, 16:28, 10:22] = 1
    opt = torch.optim.Adam(net.parameters(), lr=1e-2)
    for _ in range(200):
        loss = pcm_loss(net(pe), target)
        opt.zero_grad()
        loss.backward()
        opt.step()
    pred = generate_prompt(pe[0].numpy(), net) > 0.5
    for c in range(2):
        assert dice(pred[c], target[0, c].numpy() > 0.5) >= 0.95


def test_pcm_loss_examples(rng):
    t = torch.from_numpy((rng.random((3, 8, 8)) < 0.5).astype(np.float64))
    assert float(pcm_loss(t.clone(), t)) <= 1e-5
    half = torch.zeros(3, 8, 8, dtype=torch.float64)
    half[:, :4] = 1
    bce = pcm_loss_terms(torch.full_like(half, 0.5), half)["bce"]
    assert float(bce) == pytest.approx(math.log(2), abs=1e-6)
    assert float(pcm_loss(1 - t, t)) > float(pcm_loss(t.clone(), t))
    with pytest.raises(ShapeMismatch):
        pcm_loss(torch.zeros(3, 8, 8), torch.zeros(2, 8, 8))


def test_pcm_loss_gradient_matches_finite_differences(rng):
    for _ in range(10):
        t = torch.from_numpy((rng.random((3, 8, 8)) < 0.5).astype(np.float64))
        p = rng.uniform(0.05, 0.95, size=t.shape)
        pt = torch.from_numpy(p.copy()).requires_grad_(True)
        pcm_loss(pt, t).backward()
        fd = finite_difference(lambda a: float(pcm_loss(torch.from_numpy(a), t)), p.copy())
        err = np.abs(pt.grad.numpy() - fd).max() / np.abs(fd).max()
        assert err <= 1e-3
