import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from alcn.corruption import AlphaPolicy, NoiseStrategy, apply_strategy, blend, sample_alpha, sample_latent

unit = st.floats(0.0, 1.0, allow_nan=False, width=32)
imgs = arrays(np.float32, (2, 1, 4, 4), elements=unit)


def t(a):
    return torch.from_numpy(np.asarray(a, dtype=np.float32))


def test_blend_limits_and_arithmetic():
    x, n = torch.rand(2, 1, 5, 5), torch.rand(2, 1, 5, 5)
    assert torch.equal(blend(x, n, 1.0), x)
    assert torch.equal(blend(x, n, 0.0), n)
    assert blend(torch.tensor([0.2]), torch.tensor([0.6]), 0.5).item() == pytest.approx(0.4)


def test_blend_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        blend(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 5, 5), 0.5)


def test_blend_differentiable_in_all_arguments():
    x = torch.rand(1, 1, 3, 3, requires_grad=True)
    n = torch.rand(1, 1, 3, 3, requires_grad=True)
    a = torch.tensor(0.3, requires_grad=True)
    blend(x, n, a).sum().backward()
    assert torch.allclose(x.grad, torch.full_like(x, 0.3))
    assert torch.allclose(n.grad, torch.full_like(n, 0.7))
    assert a.grad.item() == pytest.approx(float((x - n).sum().detach()), rel=1e-5)


@settings(max_examples=200, deadline=None)
@given(x=imgs, n=imgs, alpha=st.floats(0.0, 1.0))
def test_blend_within_convex_hull(x, n, alpha):
    out = blend(t(x), t(n), alpha).numpy()
    tol = 1e-6
    assert (out >= np.minimum(x, n) - tol).all() and (out <= np.maximum(x, n) + tol).all()
    assert (out >= -tol).all() and (out <= 1 + tol).all()


@settings(max_examples=200, deadline=None)
@given(x=imgs, d=imgs, n=imgs, alpha=st.floats(0.0, 1.0))
def test_blend_monotone_in_image(x, d, n, alpha):
    x2 = np.minimum(x + d, 1.0)
    assert (blend(t(x), t(n), alpha) <= blend(t(x2), t(n), alpha)).all()


@settings(max_examples=200, deadline=None)
@given(x=imgs, n=arrays(np.float32, (2, 1, 4, 4), elements=st.floats(0.015625, 0.984375, width=32)),
       a1=st.floats(0.2, 0.9), a2=st.floats(0.2, 0.9))
def test_no_fixed_noise_saturates_for_every_alpha(x, n, a1, a2):
    # with alpha re-drawn each step a fixed n gives different corruptions wherever x != n
    if abs(a1 - a2) < 1e-3 or np.abs(x - n).max() < 1e-3:
        return
    assert not torch.equal(blend(t(x), t(n), a1), blend(t(x), t(n), a2))


def test_saturating_noise_is_out_of_reach():
    # the noise driving every blended pixel to 1 is (1 - a x) / (1 - a) >= 1: it depends on
    # alpha and lies outside the open sigmoid range wherever the image is not already 1
    x = torch.tensor([[[[0.0, 0.5, 1.0]]]], dtype=torch.float64)
    n_star = {a: (1 - a * x) / (1 - a) for a in (0.3, 0.6)}
    assert torch.allclose(blend(x, n_star[0.3], 0.3), torch.ones_like(x))
    assert not torch.allclose(n_star[0.3], n_star[0.6])
    assert (n_star[0.3][..., :2] > 1).all()


def test_alpha_bounds_exact():
    rng = np.random.default_rng(0)
    draws = np.array([sample_alpha(AlphaPolicy(), rng) for _ in range(10_000)])
    assert draws.min() >= 0.2 and draws.max() <= 0.9


def test_alpha_mean():
    # Uniform(0.2, 0.9) has mean 0.55; std of the mean over 1e5 draws is ~6.4e-4
    rng = np.random.default_rng(1)
    draws = [sample_alpha(AlphaPolicy(), rng) for _ in range(100_000)]
    assert abs(np.mean(draws) - 0.55) < 0.01


def test_alpha_reproducible_and_per_sample():
    a = [sample_alpha(AlphaPolicy(), np.random.default_rng(7)) for _ in range(3)]
    b = [sample_alpha(AlphaPolicy(), np.random.default_rng(7)) for _ in range(3)]
    assert a == b
    per = sample_alpha(AlphaPolicy(per_sample=True), np.random.default_rng(0), 5)
    assert per.shape == (5,)


def test_alpha_policy_validation():
    with pytest.raises(ValueError):
        AlphaPolicy(0.9, 0.2)
    with pytest.raises(ValueError):
        AlphaPolicy(0.0, 0.5)


def test_latent_statistics():
    z = sample_latent(4096, np.random.default_rng(0))
    assert z.shape == (4096, 256)
    # ~1M draws: std error of the mean ~1e-3, of the variance ~1.4e-3
    assert abs(float(z.mean())) < 0.01
    assert abs(float(z.var()) - 1.0) < 0.02
    assert sample_latent(7, np.random.default_rng(0)).shape == (7, 256)
    assert torch.equal(sample_latent(3, np.random.default_rng(5)), sample_latent(3, np.random.default_rng(5)))


def test_strategy_identities():
    x = torch.rand(2, 1, 6, 6)
    rng = np.random.default_rng(0)
    assert torch.equal(apply_strategy(NoiseStrategy("none"), x, rng), x)
    assert torch.equal(apply_strategy(NoiseStrategy("blackout", p=0.0), x, rng), x)
    assert torch.equal(apply_strategy(NoiseStrategy("speckle", p=0.0), x, rng), x)
    assert torch.equal(apply_strategy(NoiseStrategy("gaussian", sigma=0.0), x, rng), x)
    assert torch.equal(apply_strategy(NoiseStrategy("blackout", p=1.0), x, rng), torch.zeros_like(x))


def test_strategy_ranges_and_rates():
    x = torch.full((1, 1, 100, 100), 0.5)
    rng = np.random.default_rng(0)
    sp = apply_strategy(NoiseStrategy("speckle", p=0.2), x, rng)
    assert 0.15 < float((sp != 0.5).float().mean()) < 0.25
    g = apply_strategy(NoiseStrategy("gaussian", sigma=0.5), x, rng)
    assert g.min() >= 0 and g.max() <= 1
    bo = apply_strategy(NoiseStrategy("blackout", p=0.3), x, rng)
    assert 0.25 < float((bo == 0).float().mean()) < 0.35


def test_strategy_alcn_rejected():
    with pytest.raises(ValueError, match="train_step"):
        apply_strategy(NoiseStrategy("alcn"), torch.zeros(1, 1, 2, 2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        NoiseStrategy("salt")
