import numpy as np
import pytest
import torch
import torch.nn as nn

from alcn.model import ArchSpec, count_parameters, forward_denoiser, forward_noise_generator, init_params
from oracles import central_diff, rel_err

TOY_D = dict(kind="denoiser", in_channels=1, resolution=8, latent_dim=4, channel_widths=(2, 4))
TOY_G = dict(kind="noise_generator", in_channels=1, resolution=8, channel_widths=(2, 2))


def param_vector_fn(net, make_output, name):
    """f(theta) replacing parameter ``name`` with theta, evaluated in float64."""
    p = dict(net.named_parameters())[name]

    def f(theta):
        with torch.no_grad():
            saved = p.detach().clone()
            p.copy_(torch.from_numpy(theta.reshape(p.shape)))
            out = float(make_output())
            p.copy_(saved)
        return out

    return f, p.detach().numpy().ravel().copy()


def test_default_denoiser_shapes():
    net = init_params(ArchSpec.for_resolution("denoiser", 1, 28), seed=0)
    x = torch.rand(4, 1, 28, 28)
    out = forward_denoiser(net, x)
    assert out.shape == x.shape
    assert out.min() > 0 and out.max() < 1


@pytest.mark.parametrize("res,channels", [(28, 1), (32, 3), (256, 3)])
def test_denoiser_preserves_resolution(res, channels):
    net = init_params(ArchSpec.for_resolution("denoiser", channels, res), seed=0)
    x = torch.rand(1, channels, res, res)
    assert forward_denoiser(net, x).shape == x.shape


def test_noise_generator_open_interval():
    net = init_params(ArchSpec.for_resolution("noise_generator", 1, 28), seed=0)
    n = forward_noise_generator(net, torch.randn(8, 256))
    assert n.shape == (8, 1, 28, 28)
    assert n.min() > 0 and n.max() < 1


def test_zero_latent_gives_fixed_image():
    net = init_params(ArchSpec.for_resolution("noise_generator", 1, 28), seed=5)
    a = forward_noise_generator(net, torch.zeros(2, 256))
    b = forward_noise_generator(net, torch.zeros(2, 256))
    assert torch.equal(a, b)
    assert torch.equal(a[0], a[1])
    # zero biases propagate zeros to the final logits
    assert torch.allclose(a, torch.full_like(a, 0.5))


def test_init_deterministic_and_seed_sensitive():
    arch = ArchSpec.for_resolution("denoiser", 1, 28)
    a, b, c = init_params(arch, 3), init_params(arch, 3), init_params(arch, 4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)
    assert count_parameters(a) == count_parameters(b)
    biases = [p for n, p in a.named_parameters() if n.endswith("bias")]
    assert all(torch.count_nonzero(p) == 0 for p in biases)


def test_forward_is_pure():
    net = init_params(ArchSpec.for_resolution("denoiser", 1, 28), seed=0)
    x = torch.rand(2, 1, 28, 28)
    assert torch.equal(net(x), net(x))


def test_shape_errors():
    d = init_params(ArchSpec.for_resolution("denoiser", 1, 28), 0)
    with pytest.raises(ValueError, match="expects"):
        d(torch.rand(1, 1, 32, 32))
    g = init_params(ArchSpec.for_resolution("noise_generator", 1, 28), 0)
    with pytest.raises(ValueError, match="256"):
        g(torch.randn(2, 128))


def test_unsupported_resolution():
    with pytest.raises(ValueError, match="unsupported resolution"):
        ArchSpec(resolution=4, channel_widths=(8, 8, 8))


def test_count_parameters():
    assert count_parameters({}) == 0
    assert count_parameters(nn.Conv2d(1, 32, 3)) == 320
    assert count_parameters({"w": torch.zeros(3, 3, 1, 32), "b": torch.zeros(32)}) == 320


def test_toy_archs_are_small():
    assert count_parameters(init_params(ArchSpec(**TOY_D), 0)) <= 5000
    assert count_parameters(init_params(ArchSpec(**TOY_G), 0)) <= 5000


@pytest.mark.parametrize("seed", range(3))
def test_denoiser_weight_gradient_fd(seed):
    net = init_params(ArchSpec(**TOY_D), seed).double()
    x = torch.rand(2, 1, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    net.zero_grad()
    net(x).mean().backward()
    for name, p in net.named_parameters():
        f, theta = param_vector_fn(net, lambda: net(x).mean(), name)
        assert rel_err(p.grad.numpy().ravel(), central_diff(f, theta)) < 1e-3, name


def test_denoiser_input_gradient_fd():
    net = init_params(ArchSpec(**TOY_D), 1).double()
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
    net(x).mean().backward()
    base = x.detach().numpy().copy()

    def f(v):
        with torch.no_grad():
            return float(net(torch.from_numpy(v.reshape(base.shape))).mean())

    assert rel_err(x.grad.numpy().ravel(), central_diff(f, base.ravel())) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_noise_generator_gradient_fd(seed):
    net = init_params(ArchSpec(**TOY_G), seed).double()
    z = torch.randn(3, 256, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    net.zero_grad()
    net(z).mean().backward()
    for name, p in net.named_parameters():
        f, theta = param_vector_fn(net, lambda: net(z).mean(), name)
        assert rel_err(p.grad.numpy().ravel(), central_diff(f, theta)) < 1e-3, name
