import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import rel_err
from tomoreg.geometry import Image2D
from tomoreg.similarity import (NgfConfig, auto_ngf_epsilon, l1, l1_tensor, l1_vjp, make_metric, ngf, ngf_map,
                                ngf_vjp, ssd, ssd_vjp)


def fd_grad(fn, a, step=1e-6, samples=15, seed=0):
    g = torch.Generator().manual_seed(seed)
    idx = torch.randperm(a.numel(), generator=g)[:samples]
    out = {}
    flat = a.reshape(-1)
    for i in idx.tolist():
        e = torch.zeros_like(flat)
        e[i] = step
        out[i] = (float(fn((flat + e).reshape(a.shape))) - float(fn((flat - e).reshape(a.shape)))) / (2 * step)
    return out


def smooth_image(seed, n=24):
    torch.manual_seed(seed)
    x = torch.linspace(-1, 1, n)
    X, Y = torch.meshgrid(x, x, indexing="ij")
    c = torch.randn(4)
    return c[0] * torch.sin(2 * X + c[1]) + c[2] * torch.cos(3 * Y * X) + c[3] * X * Y


class TestNgf:
    def test_identical_images(self):
        a = smooth_image(0)
        assert float(ngf(a, a, NgfConfig(0.01)).abs()) < 1e-15

    def test_constant_images(self):
        assert float(ngf(torch.full((6, 6), 2.0), torch.full((6, 6), -1.0), NgfConfig(0.1))) == 0.0

    def test_orthogonal_ramps(self):
        x = torch.arange(16.0)
        a = (5 * x)[:, None].expand(16, 16)
        b = (5 * x)[None, :].expand(16, 16)
        eps = 0.01
        per_pixel = ngf_map(a, b, eps)
        expect = 1 - (eps ** 2 / (math.sqrt(25 + eps ** 2) * math.sqrt(25 + eps ** 2))) ** 2
        assert torch.allclose(per_pixel, torch.full_like(per_pixel, expect), atol=1e-14)
        assert float(ngf(a, b, NgfConfig(eps))) > 0.999

    @given(st.integers(0, 1000))
    def test_range(self, seed):
        torch.manual_seed(seed)
        v = float(ngf(torch.randn(10, 12), torch.randn(10, 12), NgfConfig(0.05)))
        assert 0.0 <= v <= 1.0

    @given(st.floats(-50, 50))
    def test_offset_invariance_exact(self, beta):
        a, b = smooth_image(1), smooth_image(2)
        cfg = NgfConfig(0.02)
        assert abs(float(ngf(a + beta, b, cfg)) - float(ngf(a, b, cfg))) < 1e-12

    @pytest.mark.parametrize("eps", [1e-2, 1e-3, 1e-4])
    def test_scale_invariance_within_epsilon(self, eps):
        a, b = smooth_image(3), smooth_image(4)
        cfg = NgfConfig(eps)
        diff = abs(float(ngf(7.0 * a, b, cfg)) - float(ngf(a, b, cfg)))
        assert diff < 50 * eps  # tends to 0 with epsilon

    def test_spacing_respected(self):
        a, b = smooth_image(5), smooth_image(6)
        img_a, img_b = Image2D(a, (2.0, 0.5)), Image2D(b, (2.0, 0.5))
        assert not math.isclose(float(ngf(img_a, img_b, NgfConfig(0.01))), float(ngf(a, b, NgfConfig(0.01))))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ngf(torch.zeros(3, 3), torch.zeros(3, 4), NgfConfig(0.1))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            NgfConfig(0.0)
        with pytest.raises(ValueError):
            NgfConfig(0.1, "cubic")

    def test_vjp_zero_at_match(self):
        a = smooth_image(7)
        g = ngf_vjp(a, a, NgfConfig(0.01), 1.0)
        assert float(g[2:-2, 2:-2].abs().max()) < 1e-8

    def test_vjp_zero_upstream(self):
        assert not ngf_vjp(smooth_image(8), smooth_image(9), NgfConfig(0.01), 0.0).any()

    @pytest.mark.parametrize("variant", ["squared", "linear"])
    def test_vjp_finite_differences(self, variant):
        a, b = smooth_image(10), smooth_image(11)
        cfg = NgfConfig(0.05, variant)
        g = ngf_vjp(a, b, cfg, 1.3)
        scale = float(g.abs().max())
        for i, fd in fd_grad(lambda x: 1.3 * ngf(x, b, cfg), a).items():
            assert abs(fd - float(g.reshape(-1)[i])) <= 1e-4 * max(abs(fd), 1e-2 * scale)

    def test_auto_epsilon(self):
        x = torch.arange(10.0)
        ramp = (3.0 * x)[None, :, None].expand(2, 10, 10)  # stack of two images, gradient 3 along w
        assert math.isclose(auto_ngf_epsilon(ramp), 0.03, rel_tol=1e-6)


class TestSsdL1:
    def test_identical(self):
        a = smooth_image(12)
        assert float(ssd(a, a)) == 0.0 and float(l1(a, a)) == 0.0

    def test_constant_offset(self):
        a = smooth_image(13)
        assert math.isclose(float(ssd(a + 1.5, a)), 2.25, rel_tol=1e-12)
        assert math.isclose(float(l1(a - 1.5, a)), 1.5, rel_tol=1e-12)

    def test_ssd_vjp_closed_form(self):
        torch.manual_seed(14)
        a, b = torch.randn(7, 9), torch.randn(7, 9)
        g = ssd_vjp(a, b, 1.0)
        assert rel_err(g, 2 * (a - b) / a.numel()) < 1e-14
        for i, fd in fd_grad(lambda x: ssd(x, b), a).items():
            assert abs(fd - float(g.reshape(-1)[i])) <= 1e-6 * abs(fd)

    def test_l1_subgradient_zero_at_zero_residual(self):
        a = torch.randn(4, 4)
        b = a.clone()
        b[0, 0] += 1.0
        g = l1_vjp(a, b, 1.0)
        assert float(g[0, 0]) == -1.0 / 16 and not g.reshape(-1)[1:].any()

    def test_l1_smoothing(self):
        a, b = torch.zeros(2, 2), torch.zeros(2, 2)
        assert math.isclose(float(l1_tensor(a, b, smooth=1e-6)), 1e-6)

    def test_make_metric(self):
        with pytest.raises(ValueError):
            make_metric("mi")
        with pytest.raises(ValueError):
            make_metric("ngf")
        m = make_metric("ssd", spacing=(1, 1, 1))
        assert m(torch.ones(2, 3, 3, 3), torch.zeros(2, 3, 3, 3)).shape == (2,)
