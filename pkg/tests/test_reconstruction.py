import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_geometry, small_grid
from tomoreg.config import ConfigError, ReconConfig
from tomoreg.geometry import Volume3D
from tomoreg.projector import project_stack
from tomoreg.reconstruction import (ReconObjective, intensity_scale, positivity_penalty, positivity_penalty_vjp,
                                    reconstruct, tv_norm, tv_norm_vjp)


def random_volume(seed, n=6, spacing=(1.0, 2.0, 0.5)):
    g = torch.Generator().manual_seed(seed)
    return Volume3D(torch.randn((n, n, n), generator=g), spacing)


class TestTv:
    @given(st.floats(-10, 10), st.floats(1e-6, 1.0))
    def test_constant_volume(self, c, eps):
        vol = Volume3D(torch.full((4, 5, 3), c))
        assert math.isclose(float(tv_norm(vol, eps)), eps, rel_tol=1e-12)

    def test_single_step(self):
        data = torch.zeros(4, 1, 1)
        data[2:] = 3.0
        vol = Volume3D(data, (2.0, 1.0, 1.0))
        eps = 1e-3
        # one voxel carries |grad| = 3/2, the other three only eps
        expect = (math.sqrt(1.5 ** 2 + eps ** 2) + 3 * eps) / 4
        assert math.isclose(float(tv_norm(vol, eps)), expect, rel_tol=1e-12)

    def test_ramp_uses_spacing(self):
        x = torch.arange(5.0)
        vol = Volume3D(x[None, None, :].expand(3, 3, 5).clone(), (1.0, 1.0, 0.5))
        # interior |grad| = 2, last slice has zero flux
        assert math.isclose(float(tv_norm(vol, 0.0)), 2.0 * 4 / 5, rel_tol=1e-12)

    def test_vjp_finite_differences(self):
        vol = random_volume(0)
        eps = 0.1
        g = tv_norm_vjp(vol, eps, 1.0)
        flat = vol.data.reshape(-1)
        for i in torch.randperm(flat.numel())[:15].tolist():
            e = torch.zeros_like(flat)
            e[i] = 1e-6
            fd = (float(tv_norm(vol.with_data((flat + e).reshape(vol.dims)), eps))
                  - float(tv_norm(vol.with_data((flat - e).reshape(vol.dims)), eps))) / 2e-6
            assert abs(fd - float(g.reshape(-1)[i])) < 1e-6 * max(1.0, abs(fd))


class TestPositivity:
    def test_values(self):
        vol = Volume3D(torch.tensor([[[1.0, -2.0], [0.0, -0.5]]]))
        assert float(positivity_penalty(vol)) == 2.5 / 4

    def test_nonnegative_volume_is_free(self):
        assert float(positivity_penalty(Volume3D(torch.rand(3, 3, 3)))) == 0.0

    def test_vjp(self):
        vol = Volume3D(torch.tensor([[[1.0, -2.0], [3.0, -0.5]]]))
        g = positivity_penalty_vjp(vol, 2.0)
        assert torch.equal(g, torch.tensor([[[0.0, -0.5], [0.0, -0.5]]]))

    def test_zero_voxels_resist_going_negative(self):
        # one-sided subgradient at the kink
        g = positivity_penalty_vjp(Volume3D(torch.zeros(1, 1, 2)), 1.0)
        assert torch.equal(g, torch.tensor([[[-0.5, -0.5]]]))


def phantom(grid):
    x = grid.coordinates()
    c = torch.tensor(grid.center)
    r2 = sum((x[i] - c[i]) ** 2 for i in range(3))
    return Volume3D((r2 < (0.3 * grid.extent[0]) ** 2).double(), grid.spacing, grid.origin)


class TestReconstruct:
    def test_zero_stack(self):
        grid, geom = small_grid(8), small_geometry(3, pixels=(12, 12), planes=8)
        res = reconstruct(torch.zeros(3, 12, 12), geom, grid, ReconConfig(max_iters=20))
        assert float(res.volume.data.abs().max()) < 1e-9

    def test_monotone_loss_and_residual(self):
        grid, geom = small_grid(8), small_geometry(5, pixels=(12, 12), planes=8, spread=60.0)
        stack = project_stack(phantom(grid), geom)
        res = reconstruct(stack, geom, grid, ReconConfig(max_iters=200, lambda_tv=0.01, lambda_positivity=1.0))
        assert all(b <= a for a, b in zip(res.history, res.history[1:]))
        back = project_stack(res.volume, geom).images
        rng = float(stack.images.max() - stack.images.min())
        assert float((back - stack.images).abs().mean()) < 0.02 * rng

    def test_positivity_weight(self):
        grid, geom = small_grid(8), small_geometry(3, pixels=(12, 12), planes=8, spread=60.0)
        stack = project_stack(phantom(grid), geom)
        res = reconstruct(stack, geom, grid, ReconConfig(max_iters=60, lambda_positivity=1e4, lambda_tv=0.0))
        data = res.volume.data
        assert float((data < -1e-3 * float(data.max())).double().mean()) < 1e-3

    def test_objective_gradient(self):
        grid, geom = small_grid(6), small_geometry(2, pixels=(10, 10), planes=6)
        targets = project_stack(phantom(grid), geom).images
        cfg = ReconConfig(lambda_positivity=10.0, lambda_tv=0.5, l1_smoothing=1e-2)
        obj = ReconObjective(targets, geom, grid, cfg, tv_eps=0.05)
        torch.manual_seed(3)
        x = 0.3 * torch.randn(grid.dims).reshape(-1)
        _, g = obj(x)
        for i in torch.randperm(x.numel())[:20].tolist():
            e = torch.zeros_like(x)
            e[i] = 1e-7
            fd = (obj(x + e)[0] - obj(x - e)[0]) / 2e-7
            assert abs(fd - float(g[i])) <= 1e-3 * max(abs(fd), 1e-3 * float(g.abs().max())), i

    def test_mismatched_stack(self):
        grid, geom = small_grid(6), small_geometry(2, pixels=(10, 10), planes=6)
        with pytest.raises(ValueError):
            reconstruct(torch.zeros(3, 10, 10), geom, grid)

    def test_intensity_scale(self):
        geom = small_geometry(1, planes=10, dz=2.0)
        assert intensity_scale(torch.full((1, 20, 20), 4.0), geom) == 0.2
        assert intensity_scale(torch.zeros(1, 20, 20), geom) == 1.0

    def test_negative_weights_rejected(self):
        with pytest.raises(ConfigError):
            ReconConfig(lambda_tv=-1.0)
