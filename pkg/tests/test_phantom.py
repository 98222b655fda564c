import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from tomoreg.geometry import Grid3D, LandmarkSet
from tomoreg.phantom import (GaussianBump, PhantomError, PhantomSpec, Primitive, SyntheticDeformation,
                             apply_synthetic_deformation, landmark_tre, load_dirlab_image, load_dirlab_landmarks,
                             make_phantom)
from tomoreg.transforms import warp

GRID = Grid3D((24, 24, 24), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))


def spec(*prims, **kw):
    return PhantomSpec(GRID, list(prims), **kw)


class TestPhantom:
    def test_empty(self):
        vol, lm = make_phantom(spec())
        assert not vol.data.any() and len(lm) == 0

    def test_sphere_volume(self):
        r = 7.0
        vol, lm = make_phantom(spec(Primitive("ellipsoid", (11.5, 11.5, 11.5), (r, r, r), 2.0)))
        integral = float(vol.data.sum()) * GRID.voxel_volume
        assert abs(integral / (2.0 * 4 / 3 * math.pi * r ** 3) - 1) < 0.02
        assert len(lm) == 7  # centre plus six axis extremities

    def test_box_volume_exact_on_voxel_boundaries(self):
        vol, _ = make_phantom(spec(Primitive("box", (11.5, 11.5, 11.5), (4.0, 3.0, 2.0), 1.0)))
        assert math.isclose(float(vol.data.sum()), 8 * 6 * 4, rel_tol=1e-12)

    def test_two_beads(self):
        beads = [Primitive("bead", (6.0, 6.0, 6.0), (2.0, 2.0, 2.0), 1.0),
                 Primitive("bead", (17.0, 16.0, 15.0), (2.0, 2.0, 2.0), 1.0)]
        vol, lm = make_phantom(spec(*beads))
        assert np.allclose(lm.points, [[6, 6, 6], [17, 16, 15]])
        assert float(vol.data[6, 6, 6]) == 1.0 and float(vol.data[17, 16, 15]) == 1.0
        assert float(vol.data[11, 11, 11]) == 0.0

    def test_later_primitives_paint_over(self):
        vol, _ = make_phantom(spec(Primitive("box", (11.5, 11.5, 11.5), (8.0, 8.0, 8.0), 1.0),
                                   Primitive("box", (11.5, 11.5, 11.5), (2.0, 2.0, 2.0), 5.0)))
        assert float(vol.data[11, 11, 11]) == 5.0 and float(vol.data[6, 6, 6]) == 1.0

    def test_outside_grid_rejected(self):
        with pytest.raises(PhantomError):
            make_phantom(spec(Primitive("bead", (1.0, 1.0, 1.0), (3.0, 3.0, 3.0), 1.0)))

    def test_unknown_type(self):
        with pytest.raises(PhantomError):
            Primitive.from_dict({"type": "torus", "center": [0, 0, 0], "intensity": 1})

    def test_deterministic_texture(self):
        s = spec(Primitive("ellipsoid", (11.5, 11.5, 11.5), (8, 8, 8), 1.0), texture_amplitude=0.1, seed=3)
        a, _ = make_phantom(s)
        b, _ = make_phantom(s)
        assert torch.equal(a.data, b.data)
        other, _ = make_phantom(spec(*s.primitives, texture_amplitude=0.1, seed=4))
        assert not torch.equal(a.data, other.data)
        # texture stays inside the object
        assert not a.data[0, 0, 0]


def bump_deformation(**kw):
    return SyntheticDeformation(bumps=[GaussianBump((12.0, 12.0, 12.0), 5.0, (1.5, -1.0, 0.5))], **kw)


class TestDeformation:
    def test_identity(self):
        vol, lm = make_phantom(spec(Primitive("ellipsoid", (11.5, 11.5, 11.5), (6, 5, 4), 1.0)))
        out, moved, truth = apply_synthetic_deformation(vol, lm, SyntheticDeformation())
        assert torch.allclose(out.data, vol.data, atol=1e-12)
        assert np.allclose(moved.points, lm.points)

    def test_translation(self):
        vol, lm = make_phantom(spec(Primitive("bead", (10.0, 10.0, 10.0), (3.0, 3.0, 3.0), 1.0)))
        out, moved, truth = apply_synthetic_deformation(vol, lm, SyntheticDeformation(translation=(2.0, 0, 0)))
        assert np.allclose(moved.points, [[12, 10, 10]])
        assert torch.allclose(out.data[4:-4, :, :], vol.data[2:-6, :, :], atol=1e-12)

    def test_forward_matches_ode_solver(self):
        d = bump_deformation()
        x0 = np.array([[10.0, 13.0, 11.0], [14.0, 9.0, 12.5], [3.0, 4.0, 20.0]])
        fwd = d.forward(x0)
        for p, q in zip(x0, fwd):
            sol = solve_ivp(lambda t, y: d.velocity(y[None])[0], (0, 1), p, rtol=1e-12, atol=1e-12)
            assert np.abs(sol.y[:, -1] - q).max() < 1e-6

    @given(st.tuples(*[st.floats(4, 20)] * 3))
    def test_inverse_round_trip(self, p):
        d = bump_deformation(translation=(1.0, -2.0, 0.5), rotation_deg=(3.0, -2.0, 5.0), center=(12, 12, 12))
        x = np.asarray([p])
        assert np.abs(d.inverse(d.forward(x)) - x).max() < 1e-6

    def test_truth_map_round_trip(self):
        d = bump_deformation(translation=(1.0, 0.5, 0.0))
        vol, _ = make_phantom(spec())
        lm = LandmarkSet([[10.0, 12.0, 11.0], [13.0, 12.0, 14.0]])
        _, moved, truth = apply_synthetic_deformation(vol, lm, d)
        back = truth(moved.points).numpy()
        assert np.abs(back - lm.points).max() < 0.1
        assert landmark_tre(lm, moved, truth).mean < 0.1

    def test_warp_consistency(self):
        vol, lm = make_phantom(spec(Primitive("ellipsoid", (11.5, 11.5, 11.5), (6, 5, 4), 1.0)))
        out, _, truth = apply_synthetic_deformation(vol, lm, bump_deformation())
        assert torch.equal(out.data, warp(vol, truth).data)

    def test_folding_bound(self):
        d = SyntheticDeformation(bumps=[GaussianBump((12, 12, 12), 1.0, (3.0, 0.0, 0.0))])
        with pytest.raises(PhantomError):
            d.check()


class TestTre:
    def test_three_four_five(self):
        r = landmark_tre(LandmarkSet([[0, 0, 0], [1, 1, 1]]), LandmarkSet([[3, 4, 0], [1, 1, 1]]))
        assert np.allclose(r.distances, [5, 0]) and r.mean == 2.5
        assert np.allclose(r.per_axis, [1.5, 2.0, 0.0])
        assert r.as_dict()["count"] == 2

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            landmark_tre(LandmarkSet([[0, 0, 0]]), LandmarkSet(np.zeros((2, 3))))

    def test_empty(self):
        assert landmark_tre(LandmarkSet(np.zeros((0, 3))), LandmarkSet(np.zeros((0, 3)))).mean == 0.0

    def test_outside_domain(self):
        from tomoreg.transforms import DeformationMap
        phi = DeformationMap.identity(GRID)
        with pytest.raises(ValueError):
            landmark_tre(LandmarkSet([[0, 0, 0]]), LandmarkSet([[30.0, 0, 0]]), phi)


class TestDirLab:
    REF = Grid3D((10, 10, 10), (0.97, 0.97, 2.5), (0.0, 0.0, 0.0))

    def test_first_voxel_maps_to_origin(self, tmp_path):
        f = tmp_path / "lm.txt"
        f.write_text("1 1 1\n2\t3 4\n")
        lm = load_dirlab_landmarks(f, self.REF)
        assert np.allclose(lm.points, [[0, 0, 0], [0.97, 1.94, 7.5]])

    def test_empty_file(self, tmp_path):
        f = tmp_path / "lm.txt"
        f.write_text("\n")
        assert len(load_dirlab_landmarks(f, self.REF)) == 0

    def test_three_hundred_lines(self, tmp_path):
        rng = np.random.default_rng(0)
        idx = rng.integers(1, 100, size=(300, 3))
        f = tmp_path / "lm.txt"
        f.write_text("\n".join(" ".join(map(str, r)) for r in idx) + "\n")
        lm = load_dirlab_landmarks(f, self.REF)
        assert len(lm) == 300 and np.allclose(lm.points, (idx - 1) * np.array(self.REF.spacing))

    def test_parse_error_reports_line(self, tmp_path):
        f = tmp_path / "lm.txt"
        f.write_text("1 1 1\n2 2\n")
        with pytest.raises(ValueError, match=":2:"):
            load_dirlab_landmarks(f, self.REF)

    def test_raw_image(self, tmp_path):
        dims = (4, 3, 2)
        arr = np.arange(24, dtype="<i2")  # x fastest on disk
        f = tmp_path / "case.img"
        arr.tofile(f)
        vol = load_dirlab_image(f, dims, (1.0, 1.0, 2.5))
        assert vol.dims == dims
        assert float(vol.data[1, 0, 0]) == 1 and float(vol.data[0, 1, 0]) == 4 and float(vol.data[0, 0, 1]) == 12

    def test_raw_image_size_mismatch(self, tmp_path):
        f = tmp_path / "case.img"
        np.zeros(5, dtype="<i2").tofile(f)
        with pytest.raises(ValueError):
            load_dirlab_image(f, (2, 2, 2), (1, 1, 1))
