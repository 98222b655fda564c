import copy

import numpy as np
import pytest
import torch

from tomoreg import fixtures
from tomoreg.config import (DEFORMATION_SCHEMA, PHANTOM_SCHEMA, SWEEP_SCHEMA, ConfigError, ReconConfig,
                            RegistrationConfig, geometry_from_dict, geometry_to_dict, validate, with_emitters)
from tomoreg.geometry import Grid3D, Image2D, LandmarkSet, Volume3D
from tomoreg.io import (load_image, load_landmarks_csv, load_map, load_stack, load_volume, read_header,
                        read_metaimage, save_image, save_landmarks_csv, save_map, save_stack, save_volume)
from tomoreg.projector import ProjectionStack
from tomoreg.transforms import DeformationMap


class TestMetaImage:
    @pytest.mark.parametrize("etype", ["float32", "float64"])
    def test_volume_round_trip(self, tmp_path, etype):
        torch.manual_seed(0)
        vol = Volume3D(torch.randn(5, 4, 3), (0.5, 1.0, 2.5), (-3.0, 1.0, 7.25))
        save_volume(tmp_path / "v.mhd", vol, etype)
        back = load_volume(tmp_path / "v.mhd")
        assert back.spacing == vol.spacing and back.origin == vol.origin
        if etype == "float64":
            assert torch.equal(back.data, vol.data)
        else:
            assert torch.equal(back.data, vol.data.float().double())

    def test_axis_order_on_disk(self, tmp_path):
        data = torch.arange(24.0).reshape(2, 3, 4)
        save_volume(tmp_path / "v.mhd", Volume3D(data))
        raw = np.fromfile(tmp_path / "v.raw", dtype="<f8")
        # x varies fastest
        assert raw[1] == float(data[1, 0, 0]) and raw[2] == float(data[0, 1, 0])
        assert read_header(tmp_path / "v.mhd")["DimSize"] == "2 3 4"

    def test_map_round_trip(self, tmp_path):
        grid = Grid3D((3, 4, 5), (1.0, 2.0, 0.5), (1.0, 0.0, -2.0))
        phi = DeformationMap(grid.coordinates() + torch.randn(3, *grid.dims), grid)
        save_map(tmp_path / "m.mhd", phi)
        back = load_map(tmp_path / "m.mhd")
        assert back.grid == grid and torch.equal(back.data, phi.data)

    def test_image_and_stack(self, tmp_path):
        stack = ProjectionStack(torch.randn(3, 6, 5), (2.0, 1.5))
        paths = save_stack(tmp_path / "s", stack)
        assert [p.name for p in paths] == ["proj_000.mhd", "proj_001.mhd", "proj_002.mhd"]
        back = load_stack(tmp_path / "s")
        assert torch.equal(back.images, stack.images) and back.spacing == (2.0, 1.5)
        save_image(tmp_path / "i.mhd", Image2D(stack.images[0], (2.0, 1.5)))
        assert load_image(tmp_path / "i.mhd").dims == (6, 5)

    def test_missing_stack(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_stack(tmp_path / "nope")
        (tmp_path / "empty").mkdir()
        with pytest.raises(FileNotFoundError):
            load_stack(tmp_path / "empty")

    def test_truncated_raw(self, tmp_path):
        save_volume(tmp_path / "v.mhd", Volume3D(torch.zeros(2, 2, 2)))
        np.zeros(3).tofile(tmp_path / "v.raw")
        with pytest.raises(ValueError):
            read_metaimage(tmp_path / "v.mhd")

    def test_wrong_rank(self, tmp_path):
        save_image(tmp_path / "i.mhd", Image2D(torch.zeros(2, 2)))
        with pytest.raises(ValueError):
            load_volume(tmp_path / "i.mhd")


class TestLandmarkCsv:
    def test_round_trip_exact(self, tmp_path):
        lm = LandmarkSet(np.random.default_rng(0).normal(size=(7, 3)) * 50)
        save_landmarks_csv(tmp_path / "l.csv", lm)
        assert np.array_equal(load_landmarks_csv(tmp_path / "l.csv").points, lm.points)

    def test_bad_header(self, tmp_path):
        (tmp_path / "l.csv").write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError):
            load_landmarks_csv(tmp_path / "l.csv")

    def test_bad_row_reports_line(self, tmp_path):
        (tmp_path / "l.csv").write_text("x,y,z\n1,2,3\n1,two,3\n")
        with pytest.raises(ValueError, match=":3:"):
            load_landmarks_csv(tmp_path / "l.csv")


def geometry_dict(**emitters):
    d = copy.deepcopy(fixtures.load("geometry_4x11.json"))
    d["emitters"].update(emitters)
    return d


class TestConfig:
    @pytest.mark.parametrize("name", fixtures.NAMES)
    def test_fixtures_load(self, name):
        assert isinstance(fixtures.load(name), dict)

    def test_unknown_fixture(self):
        with pytest.raises(KeyError):
            fixtures.path("nope.json")

    def test_pointer_in_error(self):
        d = geometry_dict()
        d["receiver"]["pixels"] = [112, -1]
        with pytest.raises(ConfigError) as exc:
            geometry_from_dict(d)
        assert exc.value.pointer == "/receiver/pixels/1"

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RegistrationConfig.from_dict({"optimiser": {}})

    def test_width_mismatch(self):
        d = geometry_dict()
        d["receiver"]["width_mm"] = 200.0
        with pytest.raises(ConfigError) as exc:
            geometry_from_dict(d)
        assert exc.value.pointer == "/receiver/width_mm"

    def test_wide_arc_rejected(self):
        with pytest.raises(ConfigError):
            geometry_from_dict(geometry_dict(angle_range_deg=180.0))

    def test_rotate_mode(self):
        g = geometry_from_dict(geometry_dict(mode="rotate", count=5, angle_range_deg=180.0,
                                             isocenter_mm=[0, 0, 64]))
        assert g.view_angles_deg == pytest.approx((-90, -45, 0, 45, 90))
        with pytest.raises(ConfigError):
            geometry_to_dict(g)

    def test_arc_emitters(self):
        g = geometry_from_dict(fixtures.load("geometry_4x11.json"))
        assert g.num_views == 4
        e = np.asarray(g.emitters)
        assert np.allclose(e[:, 2], 1000.0) and not e[:, 1].any()  # linear track at height d
        spread = np.degrees(np.arctan2(e[:, 0], e[:, 2]))
        assert spread.max() - spread.min() == pytest.approx(11.0)

    def test_explicit_round_trip(self):
        g = geometry_from_dict(fixtures.load("geometry_4x11.json"))
        back = geometry_from_dict(geometry_to_dict(g))
        assert np.allclose(back.emitters, g.emitters) and back.receiver_pixels == g.receiver_pixels

    def test_explicit_count_mismatch(self):
        d = geometry_dict(mode="explicit", positions=[[0, 0, 100]], count=2)
        with pytest.raises(ConfigError):
            geometry_from_dict(d)

    def test_emitter_below_receiver(self):
        with pytest.raises(ConfigError):
            geometry_from_dict(geometry_dict(mode="explicit", positions=[[0, 0, -5]]))

    def test_with_emitters(self):
        d = fixtures.load("geometry_4x11.json")
        g = geometry_from_dict(with_emitters(d, 8, 30.0))
        assert g.num_views == 8
        assert d["emitters"]["count"] == 4  # original untouched

    def test_registration_fixture(self):
        cfg = RegistrationConfig.from_dict(fixtures.load("registration.json"))
        assert cfg.affine.method == "sgd" and cfg.lddmm.method == "lbfgs"
        assert cfg.kernel.grid_factor == 2

    def test_stage_error_pointer(self):
        with pytest.raises(ConfigError) as exc:
            RegistrationConfig.from_dict({"optimizer": {"lddmm": {"max_iters": 0}}})
        assert exc.value.pointer.startswith("/optimizer/lddmm")

    def test_kernel_weight_length(self):
        with pytest.raises(ConfigError):
            RegistrationConfig.from_dict({"kernel": {"sigmas_mm": [1, 2], "weights": [1.0]}})

    def test_recon_fixture(self):
        cfg = ReconConfig.from_dict(fixtures.load("recon.json"))
        assert cfg.max_iters > 0

    @pytest.mark.parametrize("name,schema", [("phantom.json", PHANTOM_SCHEMA),
                                             ("deformation.json", DEFORMATION_SCHEMA),
                                             ("sweep.json", SWEEP_SCHEMA)])
    def test_schemas_accept_fixtures(self, name, schema):
        validate(fixtures.load(name), schema)

    def test_bead_requires_radius(self):
        d = {"grid": {"dims": [4, 4, 4]}, "primitives": [{"type": "bead", "center": [1, 1, 1], "intensity": 1}]}
        with pytest.raises(ConfigError):
            validate(d, PHANTOM_SCHEMA)
