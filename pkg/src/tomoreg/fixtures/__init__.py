"""Bundled synthetic fixture: phantom, deformation, geometries and tuned configs.

The files are plain JSON and can be copied and edited; :func:`path` returns the
on-disk location of one of them.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from ..geometry import LandmarkSet, Volume3D
from ..io import load_json
from ..phantom import PhantomSpec, SyntheticDeformation, apply_synthetic_deformation, make_phantom
from ..transforms import DeformationMap

NAMES = ("phantom.json", "deformation.json", "geometry_4x11.json", "geometry_31x12.json",
         "registration.json", "registration_volume.json", "recon.json", "sweep.json")


def path(name: str) -> Path:
    if name not in NAMES:
        raise KeyError(f"unknown fixture {name!r}; choose from {', '.join(NAMES)}")
    return Path(str(resources.files(__name__).joinpath(name)))


def load(name: str) -> dict:
    return load_json(path(name))


@dataclass
class SyntheticPair:
    """Source volume (moving) and its deformed copy (fixed) with matched landmarks."""

    source: Volume3D
    target: Volume3D
    landmarks_moving: LandmarkSet
    landmarks_fixed: LandmarkSet
    truth: DeformationMap


def synthetic_pair() -> SyntheticPair:
    vol, lm = make_phantom(PhantomSpec.from_dict(load("phantom.json")))
    deformation = SyntheticDeformation.from_dict(load("deformation.json"))
    target, lm_t, truth = apply_synthetic_deformation(vol, lm, deformation)
    return SyntheticPair(vol, target, lm, lm_t, truth)
