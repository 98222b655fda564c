"""File formats: MetaImage header + raw pairs, landmark CSV, JSON helpers."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Union

import numpy as np
import torch

from .geometry import Image2D, LandmarkSet, Volume3D

PathLike = Union[str, Path]

_TYPES = {"float32": "<f4", "float64": "<f8", "MET_FLOAT": "<f4", "MET_DOUBLE": "<f8",
          "MET_SHORT": "<i2", "MET_USHORT": "<u2", "MET_UCHAR": "u1", "MET_INT": "<i4"}


def read_header(path: PathLike) -> dict:
    header = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
    return header


def write_metaimage(path: PathLike, array: np.ndarray, spacing, origin=None, channels: int = 1,
                    element_type: str = "float64") -> Path:
    """Write ``array`` (spatial axes x, y[, z], then an optional channel axis) as ``.mhd`` + ``.raw``."""
    path = Path(path)
    if element_type not in ("float32", "float64"):
        raise ValueError("element_type must be float32 or float64")
    spatial = array.shape[:-1] if channels > 1 else array.shape
    ndims = len(spatial)
    origin = [0.0] * ndims if origin is None else list(origin)
    raw_path = path.with_suffix(".raw")
    # x fastest: reverse the spatial axes, keep channels innermost
    order = list(range(ndims))[::-1] + ([ndims] if channels > 1 else [])
    np.ascontiguousarray(np.transpose(array, order)).astype(_TYPES[element_type]).tofile(raw_path)
    lines = [
        "ObjectType = Image",
        f"NDims = {ndims}",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"Offset = {' '.join(repr(float(o)) for o in origin)}",
        f"ElementSpacing = {' '.join(repr(float(s)) for s in spacing)}",
        f"DimSize = {' '.join(str(int(d)) for d in spatial)}",
    ]
    if channels > 1:
        lines.append(f"ElementNumberOfChannels = {channels}")
    lines += [f"ElementType = {element_type}", f"ElementDataFile = {raw_path.name}"]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_metaimage(path: PathLike) -> tuple[np.ndarray, dict]:
    """Return ``(array, header)`` with spatial axes ordered x, y[, z] (channels last)."""
    path = Path(path)
    header = read_header(path)
    try:
        ndims = int(header["NDims"])
        dims = [int(d) for d in header["DimSize"].split()]
        etype = _TYPES[header["ElementType"]]
        data_file = header["ElementDataFile"]
    except KeyError as exc:
        raise ValueError(f"{path}: missing or unsupported header field {exc}") from None
    if len(dims) != ndims:
        raise ValueError(f"{path}: DimSize has {len(dims)} entries for NDims={ndims}")
    channels = int(header.get("ElementNumberOfChannels", 1))
    raw = np.fromfile(path.parent / data_file, dtype=etype)
    expected = int(np.prod(dims)) * channels
    if raw.size != expected:
        raise ValueError(f"{path}: expected {expected} elements, found {raw.size}")
    shape = dims[::-1] + ([channels] if channels > 1 else [])
    arr = raw.reshape(shape)
    order = list(range(ndims))[::-1] + ([ndims] if channels > 1 else [])
    return np.ascontiguousarray(np.transpose(arr, order)).astype(np.float64), header


def _floats(header: dict, key: str, n: int, default: float) -> tuple:
    if key not in header:
        return (default,) * n
    vals = tuple(float(v) for v in header[key].split())
    if len(vals) != n:
        raise ValueError(f"header field {key} has {len(vals)} values, expected {n}")
    return vals


def save_volume(path: PathLike, vol: Volume3D, element_type: str = "float64") -> Path:
    return write_metaimage(path, vol.data.detach().cpu().numpy(), vol.spacing, vol.origin, element_type=element_type)


def load_volume(path: PathLike) -> Volume3D:
    arr, header = read_metaimage(path)
    if arr.ndim != 3:
        raise ValueError(f"{path}: expected a 3D scalar volume")
    spacing = _floats(header, "ElementSpacing", 3, 1.0)
    origin = _floats(header, "Offset", 3, 0.0)
    return Volume3D(torch.from_numpy(arr), spacing, origin)


def save_image(path: PathLike, img: Image2D, element_type: str = "float64") -> Path:
    return write_metaimage(path, img.data.detach().cpu().numpy(), img.spacing, element_type=element_type)


def load_image(path: PathLike) -> Image2D:
    arr, header = read_metaimage(path)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a 2D image")
    return Image2D(torch.from_numpy(arr), _floats(header, "ElementSpacing", 2, 1.0))


def save_map(path: PathLike, phi) -> Path:
    """Store a deformation map as a 3-channel volume of world coordinates."""
    arr = phi.data.detach().cpu().numpy().transpose(1, 2, 3, 0)
    return write_metaimage(path, arr, phi.grid.spacing, phi.grid.origin, channels=3)


def load_map(path: PathLike):
    from .geometry import Grid3D
    from .transforms import DeformationMap

    arr, header = read_metaimage(path)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"{path}: expected a 3-channel volume")
    grid = Grid3D(arr.shape[:3], _floats(header, "ElementSpacing", 3, 1.0), _floats(header, "Offset", 3, 0.0))
    return DeformationMap(torch.from_numpy(np.ascontiguousarray(arr.transpose(3, 0, 1, 2))), grid)


def stack_paths(directory: PathLike) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"stack directory {directory} does not exist")
    paths = sorted(directory.glob("proj_*.mhd"))
    if not paths:
        raise FileNotFoundError(f"no proj_*.mhd images in {directory}")
    return paths


def load_stack(directory: PathLike):
    from .projector import ProjectionStack

    imgs = [load_image(p) for p in stack_paths(directory)]
    return ProjectionStack(torch.stack([i.data for i in imgs]), imgs[0].spacing)


def save_stack(directory: PathLike, stack, element_type: str = "float64") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [save_image(directory / f"proj_{i:03d}.mhd", stack[i], element_type) for i in range(len(stack))]


def save_landmarks_csv(path: PathLike, landmarks: LandmarkSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z"])
        for p in landmarks.points:
            w.writerow([repr(float(c)) for c in p])


def load_landmarks_csv(path: PathLike) -> LandmarkSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y", "z"]:
            raise ValueError(f"{path}: expected header x,y,z")
        pts = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                pts.append([float(c) for c in row])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric landmark row") from None
            if len(pts[-1]) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns")
    return LandmarkSet(np.asarray(pts).reshape(-1, 3))


def load_json(path: PathLike) -> dict:
    with open(path) as fh:
        return json.load(fh)


def save_json(path: PathLike, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
