"""Command-line entry point: ``tomoreg <command> [options]``.

Numeric parameters live in JSON configs; flags carry only paths, stage
selection, seeds and thread counts. Every run writes its outputs plus a
``run.json`` provenance record under ``--out``.

Exit codes: 0 success, 1 usage or config error, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import scipy
import torch

from . import __version__
from .config import (RECON_SCHEMA, REGISTRATION_SCHEMA, SWEEP_SCHEMA, ConfigError, ReconConfig,
                     RegistrationConfig, geometry_from_dict, geometry_to_dict, validate)
from .geometry import Grid3D
from .io import (load_json, load_landmarks_csv, load_map, load_stack, load_volume, save_json,
                 save_landmarks_csv, save_map, save_stack, save_volume, write_metaimage)
from .optim import DivergenceError
from .phantom import (PhantomError, PhantomSpec, SyntheticDeformation, apply_synthetic_deformation,
                      landmark_tre, load_dirlab_landmarks, make_phantom)
from .projector import GeometryError, project_stack
from .reconstruction import reconstruct
from .registration import RegistrationResult, register_3d3d, register_affine, register_lddmm
from .sweep import SweepInputs, run_sweep, sweep_cells, write_csv
from .transforms import AffineParams, SingularTransformError

log = logging.getLogger("tomoreg")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _read_config(path: str, schema: dict) -> tuple[dict, Path]:
    """Load and validate a JSON config; returns it with its directory (for relative paths)."""
    p = Path(path)
    try:
        cfg = load_json(p)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p} is not valid JSON ({exc})") from None
    return validate(cfg, schema), p.parent


def _resolve(value, base: Path) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _geometry_dict(value, base: Path) -> dict:
    if isinstance(value, str):
        return load_json(_resolve(value, base))
    return value


def _pick(flag, cfg_paths: dict, key: str, base: Path, required: bool = True) -> Optional[Path]:
    if flag:
        return Path(flag)
    if key in cfg_paths:
        return _resolve(cfg_paths[key], base)
    if required:
        raise UsageError(f"missing input: pass --{key.replace('_', '-')} or set paths.{key} in the config")
    return None


def _landmarks(path: Path, reference):
    """CSV world coordinates, or DIR-Lab index text when the suffix is ``.txt``."""
    if path.suffix.lower() == ".txt":
        return load_dirlab_landmarks(path, reference)
    return load_landmarks_csv(path)


class Run:
    """Output directory plus the provenance record written on exit."""

    def __init__(self, args, command: str):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.record = {
            "command": command,
            "argv": sys.argv[1:],
            "seed": args.seed,
            "threads": args.threads,
            "versions": {"tomoreg": __version__, "python": platform.python_version(), "torch": torch.__version__,
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "configs": {},
            "outputs": [],
        }
        self.start = time.perf_counter()

    def config(self, name: str, obj) -> None:
        self.record["configs"][name] = obj

    def wrote(self, *paths) -> None:
        self.record["outputs"].extend(str(Path(p).relative_to(self.out)) for p in paths)

    def finish(self, status: str = "ok") -> None:
        self.record["status"] = status
        self.record["wall_time_s"] = time.perf_counter() - self.start
        save_json(self.out / "run.json", self.record)


def _history_csv(path: Path, result: RegistrationResult) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "total", "sim", "reg"])
        for i, h in enumerate(result.history):
            w.writerow([i, h.total, h.sim, h.reg])


def _params_dict(result: RegistrationResult) -> dict:
    d = {"kind": result.kind, "converged": result.converged, "message": result.message,
         "iterations": max(len(result.history) - 1, 0)}
    if result.kind == "affine":
        d.update(result.params.to_dict())
    else:
        d["kernel"] = {"sigmas_mm": list(result.kernel.sigmas), "weights": list(result.kernel.weights)}
        d["num_timesteps"] = result.num_timesteps
        d["momentum_file"] = "lddmm_momentum.mhd"
        if isinstance(result.initial, AffineParams):
            d["initial"] = result.initial.to_dict()
    return d


def _save_result(run: Run, result: RegistrationResult) -> None:
    k = result.kind
    run.wrote(save_map(run.out / f"{k}_map.mhd", result.phi), save_volume(run.out / f"{k}_warped.mhd", result.warped))
    save_json(run.out / f"{k}_params.json", _params_dict(result))
    _history_csv(run.out / f"{k}_loss.csv", result)
    run.wrote(run.out / f"{k}_params.json", run.out / f"{k}_loss.csv")
    if k == "lddmm":
        g = result.momentum_grid
        arr = result.params.detach().cpu().numpy().transpose(1, 2, 3, 0)
        run.wrote(write_metaimage(run.out / "lddmm_momentum.mhd", arr, g.spacing, g.origin, channels=3))


def _load_initial(path: Path) -> AffineParams:
    d = load_json(path)
    try:
        return AffineParams(torch.tensor(d["A"], dtype=torch.float64), torch.tensor(d["b"], dtype=torch.float64))
    except KeyError as exc:
        raise ConfigError(f"missing key {exc}", "/" + str(exc).strip("'")) from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_make_phantom(args) -> None:
    run = Run(args, "make-phantom")
    spec_dict = load_json(args.spec)
    run.config("phantom", spec_dict)
    vol, lm = make_phantom(PhantomSpec.from_dict(spec_dict))
    run.wrote(save_volume(run.out / "source.mhd", vol))
    save_landmarks_csv(run.out / "landmarks_moving.csv", lm)
    run.wrote(run.out / "landmarks_moving.csv")
    if args.deformation:
        d = load_json(args.deformation)
        run.config("deformation", d)
        target, moved, truth = apply_synthetic_deformation(vol, lm, SyntheticDeformation.from_dict(d))
        run.wrote(save_volume(run.out / "target.mhd", target), save_map(run.out / "truth_map.mhd", truth))
        save_landmarks_csv(run.out / "landmarks_fixed.csv", moved)
        run.wrote(run.out / "landmarks_fixed.csv")
    run.finish()


def cmd_project(args) -> None:
    run = Run(args, "project")
    gd = load_json(args.geometry)
    geom = geometry_from_dict(gd)
    run.config("geometry", gd)
    vol = load_volume(args.volume)
    stack = project_stack(vol, geom)
    run.wrote(*save_stack(run.out, stack))
    manifest = {"geometry": gd, "num_projections": len(stack), "files": [f"proj_{i:03d}.mhd" for i in range(len(stack))],
                "volume": str(args.volume)}
    if not geom.view_angles_deg:
        manifest["emitter_positions_mm"] = geometry_to_dict(geom)["emitters"]["positions"]
    save_json(run.out / "manifest.json", manifest)
    run.wrote(run.out / "manifest.json")
    run.finish()


def _registration_inputs(args):
    raw, base = _read_config(args.config, REGISTRATION_SCHEMA)
    cfg = RegistrationConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    paths = raw.get("paths", {})
    return raw, base, cfg, paths


def cmd_register(args) -> None:
    raw, base, cfg, paths = _registration_inputs(args)
    if args.out is None:
        if "output" not in paths:
            raise UsageError("missing output: pass --out or set paths.output in the config")
        args.out = str(_resolve(paths["output"], base))
    run = Run(args, "register")
    run.config("registration", raw)
    source = load_volume(_pick(args.volume, paths, "volume", base))
    mask_path = _pick(args.mask, paths, "mask", base, required=False)
    mask = load_volume(mask_path) if mask_path else None
    stages = ("affine", "lddmm") if args.stage == "both" else (args.stage,)
    initial = _load_initial(Path(args.initial)) if args.initial else None

    if args.target:
        target = load_volume(args.target)
        run_stage = lambda st, init: register_3d3d(source, target, cfg, st, init, mask)  # noqa: E731
    else:
        if "geometry" not in raw and not args.geometry:
            raise UsageError("3D/2D registration needs a geometry (config 'geometry' or --geometry)")
        gd = load_json(args.geometry) if args.geometry else _geometry_dict(raw["geometry"], base)
        geom = geometry_from_dict(gd)
        run.config("geometry", gd)
        stack = load_stack(_pick(args.stack, paths, "stack", base))

        def run_stage(st, init):
            if st == "affine":
                return register_affine(source, stack, geom, cfg, mask)
            return register_lddmm(source, stack, geom, init, cfg, mask)

    lm_paths = (_pick(args.landmarks_moving, paths, "landmarks_moving", base, required=False),
                _pick(args.landmarks_fixed, paths, "landmarks_fixed", base, required=False))
    if (lm_paths[0] is None) != (lm_paths[1] is None):
        raise UsageError("TRE needs both moving and fixed landmarks")

    results = {}
    for st in stages:
        res = run_stage(st, initial)
        if st == "affine":
            initial = res.params
        results[st] = res
        _save_result(run, res)
        log.info("%s: %s", st, res.message)

    if lm_paths[0] is not None:
        moving, fixed = (_landmarks(p, source) for p in lm_paths)
        report = {"initial": landmark_tre(moving, fixed).as_dict()}
        for st, res in results.items():
            report[st] = landmark_tre(moving, fixed, res.phi).as_dict()
        save_json(run.out / "tre.json", report)
        run.wrote(run.out / "tre.json")
        for k, v in report.items():
            print(f"{k:8s} tre_mean={v['tre_mean']:.3f} mm  (x {v['tre_x']:.3f}, y {v['tre_y']:.3f}, "
                  f"z {v['tre_z']:.3f})")
    run.finish()


def cmd_reconstruct(args) -> None:
    raw, _ = _read_config(args.config, RECON_SCHEMA)
    if "grid" not in raw:
        raise ConfigError("reconstruction needs a grid", "/grid")
    run = Run(args, "reconstruct")
    run.config("reconstruction", raw)
    gd = load_json(args.geometry)
    geom = geometry_from_dict(gd)
    run.config("geometry", gd)
    g = raw["grid"]
    grid = Grid3D(tuple(g["dims"]), tuple(g.get("spacing", (1.0, 1.0, 1.0))), tuple(g.get("origin", (0.0, 0.0, 0.0))))
    cfg = ReconConfig.from_dict({k: v for k, v in raw.items() if k != "grid"})
    stack = load_stack(args.stack)
    res = reconstruct(stack, geom, grid, cfg)
    run.wrote(save_volume(run.out / "reconstruction.mhd", res.volume))
    with (run.out / "recon_loss.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        w.writerows(enumerate(res.history))
    run.wrote(run.out / "recon_loss.csv")
    dyn = float(stack.images.max() - stack.images.min()) or 1.0
    resid = float((project_stack(res.volume, geom).images - stack.images.to(res.volume.data.dtype)).abs().mean())
    run.record["reprojection_residual_fraction"] = resid / dyn
    print(f"reprojection residual {100 * resid / dyn:.3f}% of dynamic range; {res.message}")
    run.finish()


def cmd_eval_landmarks(args) -> None:
    run = Run(args, "eval-landmarks")
    reference = load_volume(args.reference) if args.reference else None
    if reference is None and any(Path(p).suffix.lower() == ".txt" for p in (args.moving, args.fixed)):
        raise UsageError("DIR-Lab index files need --reference for spacing and origin")
    moving, fixed = _landmarks(Path(args.moving), reference), _landmarks(Path(args.fixed), reference)
    phi = load_map(args.map) if args.map else None
    report = landmark_tre(moving, fixed, phi)
    save_json(run.out / "tre.json", report.as_dict())
    np.savetxt(run.out / "distances.csv", report.distances, delimiter=",", header="distance_mm", comments="")
    run.wrote(run.out / "tre.json", run.out / "distances.csv")
    d = report.as_dict()
    print(f"tre_mean={d['tre_mean']:.3f} mm  (x {d['tre_x']:.3f}, y {d['tre_y']:.3f}, z {d['tre_z']:.3f}) "
          f"over {d['count']} landmarks")
    run.finish()


def cmd_sweep(args) -> None:
    raw, base = _read_config(args.config, SWEEP_SCHEMA)
    reg_raw = raw["registration"]
    reg_base = base
    if isinstance(reg_raw, str):
        reg_path = _resolve(reg_raw, base)
        reg_raw, reg_base = _read_config(str(reg_path), REGISTRATION_SCHEMA)
    cfg = RegistrationConfig.from_dict(reg_raw)
    if args.seed is not None:
        cfg.seed = args.seed
    if "geometry" not in reg_raw:
        raise ConfigError("the sweep needs a base geometry", "/registration/geometry")
    gd = _geometry_dict(reg_raw["geometry"], reg_base)
    geometry_from_dict(gd)
    paths = reg_raw.get("paths", {})
    run = Run(args, "sweep")
    run.config("sweep", raw)
    run.config("registration", reg_raw)
    source = load_volume(_pick(args.volume, paths, "volume", reg_base))
    target = load_volume(Path(args.target))
    moving = _landmarks(_pick(args.landmarks_moving, paths, "landmarks_moving", reg_base), source)
    fixed = _landmarks(_pick(args.landmarks_fixed, paths, "landmarks_fixed", reg_base), source)
    stages = tuple(raw.get("stages", ("affine", "lddmm")))
    cells = sweep_cells(raw.get("angles_deg", (3, 7, 11, 20, 30)), raw.get("angle_sweep_count", 4),
                        raw.get("counts", (2, 4, 8, 16)), raw.get("count_sweep_angle_deg", 11))
    inputs = SweepInputs(source, target, moving, fixed, gd, cfg, stages)

    def progress(res):
        tag = "FAILED " + res.error if res.error else " ".join(
            f"{r['stage']}={r['tre_mean']:.3f}" for r in res.rows)
        print(f"angle {res.cell.angle_deg:g} deg, {res.cell.num_proj} proj: {tag}", flush=True)

    results = run_sweep(inputs, cells, jobs=args.jobs, threads=args.threads or 1, progress=progress)
    run.wrote(write_csv(run.out / "sweep.csv", results))
    run.record["failed_cells"] = sum(r.error is not None for r in results)
    run.finish("ok" if not run.record["failed_cells"] else "partial")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (created if missing)")
    common.add_argument("--seed", type=int, default=None, help="seed for stochastic options")
    common.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="tomoreg", description="Projection-space registration and limited-angle reconstruction.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-phantom", parents=[common], help="rasterise a phantom (and its deformed copy)")
    s.add_argument("--spec", required=True, help="phantom spec JSON")
    s.add_argument("--deformation", help="synthetic deformation JSON; also writes target + fixed landmarks")
    s.set_defaults(func=cmd_make_phantom, needs_out=True)

    s = sub.add_parser("project", parents=[common], help="simulate one projection per emitter")
    s.add_argument("--volume", required=True)
    s.add_argument("--geometry", required=True)
    s.set_defaults(func=cmd_project, needs_out=True)

    s = sub.add_parser("register", parents=[common], help="3D/2D (or, with --target, 3D/3D) registration")
    s.add_argument("--config", required=True, help="registration config JSON")
    s.add_argument("--stage", choices=("affine", "lddmm", "both"), default="both")
    s.add_argument("--volume", help="moving volume (overrides paths.volume)")
    s.add_argument("--stack", help="projection directory (overrides paths.stack)")
    s.add_argument("--geometry", help="geometry JSON (overrides the config's geometry)")
    s.add_argument("--target", help="fixed volume: register volume-to-volume instead of to projections")
    s.add_argument("--mask", help="binary mask multiplied into the moving volume")
    s.add_argument("--initial", help="affine params JSON used to start the LDDMM stage")
    s.add_argument("--landmarks-moving", help="landmarks in the moving volume (CSV or DIR-Lab .txt)")
    s.add_argument("--landmarks-fixed", help="corresponding landmarks in the fixed frame")
    s.set_defaults(func=cmd_register, needs_out=False)

    s = sub.add_parser("reconstruct", parents=[common], help="iterative limited-angle reconstruction")
    s.add_argument("--config", required=True, help="reconstruction config JSON (with grid)")
    s.add_argument("--stack", required=True)
    s.add_argument("--geometry", required=True)
    s.set_defaults(func=cmd_reconstruct, needs_out=True)

    s = sub.add_parser("eval-landmarks", parents=[common], help="landmark distances, optionally through a map")
    s.add_argument("--moving", required=True)
    s.add_argument("--fixed", required=True)
    s.add_argument("--map", help="deformation map volume (pull-back, fixed -> moving)")
    s.add_argument("--reference", help="volume giving spacing/origin for DIR-Lab index files")
    s.set_defaults(func=cmd_eval_landmarks, needs_out=True)

    s = sub.add_parser("sweep", parents=[common], help="TRE versus angle range and projection count")
    s.add_argument("--config", required=True, help="sweep config JSON")
    s.add_argument("--volume", help="moving volume (overrides paths.volume)")
    s.add_argument("--target", required=True, help="fixed volume the projections are simulated from")
    s.add_argument("--landmarks-moving")
    s.add_argument("--landmarks-fixed")
    s.add_argument("--jobs", type=int, default=1, help="cells run in parallel")
    s.set_defaults(func=cmd_sweep, needs_out=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.needs_out and not args.out:
        parser.error(f"{args.command}: --out is required")
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        torch.set_num_threads(args.threads)
    if args.seed is not None:
        torch.manual_seed(args.seed)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        args.func(args)
    except (UsageError, ConfigError, PhantomError) as exc:
        print(f"tomoreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"tomoreg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, SingularTransformError, GeometryError, FloatingPointError,
            ArithmeticError) as exc:
        print(f"tomoreg: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # malformed input files surface as ValueError from the readers
        print(f"tomoreg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
