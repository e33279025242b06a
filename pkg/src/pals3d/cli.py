"""Command-line interface: phantom/simulate/reconstruct/gradcheck/metrics/export.

Exit codes: 0 success, 1 validation error, 2 numerical failure. Failures
print one machine-parsable line `error:<kind>:<message>` on stderr.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .basis import KIND_ELLIPSOIDAL, KINDS
from .errors import (
    BarrierViolation,
    ConfigError,
    DomainError,
    OptimizationError,
    PalsError,
    SingularBasisError,
)
from .gradcheck import FAMILIES, gradcheck
from .grid import GridSpec, binarize
from .harness import NoiseSpec, builtin_phantom, compare, simulate, voxelize
from .field import field_eval
from .solver import (
    DipTerm,
    GNConfig,
    PcTerm,
    RBFSchedule,
    SfsTerm,
    joint_objective,
    reconstruct,
)

log = logging.getLogger("pals3d.cli")

_GRID_SCHEMA = {"dims": list, "origin": list, "extent": list}
_GN_SCHEMA = {
    "it_gn": int,
    "lambda0": float,
    "lambda_decay": float,
    "armijo_c": float,
    "armijo_shrink": float,
    "armijo_max": int,
    "barrier_weight": float,
}
_SCHED_SCHEMA = {
    "p0": int,
    "p": int,
    "outer_iters": int,
    "init_radius": float,
    "add_radius": float,
    "min_spacing_cells": int,
    "binarize_threshold": float,
}
_NOISE_SCHEMA = {
    "data_sigma_voxels": float,
    "angle_sigma_deg": float,
    "trans_frac": float,
    "seed": int,
}
_MODALITY_SCHEMA = {
    "dip": {"traces": str},
    "sfs": {"manifest": str},
    "pc": {"clouds": list, "eps_offset": float, "level": float},
}
_RUN_SCHEMA = {
    "seed": int,
    "threads": int,
    "kind": str,
    "estimate_calibration": bool,
    "init_spread": float,
    "normalize": bool,
    "grid": _GRID_SCHEMA,
    "gn": _GN_SCHEMA,
    "schedule": _SCHED_SCHEMA,
    "noise": _NOISE_SCHEMA,
    "gamma": {"mode": str, "value": float},
    "modalities": _MODALITY_SCHEMA,
}


def _check_schema(doc, schema, where=""):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {where or '<root>'} must be an object")
    for key, val in doc.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {where}{key!r}")
        want = schema[key]
        if isinstance(want, dict):
            _check_schema(val, want, where=f"{where}{key}.")
        elif want is float:
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError(f"config key {where}{key} must be a number")
        elif not isinstance(val, want) or (want is int and isinstance(val, bool)):
            raise ConfigError(f"config key {where}{key} must be {want.__name__}")


def load_run_config(path) -> dict:
    doc = json.loads(Path(path).read_text())
    _check_schema(doc, _RUN_SCHEMA)
    return doc


def _grid_from(doc: dict, default_dims=(32, 32, 32)) -> GridSpec:
    g = doc.get("grid", {})
    return GridSpec(
        tuple(g.get("dims", default_dims)),
        tuple(g.get("origin", (0.0, 0.0, 0.0))),
        tuple(g.get("extent", (5.0, 5.0, 5.0))),
    )


def _dims_triplet(text: str):
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ConfigError("--dims takes N or N1,N2,N3")
    return tuple(parts)


def cmd_phantom(args) -> int:
    phantom = builtin_phantom(args.spec)
    grid = GridSpec(_dims_triplet(args.dims))
    field = voxelize(phantom, grid)
    fileio.write_grid(args.out, field, dtype="u8")
    print(f"wrote {args.out}.json/.raw ({phantom.name}, {int(field.values.sum())} voxels filled)")
    return 0


def cmd_simulate(args) -> int:
    phantom = builtin_phantom(args.phantom)
    grid_lo = GridSpec(_dims_triplet(args.grid))
    grid_hi = GridSpec(tuple(2 * d for d in grid_lo.dims))
    noise = NoiseSpec(args.noise_sigma, args.angle_noise_deg, args.trans_noise_frac, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    experiments, true_acqs = simulate(
        phantom, args.modality, args.n, noise, grid_hi, grid_lo, n_points=args.points
    )
    fileio._atomic_write(
        out / "true_acq.json",
        (json.dumps([a.flatten().tolist() for a in true_acqs]) + "\n").encode(),
    )
    if args.modality == "dip":
        fileio.write_dip_csv(out / "traces.csv", experiments)
        print(f"wrote {out/'traces.csv'} ({len(experiments)} dips)")
    elif args.modality == "sfs":
        manifest = fileio.write_silhouettes(out, experiments)
        print(f"wrote {manifest} ({len(experiments)} silhouettes)")
    else:
        entries = []
        for j, (cloud, acq) in enumerate(experiments):
            name = f"cloud_{j:04d}.txt"
            fileio.write_pointcloud(out / name, cloud)
            entries.append(
                {
                    "file": name,
                    "theta": acq.theta,
                    "phi": acq.phi,
                    "b": list(acq.b),
                    "eps_offset": cloud.eps_offset,
                    "level": cloud.level,
                }
            )
        fileio._atomic_write(
            out / "clouds_manifest.json",
            (json.dumps({"clouds": entries}, sort_keys=True) + "\n").encode(),
        )
        print(f"wrote {out/'clouds_manifest.json'} ({len(experiments)} clouds)")
    return 0


def _build_terms(doc: dict, grid: GridSpec):
    from .calib import AcquisitionParams
    from .forward import PointCloudData

    modalities = doc.get("modalities", {})
    if not modalities:
        raise ConfigError("run config needs at least one modality")
    groups = {}
    idx = 0
    for name in ("dip", "sfs", "pc"):
        if name not in modalities:
            continue
        section = modalities[name]
        terms = []
        if name == "dip":
            for exp in fileio.read_dip_csv(section["traces"]):
                terms.append(DipTerm(grid, exp, idx))
                idx += 1
        elif name == "sfs":
            for exp in fileio.read_silhouettes(section["manifest"]):
                terms.append(SfsTerm(grid, exp, idx))
                idx += 1
        else:
            eps_offset = section.get("eps_offset", 2.0 * float(grid.spacing[0]))
            level = section.get("level", 0.7)
            manifest = section.get("clouds")
            for cloud_file in manifest:
                path = Path(cloud_file)
                if path.suffix == ".json":
                    entries = json.loads(path.read_text())["clouds"]
                    for e in entries:
                        cloud = fileio.read_pointcloud(
                            path.parent / e["file"], e.get("eps_offset", eps_offset), e.get("level", level)
                        )
                        term = PcTerm(cloud, idx, tuple(grid.midpoint))
                        term.experiment = _AcqHolder(
                            AcquisitionParams(e["theta"], e["phi"], tuple(e["b"]))
                        )
                        terms.append(term)
                        idx += 1
                else:
                    cloud = fileio.read_pointcloud(path, eps_offset, level)
                    term = PcTerm(cloud, idx, tuple(grid.midpoint))
                    term.experiment = _AcqHolder(AcquisitionParams())
                    terms.append(term)
                    idx += 1
        if terms:
            groups[name] = terms
    return groups


class _AcqHolder:
    def __init__(self, acq):
        self.acq = acq


def cmd_reconstruct(args) -> int:
    doc = load_run_config(args.config)
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    threads = args.threads if args.threads is not None else doc.get("threads", 1)
    grid = _grid_from(doc)
    cfg = GNConfig(**doc.get("gn", {}))
    schedule = RBFSchedule(**doc.get("schedule", {}))
    kind = doc.get("kind", KIND_ELLIPSOIDAL)
    if kind not in KINDS:
        raise ConfigError(f"unknown kind {kind!r}")
    groups = _build_terms(doc, grid)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    gamma = doc.get("gamma", {"mode": "auto"})
    gamma_mode = gamma.get("mode", "auto")
    if gamma_mode == "fixed":
        gamma_mode = gamma.get("value", 1.0)
    elif gamma_mode != "auto":
        raise ConfigError("gamma mode must be auto or fixed")

    # flatten groups in declared order; balance after the initial guess exists
    terms = [t for ts in groups.values() for t in ts]
    m_ext, rec_bin, trace = reconstruct(
        terms,
        grid,
        schedule,
        cfg,
        estimate_calibration=doc.get("estimate_calibration", False),
        seed=seed,
        kind=kind,
        n_workers=threads,
        init_spread=doc.get("init_spread", 0.1),
        normalize=doc.get("normalize", True),
        gamma_groups=groups if len(groups) > 1 else None,
        gamma_mode=gamma_mode,
    )
    fileio.write_params(out / "params.json", m_ext)
    fileio.write_grid(out / "recon", rec_bin, dtype="u8")
    fileio.write_trace_csv(out / "trace.csv", trace)
    if args.svg:
        fileio.write_svg_misfit(out / "misfit.svg", trace)
    effective = dict(doc)
    effective["seed"] = seed
    effective["threads"] = threads
    fileio._atomic_write(out / "run_config.json", (json.dumps(effective, sort_keys=True) + "\n").encode())
    final = trace.steps[-1].misfit if trace.steps else float("nan")
    print(f"wrote {out}/params.json recon.json/.raw trace.csv (final misfit {final:.4e})")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck(args.family, trial_count=args.trials, seed=args.seed or 0)
    for line in report.lines():
        print(line)
    if not report.passed:
        raise OptimizationError("gradient check failed")
    return 0


def cmd_metrics(args) -> int:
    recon = fileio.read_grid(args.recon)
    truth = fileio.read_grid(args.truth)
    if recon.grid.dims != truth.grid.dims:
        raise ConfigError("metrics needs matching grids")
    m = compare(recon, truth)
    print(f"iou {m.iou:.6f}")
    print(f"volume_rel_err {m.volume_rel_err:.6f}")
    return 0


def cmd_export(args) -> int:
    obj = fileio.read_params(args.params)
    pv = obj.pals if hasattr(obj, "pals") else obj
    grid = GridSpec(_dims_triplet(args.dims))
    field, _ = field_eval(pv, grid)
    if args.binarize:
        field = binarize(field, args.threshold)
        fileio.write_grid(args.out, field, dtype="u8")
    else:
        fileio.write_grid(args.out, field, dtype="f32")
    print(f"wrote {args.out}.json/.raw at dims {grid.dims}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pals3d", description="parametric level-set 3D reconstruction")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="voxelize a builtin phantom")
    p.add_argument("--spec", required=True)
    p.add_argument("--dims", default="64")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("simulate", help="generate synthetic experiments")
    p.add_argument("--phantom", required=True)
    p.add_argument("--modality", required=True, choices=("dip", "sfs", "pc"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--grid", default="32", help="data-resolution dims (simulation runs at 2x)")
    p.add_argument("--noise-sigma", type=float, default=2.0)
    p.add_argument("--angle-noise-deg", type=float, default=0.0)
    p.add_argument("--trans-noise-frac", type=float, default=0.0)
    p.add_argument("--points", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("reconstruct", help="run the reconstruction described by a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("gradcheck", help="finite-difference oracle suite")
    p.add_argument("--family", default="all", choices=("all",) + FAMILIES)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("metrics", help="IoU / volume error between two voxel grids")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("export", help="parameter JSON to voxel grid at any resolution")
    p.add_argument("--params", required=True)
    p.add_argument("--dims", default="64")
    p.add_argument("--out", required=True)
    p.add_argument("--binarize", action="store_true")
    p.add_argument("--threshold", type=float, default=0.7)
    p.set_defaults(fn=cmd_export)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("PALS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error:validation:{exc}", file=sys.stderr)
        return 1
    except (OptimizationError, SingularBasisError, BarrierViolation, DomainError, PalsError) as exc:
        print(f"error:numerical:{exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
