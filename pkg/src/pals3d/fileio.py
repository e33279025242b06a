"""On-disk formats: raw voxel grids, trace CSVs, PGM silhouettes, point
clouds, parameter vectors, and optimization traces.

Every writer goes through an atomic write-then-rename so a failed run never
leaves a partial file behind. Numeric text uses repr-precision floats, so
read(write(x)) reproduces float64 values bit-exactly (silhouette PGM is the
one quantized format).
"""

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .basis import KINDS, ParameterVector, params_per_basis
from .calib import ACQ_PARAMS, AcquisitionParams, ExtendedParameters
from .errors import ConfigError
from .forward import DipExperiment, PointCloudData, SilhouetteExperiment
from .grid import GridSpec, ScalarField


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# voxel grids: <name>.json header + <name>.raw little-endian payload


def write_grid(base_path, field: ScalarField, dtype: str = "f32"):
    """Write `<base>.json` + `<base>.raw`; dtype "f32" or "u8", x-fastest order."""
    base = Path(base_path)
    if dtype not in ("f32", "u8"):
        raise ConfigError(f"grid dtype must be f32 or u8, got {dtype!r}")
    header = {
        "dims": list(field.grid.dims),
        "origin": list(field.grid.origin),
        "extent": list(field.grid.extent),
        "dtype": dtype,
        "order": "x-fastest",
    }
    if dtype == "f32":
        payload = field.values.astype("<f4").tobytes()
    else:
        payload = np.round(field.values).astype(np.uint8).tobytes()
    _atomic_write(base.with_suffix(".json"), (json.dumps(header, sort_keys=True) + "\n").encode())
    _atomic_write(base.with_suffix(".raw"), payload)


def read_grid(base_path) -> ScalarField:
    base = Path(base_path)
    header = json.loads(base.with_suffix(".json").read_text())
    for key in ("dims", "origin", "extent", "dtype", "order"):
        if key not in header:
            raise ConfigError(f"grid header missing {key!r}")
    if header["order"] != "x-fastest":
        raise ConfigError(f"unsupported grid order {header['order']!r}")
    grid = GridSpec(tuple(header["dims"]), tuple(header["origin"]), tuple(header["extent"]))
    raw = base.with_suffix(".raw").read_bytes()
    if header["dtype"] == "f32":
        vals = np.frombuffer(raw, dtype="<f4").astype(float)
    elif header["dtype"] == "u8":
        vals = np.frombuffer(raw, dtype=np.uint8).astype(float)
    else:
        raise ConfigError(f"unsupported grid dtype {header['dtype']!r}")
    if vals.size != grid.n_voxels:
        raise ConfigError("raw payload does not match header dims")
    return ScalarField(grid, vals)


# ---------------------------------------------------------------------------
# dip traces: one CSV row per experiment


def write_dip_csv(path, experiments):
    lines = []
    for e in experiments:
        acq = e.acq
        row = [
            _fmt(np.rad2deg(acq.theta)),
            _fmt(np.rad2deg(acq.phi)),
            *(_fmt(v) for v in acq.b),
            *(_fmt(v) for v in e.observed),
        ]
        lines.append(",".join(row))
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_dip_csv(path):
    experiments = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        vals = [float(v) for v in line.split(",")]
        if len(vals) < 6:
            raise ConfigError("dip CSV row needs theta,phi,b and at least one volume")
        acq = AcquisitionParams(np.deg2rad(vals[0]), np.deg2rad(vals[1]), tuple(vals[2:5]))
        experiments.append(DipExperiment(acq, np.array(vals[5:])))
    return experiments


# ---------------------------------------------------------------------------
# silhouettes: binary PGM per experiment + JSON manifest


def write_silhouettes(directory, experiments, prefix: str = "sil"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for j, e in enumerate(experiments):
        name = f"{prefix}_{j:04d}.pgm"
        img = np.clip(np.round(e.observed * 255.0), 0, 255).astype(np.uint8)
        h, w = img.shape  # rows = first grid axis
        header = f"P5\n{w} {h}\n255\n".encode()
        _atomic_write(directory / name, header + img.tobytes())
        entries.append(
            {
                "file": name,
                "theta": e.acq.theta,
                "phi": e.acq.phi,
                "b": list(e.acq.b),
                "eta": e.eta,
            }
        )
    manifest = {"silhouettes": entries}
    _atomic_write(directory / f"{prefix}_manifest.json", (json.dumps(manifest, sort_keys=True) + "\n").encode())
    return directory / f"{prefix}_manifest.json"


def _read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ConfigError(f"{path} is not a binary PGM")
    fields = []
    idx = 2
    while len(fields) < 3:
        while idx < len(data) and data[idx : idx + 1].isspace():
            idx += 1
        if data[idx : idx + 1] == b"#":
            while idx < len(data) and data[idx : idx + 1] != b"\n":
                idx += 1
            continue
        start = idx
        while idx < len(data) and not data[idx : idx + 1].isspace():
            idx += 1
        fields.append(int(data[start:idx]))
    idx += 1  # single whitespace after maxval
    w, h, maxval = fields
    img = np.frombuffer(data[idx : idx + w * h], dtype=np.uint8).reshape(h, w)
    return img.astype(float) / float(maxval)


def read_silhouettes(manifest_path):
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    out = []
    for entry in manifest["silhouettes"]:
        img = _read_pgm(manifest_path.parent / entry["file"])
        acq = AcquisitionParams(entry["theta"], entry["phi"], tuple(entry["b"]))
        out.append(SilhouetteExperiment(acq, img, entry["eta"]))
    return out


# ---------------------------------------------------------------------------
# point clouds: whitespace table x y z nx ny nz


def write_pointcloud(path, cloud: PointCloudData):
    lines = [
        " ".join(_fmt(v) for v in (*p, *n))
        for p, n in zip(cloud.points, cloud.normals)
    ]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_pointcloud(path, eps_offset: float = 0.3125, level: float = 0.7) -> PointCloudData:
    pts, nrm = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 6:
            raise ConfigError("point cloud rows must be: x y z nx ny nz")
        pts.append(vals[:3])
        nrm.append(vals[3:])
    return PointCloudData(np.array(pts), np.array(nrm), eps_offset, level)


# ---------------------------------------------------------------------------
# parameter vectors


def params_to_dict(obj) -> dict:
    if isinstance(obj, ExtendedParameters):
        return {
            "kind": obj.pals.kind,
            "eps_norm": obj.pals.eps_norm,
            "pals": obj.pals.flatten().tolist(),
            "acq": [a.flatten().tolist() for a in obj.acq_list],
        }
    if isinstance(obj, ParameterVector):
        return {"kind": obj.kind, "eps_norm": obj.eps_norm, "pals": obj.flatten().tolist()}
    raise ConfigError(f"cannot serialize {type(obj).__name__}")


def params_from_dict(doc: dict):
    if "kind" not in doc or doc["kind"] not in KINDS:
        raise ConfigError("parameter JSON needs a valid kind tag")
    kind = doc["kind"]
    eps_norm = float(doc.get("eps_norm", 1e-4))
    flat = np.asarray(doc.get("pals", []), dtype=float)
    proto = ParameterVector(kind, (), eps_norm)
    if flat.size % params_per_basis(kind):
        raise ConfigError("flat parameter length does not match the kind")
    pv = proto.from_flat(flat)
    if "acq" in doc:
        acq = tuple(AcquisitionParams.from_flat(np.asarray(a, dtype=float)) for a in doc["acq"])
        for a in doc["acq"]:
            if len(a) != ACQ_PARAMS:
                raise ConfigError("acquisition blocks must have 5 entries")
        return ExtendedParameters(pv, acq)
    return pv


def write_params(path, obj):
    _atomic_write(Path(path), (json.dumps(params_to_dict(obj), sort_keys=True) + "\n").encode())


def read_params(path):
    return params_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# optimization trace


def write_trace_csv(path, trace):
    lines = ["iter,misfit,reg,n_rbf,step"]
    for i, misfit, reg, n_rbf, step in trace.rows():
        lines.append(f"{i},{_fmt(misfit)},{_fmt(reg)},{n_rbf},{_fmt(step)}")
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_trace_csv(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        if line.strip():
            parts = line.split(",")
            rows.append([float(parts[1]), float(parts[2]), float(parts[3]), float(parts[4])])
    return np.asarray(rows)


def write_svg_misfit(path, trace, width: int = 640, height: int = 360):
    """Minimal SVG line chart of the misfit history (log scale)."""
    hist = trace.misfit_history()
    if hist.size == 0:
        raise ConfigError("empty trace")
    logs = np.log10(np.maximum(hist, 1e-300))
    lo, hi = float(logs.min()), float(logs.max())
    span = max(hi - lo, 1e-9)
    xs = np.linspace(40, width - 10, hist.size)
    ys = height - 30 - (logs - lo) / span * (height - 60)
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="100%" height="100%" fill="white"/>'
        f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="1.5"/>'
        f'<text x="10" y="20" font-size="12">log10 data misfit per accepted step</text>'
        "</svg>\n"
    )
    _atomic_write(Path(path), svg.encode())
