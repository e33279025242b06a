"""Synthetic phantoms, data simulation with calibration noise, and metrics.

Phantoms are unions of analytic primitives that transform exactly under
rigid motion, so simulated data comes from the true rotated geometry
rather than from a resampled voxel volume wherever possible.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .calib import AcquisitionParams, RigidTransform, transform_apply
from .errors import ConfigError
from .forward import DEFAULT_ETA, DipExperiment, PointCloudData, SilhouetteExperiment
from .grid import GridSpec, ScalarField


@dataclass(frozen=True)
class EllipsoidPrim:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def __post_init__(self):
        if any(a <= 0 for a in self.semi_axes):
            raise ConfigError("ellipsoid semi-axes must be positive")

    @property
    def rot(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=float)

    def _local(self, pts) -> np.ndarray:
        return (np.atleast_2d(pts) - np.asarray(self.center)) @ self.rot

    def contains(self, pts) -> np.ndarray:
        q = self._local(pts) / np.asarray(self.semi_axes)
        return np.einsum("ij,ij->i", q, q) <= 1.0

    def sdf(self, pts) -> np.ndarray:
        # first-order scaled distance; exact on the surface, good nearby
        q = self._local(pts) / np.asarray(self.semi_axes)
        k0 = np.linalg.norm(q, axis=1)
        k1 = np.linalg.norm(q / np.asarray(self.semi_axes), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(k1 > 0, k0 * (k0 - 1.0) / np.maximum(k1, 1e-300), -np.min(self.semi_axes))
        return d

    def surface_sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        local = dirs * np.asarray(self.semi_axes)
        normals_local = dirs / np.asarray(self.semi_axes)
        normals_local /= np.linalg.norm(normals_local, axis=1, keepdims=True)
        pts = local @ self.rot.T + np.asarray(self.center)
        normals = normals_local @ self.rot.T
        return pts, normals

    def transformed(self, t: RigidTransform) -> "EllipsoidPrim":
        q = t.q
        new_center = transform_apply(t, np.asarray(self.center))
        new_rot = q @ self.rot
        return EllipsoidPrim(tuple(new_center), self.semi_axes, tuple(map(tuple, new_rot)))

    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * float(np.prod(self.semi_axes))


@dataclass(frozen=True)
class BoxPrim:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def __post_init__(self):
        if any(h <= 0 for h in self.half_extents):
            raise ConfigError("box half extents must be positive")

    @property
    def rot(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=float)

    def _local(self, pts) -> np.ndarray:
        return (np.atleast_2d(pts) - np.asarray(self.center)) @ self.rot

    def contains(self, pts) -> np.ndarray:
        q = np.abs(self._local(pts))
        return np.all(q <= np.asarray(self.half_extents), axis=1)

    def sdf(self, pts) -> np.ndarray:
        q = np.abs(self._local(pts)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def surface_sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        h = np.asarray(self.half_extents)
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
        probs = np.repeat(areas, 2)
        probs = probs / probs.sum()
        faces = rng.choice(6, size=n, p=probs)
        pts_local = rng.uniform(-h, h, size=(n, 3))
        normals_local = np.zeros((n, 3))
        for f in range(6):
            axis, sign = divmod(f, 2)
            m = faces == f
            pts_local[m, axis] = h[axis] * (1.0 if sign == 0 else -1.0)
            normals_local[m, axis] = 1.0 if sign == 0 else -1.0
        pts = pts_local @ self.rot.T + np.asarray(self.center)
        normals = normals_local @ self.rot.T
        return pts, normals

    def transformed(self, t: RigidTransform) -> "BoxPrim":
        q = t.q
        new_center = transform_apply(t, np.asarray(self.center))
        new_rot = q @ self.rot
        return BoxPrim(tuple(new_center), self.half_extents, tuple(map(tuple, new_rot)))

    def volume(self) -> float:
        return 8.0 * float(np.prod(self.half_extents))


@dataclass(frozen=True)
class Phantom:
    """Union of analytic primitives."""

    name: str
    primitives: tuple = ()

    def __post_init__(self):
        if not self.primitives:
            raise ConfigError("phantom needs at least one primitive")

    def contains(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        out = np.zeros(pts.shape[0], dtype=bool)
        for p in self.primitives:
            out |= p.contains(pts)
        return out

    def sdf(self, pts) -> np.ndarray:
        return np.min(np.stack([p.sdf(pts) for p in self.primitives]), axis=0)

    def transformed(self, t: RigidTransform) -> "Phantom":
        return Phantom(self.name, tuple(p.transformed(t) for p in self.primitives))

    def surface_sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        """Union surface samples: per-primitive samples with points inside any
        other primitive rejected, resampled until n points survive."""
        pts_out, nrm_out = [], []
        need = n
        guard = 0
        while need > 0:
            guard += 1
            if guard > 200:
                raise ConfigError("surface sampling failed; primitives may be mutually buried")
            weights = np.array([p.volume() for p in self.primitives])
            weights = weights / weights.sum()
            counts = rng.multinomial(need, weights)
            for prim, cnt in zip(self.primitives, counts):
                if cnt == 0:
                    continue
                pts, nrm = prim.surface_sample(cnt, rng)
                keep = np.ones(cnt, dtype=bool)
                for other in self.primitives:
                    if other is prim:
                        continue
                    keep &= ~other.contains(pts)
                pts_out.append(pts[keep])
                nrm_out.append(nrm[keep])
            need = n - sum(len(p) for p in pts_out)
        pts = np.concatenate(pts_out)[:n]
        nrm = np.concatenate(nrm_out)[:n]
        return pts, nrm

    def all_quadric(self) -> bool:
        return all(isinstance(p, EllipsoidPrim) for p in self.primitives)


def voxelize(phantom: Phantom, grid: GridSpec) -> ScalarField:
    """Binary occupancy by testing voxel centers against the union."""
    inside = phantom.contains(grid.cell_centers())
    return ScalarField(grid, inside.astype(float))


def downsample(fld: ScalarField, factor: int) -> ScalarField:
    """Block-average by factor^3; each dim must be divisible by factor."""
    dims = fld.grid.dims
    if any(d % factor for d in dims):
        raise ConfigError(f"downsample factor {factor} does not divide dims {dims}")
    new_dims = tuple(d // factor for d in dims)
    cube = fld.cube()
    small = cube.reshape(
        new_dims[0], factor, new_dims[1], factor, new_dims[2], factor
    ).mean(axis=(1, 3, 5))
    new_grid = GridSpec(new_dims, fld.grid.origin, fld.grid.extent)
    return ScalarField(new_grid, small.ravel(order="F"))


# ---------------------------------------------------------------------------
# metrics


def iou(a: ScalarField, b: ScalarField) -> float:
    """Intersection over union of the >0.5 sets."""
    av = a.values > 0.5
    bv = b.values > 0.5
    union = (av | bv).sum()
    if union == 0:
        return 1.0
    return float((av & bv).sum() / union)


def volume_rel_err(recon: ScalarField, truth: ScalarField) -> float:
    vr = float((recon.values > 0.5).sum()) * recon.grid.voxel_volume
    vt = float((truth.values > 0.5).sum()) * truth.grid.voxel_volume
    return abs(vr - vt) / max(vt, 1e-300)


@dataclass
class Metrics:
    iou: float
    volume_rel_err: float
    misfit_history: np.ndarray = dc_field(default_factory=lambda: np.zeros(0))


def compare(recon: ScalarField, truth: ScalarField, misfit_history=None) -> Metrics:
    hist = np.asarray(misfit_history) if misfit_history is not None else np.zeros(0)
    return Metrics(iou(recon, truth), volume_rel_err(recon, truth), hist)


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class NoiseSpec:
    data_sigma_voxels: float = 2.0
    angle_sigma_deg: float = 0.0
    trans_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.data_sigma_voxels < 0 or self.angle_sigma_deg < 0 or self.trans_frac < 0:
            raise ConfigError("noise magnitudes must be nonnegative")


def exact_ellipsoid_trace(prim: EllipsoidPrim, acq: AcquisitionParams, grid: GridSpec) -> np.ndarray:
    """Closed-form slab volumes of the rigidly transformed ellipsoid along axis 3."""
    t = RigidTransform(acq, tuple(grid.midpoint))
    moved = prim.transformed(t)
    R = moved.rot
    M = R @ np.diag(np.asarray(moved.semi_axes) ** 2) @ R.T
    w = np.sqrt(M[2, 2])
    coef = np.pi * np.sqrt(np.linalg.det(M)) / w
    n3 = grid.dims[2]
    h3 = grid.extent[2] / n3
    edges = grid.origin[2] + h3 * np.arange(n3 + 1)
    tt = np.clip((edges - moved.center[2]) / w, -1.0, 1.0)
    F = coef * w * (tt - tt**3 / 3.0)
    return F[1:] - F[:-1]


def _dip_trace(phantom: Phantom, acq: AcquisitionParams, grid_hi: GridSpec, grid_lo: GridSpec) -> np.ndarray:
    """Clean trace at the reconstruction resolution.

    Single-ellipsoid phantoms use the exact slab integrals; anything else is
    voxelized in its true rotated pose at the simulation resolution and the
    slice volumes are group-summed down to the data resolution.
    """
    if len(phantom.primitives) == 1 and phantom.all_quadric():
        return exact_ellipsoid_trace(phantom.primitives[0], acq, grid_lo)
    t = RigidTransform(acq, tuple(grid_hi.midpoint))
    moved = phantom.transformed(t)
    hi = voxelize(moved, grid_hi)
    v_hi = grid_hi.voxel_volume
    tr_hi = v_hi * hi.cube().sum(axis=(0, 1))
    factor = grid_hi.dims[2] // grid_lo.dims[2]
    if factor * grid_lo.dims[2] != grid_hi.dims[2]:
        raise ConfigError("hi-res n3 must be a multiple of the lo-res n3")
    return tr_hi.reshape(grid_lo.dims[2], factor).sum(axis=1)


def _silhouette_image(phantom: Phantom, acq: AcquisitionParams, grid_hi: GridSpec, grid_lo: GridSpec) -> np.ndarray:
    """Column-hit silhouette of the rotated phantom, block-averaged to data size."""
    t = RigidTransform(acq, tuple(grid_hi.midpoint))
    moved = phantom.transformed(t)
    hi = voxelize(moved, grid_hi)
    img_hi = (hi.cube().max(axis=2) > 0.5).astype(float)
    f1 = grid_hi.dims[0] // grid_lo.dims[0]
    f2 = grid_hi.dims[1] // grid_lo.dims[1]
    if f1 * grid_lo.dims[0] != grid_hi.dims[0] or f2 * grid_lo.dims[1] != grid_hi.dims[1]:
        raise ConfigError("hi-res cross-section must be a multiple of the lo-res one")
    return img_hi.reshape(grid_lo.dims[0], f1, grid_lo.dims[1], f2).mean(axis=(1, 3))


def _draw_acq(rng, extent, b_box_frac: float) -> AcquisitionParams:
    theta = rng.uniform(0.0, 2.0 * np.pi)
    phi = float(np.arccos(rng.uniform(-1.0, 1.0)))
    b = rng.uniform(-b_box_frac, b_box_frac, size=3) * np.asarray(extent)
    return AcquisitionParams(theta, phi, tuple(b))


def _perturb_acq(acq: AcquisitionParams, noise: NoiseSpec, rng, extent) -> AcquisitionParams:
    ang = np.deg2rad(noise.angle_sigma_deg)
    theta = acq.theta + rng.normal(0.0, ang) if ang > 0 else acq.theta
    phi = acq.phi + rng.normal(0.0, ang) if ang > 0 else acq.phi
    b = np.asarray(acq.b, dtype=float)
    if noise.trans_frac > 0:
        b = b + rng.normal(0.0, noise.trans_frac * float(np.mean(extent)), size=3)
    return AcquisitionParams(theta, phi, tuple(b))


def simulate(
    phantom: Phantom,
    modality: str,
    n_experiments: int,
    noise: NoiseSpec,
    grid_hi: GridSpec,
    grid_lo: GridSpec,
    n_points: int = 500,
    eta: float = DEFAULT_ETA,
    eps_offset: float | None = None,
    level: float = 0.7,
    b_box_frac: float = 0.0,
):
    """Draw true acquisition poses, compute clean data, inject noise.

    Gaussian data noise (std data_sigma_voxels * voxel volume of the data
    grid) lands on dip traces; calibration noise perturbs the RECORDED
    acquisition parameters while the data stays generated from the true
    ones. Returns (experiments, true_acq_list).
    """
    if n_experiments < 1:
        raise ConfigError("n_experiments must be >= 1")
    if modality not in ("dip", "sfs", "pc"):
        raise ConfigError(f"unknown modality {modality!r}")
    rng = np.random.default_rng(noise.seed)
    extent = grid_lo.extent
    true_acqs = [_draw_acq(rng, extent, b_box_frac) for _ in range(n_experiments)]
    recorded = [_perturb_acq(a, noise, rng, extent) for a in true_acqs]
    experiments = []
    if modality == "dip":
        sigma = noise.data_sigma_voxels * grid_lo.voxel_volume
        for a_true, a_rec in zip(true_acqs, recorded):
            d = _dip_trace(phantom, a_true, grid_hi, grid_lo)
            if sigma > 0:
                d = np.clip(d + rng.normal(0.0, sigma, size=d.shape), 0.0, None)
            experiments.append(DipExperiment(a_rec, d))
    elif modality == "sfs":
        for a_true, a_rec in zip(true_acqs, recorded):
            img = _silhouette_image(phantom, a_true, grid_hi, grid_lo)
            experiments.append(SilhouetteExperiment(a_rec, img, eta))
    else:
        if eps_offset is None:
            eps_offset = 2.0 * float(grid_lo.spacing[0])
        for a_true, a_rec in zip(true_acqs, recorded):
            pts, nrm = phantom.surface_sample(n_points, rng)
            t = RigidTransform(a_true, tuple(grid_lo.midpoint))
            moved_pts = transform_apply(t, pts)
            moved_nrm = nrm @ t.q.T
            cloud = PointCloudData(moved_pts, moved_nrm, eps_offset, level)
            experiments.append((cloud, a_rec))
    return experiments, true_acqs


def builtin_phantom(name: str) -> Phantom:
    """Named phantoms used by the CLI and the test suite."""
    mid = (2.5, 2.5, 2.5)
    catalog = {
        "ellipsoid": Phantom("ellipsoid", (EllipsoidPrim(mid, (2.0, 1.9, 1.8)),)),
        "sphere": Phantom("sphere", (EllipsoidPrim(mid, (1.5, 1.5, 1.5)),)),
        "smallsphere": Phantom("smallsphere", (EllipsoidPrim(mid, (1.0, 1.0, 1.0)),)),
        "dumbbell": Phantom(
            "dumbbell",
            (
                EllipsoidPrim((1.7, 2.5, 2.5), (0.9, 0.9, 0.9)),
                EllipsoidPrim((3.3, 2.5, 2.5), (0.7, 0.7, 0.7)),
                BoxPrim(mid, (0.9, 0.3, 0.3)),
            ),
        ),
        "blocks": Phantom(
            "blocks",
            (
                BoxPrim((2.1, 2.3, 2.3), (1.1, 0.9, 0.9)),
                BoxPrim((3.2, 2.9, 2.9), (0.7, 0.6, 0.6)),
            ),
        ),
        "lshape": Phantom(
            "lshape",
            (
                BoxPrim((2.5, 2.2, 2.4), (1.4, 0.6, 0.6)),
                BoxPrim((3.3, 2.2, 3.3), (0.6, 0.6, 1.0)),
            ),
        ),
    }
    if name not in catalog:
        raise ConfigError(f"unknown phantom {name!r}; have {sorted(catalog)}")
    return catalog[name]
