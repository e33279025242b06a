"""Forward models: dip traces, no-fill silhouettes, point-cloud residuals.

All three share the same pattern: carry the experiment's acquisition pose
onto the shape parameters, evaluate the level-set field, apply a linear or
softmax measurement map, and chain the sensitivities through the rotation
Jacobians so each output also differentiates w.r.t. the acquisition
parameters of its own experiment.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .basis import ParameterVector, params_per_basis
from .calib import (
    ACQ_PARAMS,
    AcquisitionParams,
    ExtendedParameters,
    extended_rot_blocks,
    rotate_params,
)
from .errors import ConfigError
from .field import field_eval_points, field_grid_engine
from .grid import GridSpec
from .kernels import DEFAULT_WENDLAND_ORDER, HeavisideConfig
from .spatial import NeighborIndex

__all__ = [
    "DipExperiment",
    "SilhouetteExperiment",
    "PointCloudData",
    "NeighborIndex",
    "dip_forward",
    "sfs_boundary_run",
    "softmax_vote",
    "sfs_forward",
    "pc_residuals",
    "TAU_BG",
    "AMBIENT_TAU_BG",
    "DEFAULT_ETA",
]

TAU_BG = 0.05  # floor above the background level for run detection
# Live level-set fields carry the ambient sigma(0) = 0.5 wherever no basis
# reaches, so the image-level floor sits above that ambient, not above 0.
AMBIENT_TAU_BG = 0.5 + TAU_BG
DEFAULT_ETA = 50.0


@dataclass(frozen=True)
class DipExperiment:
    """One dip: recorded pose and the observed slice-volume trace (length n3)."""

    acq: AcquisitionParams
    observed: np.ndarray = dc_field(repr=False)

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=float).ravel()
        if obs.size == 0 or np.any(obs < 0):
            raise ConfigError("dip trace must be a nonempty vector of volumes >= 0")
        obs.flags.writeable = False
        object.__setattr__(self, "observed", obs)


@dataclass(frozen=True)
class SilhouetteExperiment:
    """One silhouette: recorded pose, observed image in [0,1], softmax sharpness."""

    acq: AcquisitionParams
    observed: np.ndarray = dc_field(repr=False)
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        img = np.asarray(self.observed, dtype=float)
        if img.ndim != 2:
            raise ConfigError("silhouette must be a 2-D image")
        if img.min() < 0 or img.max() > 1:
            raise ConfigError("silhouette values must lie in [0, 1]")
        if self.eta <= 0:
            raise ConfigError("softmax sharpness eta must be positive")
        img.flags.writeable = False
        object.__setattr__(self, "observed", img)
        object.__setattr__(self, "eta", float(self.eta))


@dataclass(frozen=True)
class PointCloudData:
    """Surface samples with outward unit normals and the level-set fit targets."""

    points: np.ndarray = dc_field(repr=False)
    normals: np.ndarray = dc_field(repr=False)
    eps_offset: float = 0.3125  # 2 voxel widths of the default 32^3 grid on [0,5]
    level: float = 0.7

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        nrm = np.atleast_2d(np.asarray(self.normals, dtype=float))
        if pts.shape[0] < 1 or pts.shape[1] != 3 or nrm.shape != pts.shape:
            raise ConfigError("point cloud needs matching (N, 3) points and normals, N >= 1")
        lens = np.linalg.norm(nrm, axis=1)
        if np.any(np.abs(lens - 1.0) > 1e-6):
            raise ConfigError("normals must be unit length to 1e-6")
        if self.eps_offset <= 0:
            raise ConfigError("eps_offset must be positive")
        if not (0.0 < self.level < 1.0):
            raise ConfigError("on-surface level must be in (0, 1)")
        for a in (pts, nrm):
            a.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def sample_points(self) -> np.ndarray:
        """Stacked [on-surface; forward-offset; backward-offset] points, (3N, 3)."""
        fwd = self.points + self.eps_offset * self.normals
        bwd = self.points - self.eps_offset * self.normals
        return np.concatenate([self.points, fwd, bwd], axis=0)

    def targets(self) -> np.ndarray:
        n = self.n_points
        return np.concatenate([np.full(n, self.level), np.zeros(n), np.ones(n)])


def _chain_to_extended(j_rot, m_ext: ExtendedParameters, j: int, x_mid) -> np.ndarray:
    """Chain d(output)/d(rotated params) through the rotation into d/d m_ext."""
    pals = m_ext.pals
    acq = m_ext.acq_list[j]
    rows = j_rot.shape[0]
    out = np.zeros((rows, m_ext.n_total))
    n = pals.n_rbf
    if n:
        k = params_per_basis(pals.kind)
        d_own, d_acq = extended_rot_blocks(pals, acq, x_mid)
        blocks = j_rot.reshape(rows, n, k)
        out[:, : m_ext.n_pals] = np.einsum("rni,nij->rnj", blocks, d_own).reshape(rows, n * k)
        out[:, m_ext.acq_slice(j)] = np.einsum("rni,nis->rs", blocks, d_acq)
    return out


def dip_forward(
    m_ext: ExtendedParameters,
    grid: GridSpec,
    j: int,
    want_jacobian: bool = True,
    cfg: HeavisideConfig = HeavisideConfig(),
    order: int = DEFAULT_WENDLAND_ORDER,
):
    """Simulated dip trace for experiment j: slice volumes along the third axis.

    trace[k] = V * sum of u over slice k of the rotated field. Returns
    (trace, jacobian vs the flattened extended parameters) or (trace, None).
    """
    acq = m_ext.acq_list[j]
    x_mid = grid.midpoint
    rot = rotate_params(m_ext.pals, acq, x_mid)
    n1, n2, n3 = grid.dims
    vol = grid.voxel_volume
    rowspec = None
    if want_jacobian:
        # each voxel contributes weight V to the row of its z-slice
        def rowspec(s, u):
            iz = np.repeat(np.arange(n3), n1 * n2)
            return iz, np.full(grid.n_voxels, vol), n3

    _, u, j_rot = field_grid_engine(rot, grid, rowspec, cfg, order)
    trace = vol * u.reshape(grid.dims, order="F").sum(axis=(0, 1))
    if not want_jacobian:
        return trace, None
    return trace, _chain_to_extended(j_rot, m_ext, j, x_mid)


def sfs_boundary_run(ray_values, tau_bg: float = TAU_BG) -> np.ndarray:
    """Indices of the first strictly-increasing run along a ray.

    The run starts at the first index whose value exceeds the background
    floor and extends while consecutive values strictly increase. Empty if
    the ray never rises above the floor.
    """
    vals = np.asarray(ray_values, dtype=float)
    above = vals > tau_bg
    if not above.any():
        return np.zeros(0, dtype=np.intp)
    start = int(np.argmax(above))
    stop = start + 1
    while stop < vals.size and vals[stop] > vals[stop - 1]:
        stop += 1
    return np.arange(start, stop, dtype=np.intp)


def softmax_vote(values, eta: float) -> float:
    """Sharpness-eta softmax average of the values; eta=0 is the plain mean."""
    vals = np.asarray(values, dtype=float)
    if vals.size == 0:
        return 0.0
    logits = eta * vals
    logits -= logits.max()
    w = np.exp(logits)
    w /= w.sum()
    return float(np.dot(vals, w))


def _run_masks(rays: np.ndarray, tau_bg: float) -> np.ndarray:
    """Vectorized sfs_boundary_run over rays laid out as (n_rays, n_steps)."""
    n_rays, n_steps = rays.shape
    above = rays > tau_bg
    has = above.any(axis=1)
    start = np.where(has, np.argmax(above, axis=1), n_steps)
    inc = np.zeros((n_rays, n_steps), dtype=bool)
    inc[:, 1:] = rays[:, 1:] > rays[:, :-1]
    # number of broken (non-increasing) steps up to k; membership needs none after start
    broken = np.cumsum(~inc, axis=1)
    cols = np.arange(n_steps)
    start_broken = broken[np.arange(n_rays), np.minimum(start, n_steps - 1)]
    mask = (cols[None, :] >= start[:, None]) & (broken == start_broken[:, None])
    mask[~has] = False
    return mask


def _softmax_image(rays: np.ndarray, mask: np.ndarray, eta: float):
    """Per-ray softmax vote over the masked entries; returns (d, weights)."""
    logits = np.where(mask, eta * rays, -np.inf)
    peak = logits.max(axis=1)
    any_run = np.isfinite(peak)
    safe_peak = np.where(any_run, peak, 0.0)
    w = np.exp(logits - safe_peak[:, None])
    w[~mask] = 0.0
    z = w.sum(axis=1)
    z[~any_run] = 1.0
    w /= z[:, None]
    d = np.einsum("pk,pk->p", rays, w)
    d[~any_run] = 0.0
    return d, w


def sfs_forward(
    m_ext: ExtendedParameters,
    grid: GridSpec,
    j: int,
    eta: float = DEFAULT_ETA,
    want_jacobian: bool = True,
    tau_bg: float = AMBIENT_TAU_BG,
    cfg: HeavisideConfig = HeavisideConfig(),
    order: int = DEFAULT_WENDLAND_ORDER,
):
    """No-fill silhouette image for experiment j.

    One orthographic ray per pixel along the third grid axis; the pixel value
    is the softmax-weighted average of u over the ray's first increasing run,
    zero when the run is empty. The default floor sits above the ambient
    sigma(0) = 0.5 so uncovered background never starts a run. Returns
    (image (n1, n2), jacobian vs the flattened extended parameters).
    """
    acq = m_ext.acq_list[j]
    x_mid = grid.midpoint
    rot = rotate_params(m_ext.pals, acq, x_mid)
    n1, n2, n3 = grid.dims
    npix = n1 * n2
    state = {}

    def rowspec(s, u):
        rays = u.reshape((npix, n3), order="F")
        mask = _run_masks(rays, tau_bg)
        d, w = _softmax_image(rays, mask, eta)
        state["d"] = d
        dd_du = w * (1.0 + eta * (rays - d[:, None]))
        dd_du[~mask] = 0.0
        row_of = np.where(mask, np.arange(npix)[:, None], -1).ravel(order="F")
        return row_of, dd_du.ravel(order="F"), npix

    if want_jacobian:
        _, u, j_rot = field_grid_engine(rot, grid, rowspec, cfg, order)
        image = state["d"].reshape((n1, n2), order="F")
        return image, _chain_to_extended(j_rot, m_ext, j, x_mid)
    _, u, _ = field_grid_engine(rot, grid, None, cfg, order)
    rays = u.reshape((npix, n3), order="F")
    mask = _run_masks(rays, tau_bg)
    d, _ = _softmax_image(rays, mask, eta)
    return d.reshape((n1, n2), order="F"), None


def pc_residuals(
    m_ext: ExtendedParameters,
    cloud: PointCloudData,
    j: int = 0,
    x_mid=(2.5, 2.5, 2.5),
    want_jacobian: bool = True,
    index: NeighborIndex | None = None,
    cfg: HeavisideConfig = HeavisideConfig(),
    order: int = DEFAULT_WENDLAND_ORDER,
):
    """Mesh-free level-set residuals [u(x)-level; u(x+eps n); u(x-eps n)-1].

    The cloud's pose (acquisition block j of m_ext) is carried onto the shape
    parameters, so misalignment is estimated like any other calibration
    parameter. No grid is involved.
    """
    acq = m_ext.acq_list[j]
    rot = rotate_params(m_ext.pals, acq, x_mid)
    pts = cloud.sample_points()
    u, jac = field_eval_points(rot, pts, cfg, order, want_jacobian=want_jacobian, index=index)
    res = u - cloud.targets()
    if not want_jacobian:
        return res, None
    j_rot = jac.to_dense()
    return res, _chain_to_extended(j_rot, m_ext, j, x_mid)
