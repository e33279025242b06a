"""Finite-difference oracle for every analytic derivative family.

Central differences with step 1e-5 scaled by parameter magnitude, compared
entry-wise against the analytic Jacobians at random feasible configurations.
Rows whose smoothed-step argument sits within a small margin of a branch
joint are excluded: the step function is only C^1 there, so a finite
difference is not a valid derivative probe at those samples (the analytic
formula is checked at neighboring samples instead).
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .basis import (
    KIND_CHOLESKY,
    KIND_ELLIPSOIDAL,
    KIND_SPHERICAL,
    CholeskyBasis,
    EllipsoidBasis,
    ParameterVector,
    SphericalBasis,
)
from .calib import (
    AcquisitionParams,
    ExtendedParameters,
    rot_jacobian_acq,
    rot_jacobian_params,
    rotate_params,
)
from .errors import ConfigError
from .field import field_eval_points, presum
from .forward import DipExperiment, PointCloudData, SilhouetteExperiment, dip_forward, pc_residuals, sfs_forward
from .grid import GridSpec
from .kernels import HeavisideConfig, heaviside_breakpoints
from .solver import logdet_barrier

FAMILIES = (
    "field-spherical",
    "field-ellipsoid",
    "field-cholesky",
    "rot-params",
    "rot-acq",
    "dip",
    "sfs",
    "pointcloud",
    "barrier",
)

FD_STEP = 1e-5
KINK_MARGIN = 1e-3


@dataclass
class FamilyReport:
    family: str
    max_rel_err: float
    tolerance: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


@dataclass
class GradcheckReport:
    families: list = dc_field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.families)

    def lines(self):
        for f in self.families:
            status = "pass" if f.passed else "FAIL"
            yield (
                f"{f.family:16s} max rel err {f.max_rel_err:.3e} "
                f"(tol {f.tolerance:.0e}, {f.trials} trials) {status}"
            )


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = max(np.max(np.abs(fd), initial=0.0), np.max(np.abs(analytic), initial=0.0), 1e-12)
    return float(np.max(np.abs(analytic - fd), initial=0.0) / scale)


def _fd_columns(fn, x0: np.ndarray, step_scale: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a vector-valued fn, column per parameter."""
    f0 = np.asarray(fn(x0))
    out = np.zeros((f0.size, x0.size))
    for c in range(x0.size):
        h = step_scale * max(abs(x0[c]), 1.0)
        xp = x0.copy()
        xp[c] += h
        xm = x0.copy()
        xm[c] -= h
        out[:, c] = (np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2.0 * h)
    return out


def _stable_rows(params: ParameterVector, pts: np.ndarray, cfg: HeavisideConfig) -> np.ndarray:
    """Rows safe for finite differencing: pre-step sum away from sigma joints."""
    s = presum(params, pts)
    joints = heaviside_breakpoints(cfg)
    dist = np.min(np.abs(s[:, None] - joints[None, :]), axis=1)
    return dist > KINK_MARGIN


def _random_params(kind: str, rng, n_bases: int = 3) -> ParameterVector:
    bases = []
    for _ in range(n_bases):
        alpha = rng.uniform(0.3, 0.9) * rng.choice([-1.0, 1.0])
        xi = rng.uniform(1.8, 3.2, size=3)
        if kind == KIND_SPHERICAL:
            bases.append(SphericalBasis(alpha, rng.uniform(0.7, 1.6), tuple(xi)))
        elif kind == KIND_ELLIPSOIDAL:
            A = rng.normal(size=(3, 3)) * 0.3
            B = A @ A.T + np.diag(rng.uniform(0.6, 1.8, size=3))
            bases.append(
                EllipsoidBasis(alpha, (B[0, 0], B[1, 0], B[2, 0], B[1, 1], B[2, 1], B[2, 2]), tuple(xi))
            )
        else:
            l6 = (
                rng.uniform(0.7, 1.4),
                rng.normal() * 0.3,
                rng.normal() * 0.3,
                rng.uniform(0.7, 1.4),
                rng.normal() * 0.3,
                rng.uniform(0.7, 1.4),
            )
            bases.append(CholeskyBasis(alpha, l6, tuple(xi)))
    return ParameterVector(kind, tuple(bases))


def _check_field(kind: str, rng, cfg: HeavisideConfig) -> float:
    params = _random_params(kind, rng)
    pts = rng.uniform(1.2, 3.8, size=(40, 3))
    keep = _stable_rows(params, pts, cfg)
    pts = pts[keep]
    if pts.shape[0] == 0:
        return 0.0
    _, jac = field_eval_points(params, pts, cfg, want_jacobian=True)
    analytic = jac.to_dense()

    def fn(flat):
        vals, _ = field_eval_points(params.from_flat(flat), pts, cfg)
        return vals

    fd = _fd_columns(fn, params.flatten())
    return _rel_err(analytic, fd)


def _random_acq(rng) -> AcquisitionParams:
    return AcquisitionParams(
        rng.uniform(-np.pi, np.pi), rng.uniform(-np.pi / 2, np.pi / 2), tuple(rng.normal(0, 0.2, 3))
    )


def _check_rot_params(rng) -> float:
    x_mid = (2.5, 2.5, 2.5)
    worst = 0.0
    for kind in (KIND_SPHERICAL, KIND_ELLIPSOIDAL):
        params = _random_params(kind, rng, n_bases=1)
        basis = params.bases[0]
        acq = _random_acq(rng)
        analytic = rot_jacobian_params(basis, acq, x_mid)

        def fn(flat):
            rotated = rotate_params(params.from_flat(flat), acq, x_mid)
            return rotated.bases[0].flatten()

        fd = _fd_columns(fn, basis.flatten(), step_scale=1e-6)
        worst = max(worst, _rel_err(analytic, fd))
    return worst


def _check_rot_acq(rng) -> float:
    x_mid = (2.5, 2.5, 2.5)
    worst = 0.0
    for kind in (KIND_SPHERICAL, KIND_ELLIPSOIDAL):
        params = _random_params(kind, rng, n_bases=1)
        basis = params.bases[0]
        acq = _random_acq(rng)
        analytic = rot_jacobian_acq(basis, acq, x_mid)
        nb = basis.flatten().size

        def fn(joint):
            b = type(basis).from_flat(joint[:nb])
            a = AcquisitionParams.from_flat(joint[nb:])
            rotated = rotate_params(params.with_bases((b,)), a, x_mid)
            return rotated.bases[0].flatten()

        joint0 = np.concatenate([basis.flatten(), acq.flatten()])
        fd = _fd_columns(fn, joint0, step_scale=1e-6)
        worst = max(worst, _rel_err(analytic, fd))
    return worst


def _experiment_setup(rng, kind=KIND_ELLIPSOIDAL):
    grid = GridSpec((10, 10, 10))
    params = _random_params(kind, rng)
    acq = _random_acq(rng)
    m_ext = ExtendedParameters(params, (acq,))
    return grid, m_ext


def _masked_rel_err(analytic: np.ndarray, fd: np.ndarray, rows_ok: np.ndarray) -> float:
    if not rows_ok.any():
        return 0.0
    return _rel_err(analytic[rows_ok], fd[rows_ok])


def _check_dip(rng) -> float:
    grid, m_ext = _experiment_setup(rng)
    _, analytic = dip_forward(m_ext, grid, 0)

    def fn(flat):
        tr, _ = dip_forward(m_ext.from_flat(flat), grid, 0, want_jacobian=False)
        return tr

    fd = _fd_columns(fn, m_ext.flatten())
    return _rel_err(analytic, fd)


def _check_sfs(rng) -> float:
    grid, m_ext = _experiment_setup(rng)
    img0, analytic = sfs_forward(m_ext, grid, 0)

    def fn(flat):
        img, _ = sfs_forward(m_ext.from_flat(flat), grid, 0, want_jacobian=False)
        return img.ravel(order="F")

    fd = _fd_columns(fn, m_ext.flatten())
    # drop rays whose increasing-run selection flips inside the probe window
    h = FD_STEP * np.maximum(np.abs(m_ext.flatten()), 1.0).max()
    probe = 4.0 * h
    base = img0.ravel(order="F")
    lo_img, _ = sfs_forward(_jitter(m_ext, -probe), grid, 0, want_jacobian=False)
    hi_img, _ = sfs_forward(_jitter(m_ext, probe), grid, 0, want_jacobian=False)
    rows_ok = np.abs(hi_img.ravel(order="F") - 2 * base + lo_img.ravel(order="F")) < 1e-4
    return _masked_rel_err(analytic, fd, rows_ok)


def _jitter(m_ext: ExtendedParameters, delta: float) -> ExtendedParameters:
    flat = m_ext.flatten()
    return m_ext.from_flat(flat + delta)


def _check_pc(rng) -> float:
    _, m_ext = _experiment_setup(rng)
    pts = rng.uniform(1.8, 3.2, size=(20, 3))
    nrm = rng.normal(size=(20, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    cloud = PointCloudData(pts, nrm, eps_offset=0.3)
    _, analytic = pc_residuals(m_ext, cloud, 0)

    def fn(flat):
        r, _ = pc_residuals(m_ext.from_flat(flat), cloud, 0, want_jacobian=False)
        return r

    fd = _fd_columns(fn, m_ext.flatten())
    # mask samples near sigma joints (C^1 points of the step function)
    from .calib import rotate_params as _rp

    rot = _rp(m_ext.pals, m_ext.acq_list[0], (2.5, 2.5, 2.5))
    rows_ok = _stable_rows(rot, cloud.sample_points(), HeavisideConfig())
    return _masked_rel_err(analytic, fd, rows_ok)


def _check_barrier(rng) -> float:
    params = _random_params(KIND_ELLIPSOIDAL, rng)
    _, grad, hess = logdet_barrier(params, weight=0.37)

    def val(flat):
        v, _, _ = logdet_barrier(params.from_flat(flat), 0.37)
        return np.array([v])

    flat0 = params.flatten()
    fd_grad = _fd_columns(val, flat0, step_scale=1e-6)[0]
    err = _rel_err(grad, fd_grad)

    def gradfn(flat):
        _, g, _ = logdet_barrier(params.from_flat(flat), 0.37)
        return g

    fd_hess = _fd_columns(gradfn, flat0, step_scale=1e-6)
    return max(err, _rel_err(hess, fd_hess))


_CHECKS = {
    "field-spherical": (lambda rng: _check_field(KIND_SPHERICAL, rng, HeavisideConfig()), 1e-5),
    "field-ellipsoid": (lambda rng: _check_field(KIND_ELLIPSOIDAL, rng, HeavisideConfig()), 1e-5),
    "field-cholesky": (lambda rng: _check_field(KIND_CHOLESKY, rng, HeavisideConfig()), 1e-5),
    "rot-params": (_check_rot_params, 1e-7),
    "rot-acq": (_check_rot_acq, 1e-7),
    "dip": (_check_dip, 1e-5),
    "sfs": (_check_sfs, 1e-5),
    "pointcloud": (_check_pc, 1e-5),
    "barrier": (_check_barrier, 1e-6),
}


def gradcheck(component: str = "all", trial_count: int = 5, seed: int = 0) -> GradcheckReport:
    """Run the finite-difference oracle for one family or all of them."""
    if component == "all":
        names = FAMILIES
    elif component in _CHECKS:
        names = (component,)
    else:
        raise ConfigError(f"unknown derivative family {component!r}; have {FAMILIES}")
    report = GradcheckReport()
    for name in names:
        fn, tol = _CHECKS[name]
        # stable per-family stream regardless of interpreter hash salting
        salt = sum(ord(c) for c in name)
        rng = np.random.default_rng(seed * 1009 + salt)
        worst = 0.0
        for _ in range(trial_count):
            worst = max(worst, fn(rng))
        report.families.append(FamilyReport(name, worst, tol, trial_count))
    return report
