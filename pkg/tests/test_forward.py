import numpy as np
import pytest

from pals3d.basis import EllipsoidBasis, KIND_ELLIPSOIDAL, KIND_SPHERICAL, ParameterVector, SphericalBasis
from pals3d.calib import AcquisitionParams, ExtendedParameters
from pals3d.errors import ConfigError
from pals3d.forward import (
    AMBIENT_TAU_BG,
    DipExperiment,
    PointCloudData,
    SilhouetteExperiment,
    dip_forward,
    pc_residuals,
    sfs_boundary_run,
    sfs_forward,
    softmax_vote,
)
from pals3d.grid import GridSpec

GRID = GridSpec((10, 10, 10))
RNG = np.random.default_rng(21)


def ellipsoid_m_ext(n_ex=1, seed=7):
    rng = np.random.default_rng(seed)
    bases = tuple(
        EllipsoidBasis.isotropic(0.6 * s, 0.9, rng.uniform(2.1, 2.9, 3)) for s in (1, -1, 1, 1)
    )
    pv = ParameterVector(KIND_ELLIPSOIDAL, bases)
    acqs = tuple(
        AcquisitionParams(rng.uniform(0, 6), rng.uniform(0, 3), tuple(rng.normal(0, 0.1, 3)))
        for _ in range(n_ex)
    )
    return ExtendedParameters(pv, acqs)


def test_boundary_run_hand_trace():
    run = sfs_boundary_run([0, 0, 0.3, 0.9, 1.0, 1.0, 0.2])
    assert run.tolist() == [2, 3, 4]


def test_boundary_run_empty_on_flat_background():
    assert sfs_boundary_run([0.0, 0.0, 0.0]).size == 0
    assert sfs_boundary_run(np.full(5, 0.04)).size == 0


def test_boundary_run_monotone_ray():
    # run starts at the first value above the background floor
    run = sfs_boundary_run([0.0, 0.25, 0.5, 0.75, 1.0])
    assert run.tolist() == [1, 2, 3, 4]


def test_softmax_limits():
    vals = [0.3, 0.9, 1.0]
    d50 = softmax_vote(vals, 50.0)
    assert abs(d50 - 0.999331) < 1e-4  # frozen from the definition
    assert softmax_vote(vals, 0.0) == pytest.approx(np.mean(vals))
    assert abs(softmax_vote(vals, 1e3) - 1.0) < 1e-3  # run-max limit
    assert softmax_vote([], 50.0) == 0.0
    d = softmax_vote(np.linspace(0, 1, 11), 7.0)
    assert 0.0 <= d <= 1.0


def test_dip_trace_uniform_field():
    pv = ParameterVector(KIND_SPHERICAL, (SphericalBasis(100.0, 0.2, (2.5, 2.5, 2.5)),))
    m = ExtendedParameters(pv, (AcquisitionParams(),))
    trace, _ = dip_forward(m, GRID, 0, want_jacobian=False)
    n1, n2, _ = GRID.dims
    assert np.allclose(trace, n1 * n2 * GRID.voxel_volume)


def test_dip_total_volume_rotation_invariant():
    m = ellipsoid_m_ext()
    grid = GridSpec((24, 24, 24))
    totals = []
    for th, ph in [(0, 0), (1.1, 0.6), (2.7, 1.9), (4.0, 2.5)]:
        m2 = ExtendedParameters(m.pals, (AcquisitionParams(th, ph, (0, 0, 0)),))
        trace, _ = dip_forward(m2, grid, 0, want_jacobian=False)
        totals.append(trace.sum())
    totals = np.array(totals)
    assert (totals.max() - totals.min()) / totals.mean() < 0.02


def test_dip_jacobian_matches_fd():
    m = ellipsoid_m_ext()
    trace, jac = dip_forward(m, GRID, 0)
    flat = m.flatten()
    worst = 0.0
    for c in range(flat.size):
        h = 1e-6 * max(abs(flat[c]), 1.0)
        fp, fm = flat.copy(), flat.copy()
        fp[c] += h
        fm[c] -= h
        tp, _ = dip_forward(m.from_flat(fp), GRID, 0, want_jacobian=False)
        tm, _ = dip_forward(m.from_flat(fm), GRID, 0, want_jacobian=False)
        worst = max(worst, np.abs((tp - tm) / (2 * h) - jac[:, c]).max())
    scale = max(np.abs(trace).max(), 1.0)
    assert worst / scale < 1e-5


def test_dip_other_experiment_columns_zero():
    m = ellipsoid_m_ext(n_ex=3)
    _, jac = dip_forward(m, GRID, 1)
    assert np.all(jac[:, m.acq_slice(0)] == 0.0)
    assert np.all(jac[:, m.acq_slice(2)] == 0.0)
    assert np.any(jac[:, m.acq_slice(1)] != 0.0)


def test_sfs_empty_object_image_zero():
    m = ExtendedParameters(ParameterVector(KIND_ELLIPSOIDAL), (AcquisitionParams(),))
    img, _ = sfs_forward(m, GRID, 0, want_jacobian=False)
    assert np.all(img == 0.0)  # ambient 0.5 never exceeds the run floor


def test_sfs_image_in_unit_interval_and_jacobian_fd():
    m = ellipsoid_m_ext()
    img, jac = sfs_forward(m, GRID, 0)
    assert img.min() >= 0.0 and img.max() <= 1.0
    flat = m.flatten()
    worst = 0.0
    for c in range(flat.size):
        h = 1e-6 * max(abs(flat[c]), 1.0)
        fp, fm = flat.copy(), flat.copy()
        fp[c] += h
        fm[c] -= h
        ip, _ = sfs_forward(m.from_flat(fp), GRID, 0, want_jacobian=False)
        im, _ = sfs_forward(m.from_flat(fm), GRID, 0, want_jacobian=False)
        fd = ((ip - im) / (2 * h)).ravel(order="F")
        worst = max(worst, np.abs(fd - jac[:, c]).max())
    assert worst < 1e-5


def test_sfs_eta_limit_hits_run_max():
    m = ellipsoid_m_ext()
    img_sharp, _ = sfs_forward(m, GRID, 0, eta=1e3, want_jacobian=False)
    # compare against the exact run maxima via a tiny reimplementation
    from pals3d.calib import rotate_params
    from pals3d.field import field_grid_engine
    from pals3d.forward import _run_masks

    rot = rotate_params(m.pals, m.acq_list[0], GRID.midpoint)
    _, u, _ = field_grid_engine(rot, GRID, None)
    rays = u.reshape((100, 10), order="F")
    mask = _run_masks(rays, AMBIENT_TAU_BG)
    expect = np.where(mask.any(axis=1), np.where(mask, rays, -np.inf).max(axis=1), 0.0)
    assert np.abs(img_sharp.ravel(order="F") - expect).max() < 1e-3


def test_pc_residual_blocks():
    pts = RNG.uniform(2.0, 3.0, size=(8, 3))
    nrm = RNG.normal(size=(8, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    cloud = PointCloudData(pts, nrm, eps_offset=0.3)
    empty = ExtendedParameters(ParameterVector(KIND_ELLIPSOIDAL), (AcquisitionParams(),))
    res, _ = pc_residuals(empty, cloud, 0, want_jacobian=False)
    assert res.shape == (24,)
    assert np.allclose(res[:8], 0.5 - 0.7)
    assert np.allclose(res[8:16], 0.5)
    assert np.allclose(res[16:], -0.5)


def test_pc_residuals_grid_free():
    m = ellipsoid_m_ext()
    pts = RNG.uniform(2.0, 3.0, size=(10, 3))
    nrm = RNG.normal(size=(10, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    cloud = PointCloudData(pts, nrm, eps_offset=0.25)
    r1, _ = pc_residuals(m, cloud, 0, want_jacobian=False)
    r2, _ = pc_residuals(m, cloud, 0, want_jacobian=False)
    assert np.array_equal(r1, r2)  # no grid argument exists to vary


def test_pc_jacobian_matches_fd():
    m = ellipsoid_m_ext()
    pts = RNG.uniform(2.0, 3.0, size=(20, 3))
    nrm = RNG.normal(size=(20, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    cloud = PointCloudData(pts, nrm, eps_offset=0.3)
    _, jac = pc_residuals(m, cloud, 0)
    flat = m.flatten()
    worst = 0.0
    for c in range(flat.size):
        h = 1e-6 * max(abs(flat[c]), 1.0)
        fp, fm = flat.copy(), flat.copy()
        fp[c] += h
        fm[c] -= h
        rp, _ = pc_residuals(m.from_flat(fp), cloud, 0, want_jacobian=False)
        rm, _ = pc_residuals(m.from_flat(fm), cloud, 0, want_jacobian=False)
        worst = max(worst, np.abs((rp - rm) / (2 * h) - jac[:, c]).max())
    assert worst < 1e-5


def test_experiment_validation():
    with pytest.raises(ConfigError):
        DipExperiment(AcquisitionParams(), np.array([-1.0, 2.0]))
    with pytest.raises(ConfigError):
        SilhouetteExperiment(AcquisitionParams(), np.ones((4, 4)) * 1.5)
    with pytest.raises(ConfigError):
        SilhouetteExperiment(AcquisitionParams(), np.ones((4, 4)), eta=0.0)
    with pytest.raises(ConfigError):
        PointCloudData(np.ones((3, 3)), np.ones((3, 3)) * 0.5, 0.1)
