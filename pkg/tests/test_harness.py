import numpy as np
import pytest

from pals3d.calib import AcquisitionParams, RigidTransform, rotation_matrix
from pals3d.errors import ConfigError
from pals3d.grid import GridSpec, ScalarField
from pals3d.harness import (
    BoxPrim,
    EllipsoidPrim,
    NoiseSpec,
    Phantom,
    builtin_phantom,
    compare,
    downsample,
    exact_ellipsoid_trace,
    iou,
    simulate,
    volume_rel_err,
    voxelize,
)

MID = (2.5, 2.5, 2.5)
G_HI = GridSpec((64, 64, 64))
G_LO = GridSpec((32, 32, 32))


def test_voxelize_full_cube():
    ph = Phantom("cube", (BoxPrim(MID, (2.5, 2.5, 2.5)),))
    fld = voxelize(ph, GridSpec((8, 8, 8)))
    assert np.all(fld.values == 1.0)


def test_voxelize_sphere_volume():
    ph = Phantom("s", (EllipsoidPrim(MID, (1.5, 1.5, 1.5)),))
    fld = voxelize(ph, G_HI)
    vol = fld.values.sum() * G_HI.voxel_volume
    expect = 4 / 3 * np.pi * 1.5**3
    assert abs(vol - expect) / expect < 0.03


def test_downsample_constant_and_divisibility():
    fld = ScalarField(GridSpec((8, 8, 8)), np.full(512, 0.25))
    small = downsample(fld, 2)
    assert small.grid.dims == (4, 4, 4)
    assert np.allclose(small.values, 0.25)
    with pytest.raises(ConfigError):
        downsample(fld, 3)


def test_downsample_preserves_mean():
    rng = np.random.default_rng(0)
    vals = rng.uniform(0, 1, 64**3)
    fld = ScalarField(G_HI, vals)
    small = downsample(fld, 2)
    assert small.values.mean() == pytest.approx(vals.mean(), rel=1e-12)


def test_iou_metric_basics():
    a = ScalarField(GridSpec((4, 4, 4)), (np.arange(64) < 10).astype(float))
    empty = ScalarField(GridSpec((4, 4, 4)), np.zeros(64))
    assert iou(a, a) == 1.0
    assert iou(a, empty) == 0.0
    assert iou(empty, empty) == 1.0
    assert volume_rel_err(a, a) == 0.0
    m = compare(a, a, [3.0, 1.0])
    assert m.iou == 1.0 and m.misfit_history.tolist() == [3.0, 1.0]


def test_exact_trace_total_volume():
    prim = EllipsoidPrim(MID, (1.8, 1.3, 1.1))
    acq = AcquisitionParams(0.7, 1.1, (0.1, -0.05, 0.02))
    tr = exact_ellipsoid_trace(prim, acq, G_LO)
    assert tr.sum() == pytest.approx(prim.volume(), rel=1e-12)
    assert np.all(tr >= 0)


def test_exact_trace_matches_voxel_counting():
    prim = EllipsoidPrim(MID, (1.8, 1.3, 1.1))
    ph = Phantom("e", (prim,))
    acq = AcquisitionParams(2.2, 0.8, (0, 0, 0))
    exact = exact_ellipsoid_trace(prim, acq, G_LO)
    t = RigidTransform(acq, MID)
    hi = voxelize(ph.transformed(t), G_HI)
    counted = (G_HI.voxel_volume * hi.cube().sum(axis=(0, 1))).reshape(32, 2).sum(axis=1)
    assert np.abs(exact - counted).max() < 6 * G_HI.voxel_volume * 64


def test_primitive_rigid_transform_consistency():
    rng = np.random.default_rng(4)
    for prim in (EllipsoidPrim(MID, (1.2, 0.9, 0.7)), BoxPrim(MID, (1.0, 0.7, 0.5))):
        acq = AcquisitionParams(rng.uniform(0, 6), rng.uniform(0, 3), tuple(rng.normal(0, 0.1, 3)))
        t = RigidTransform(acq, MID)
        moved = prim.transformed(t)
        pts = rng.uniform(0.5, 4.5, size=(500, 3))
        from pals3d.calib import transform_inverse

        direct = moved.contains(pts)
        pulled = prim.contains(transform_inverse(t, pts))
        assert np.array_equal(direct, pulled)


def test_surface_samples_on_surface_with_unit_normals():
    ph = builtin_phantom("dumbbell")
    rng = np.random.default_rng(1)
    pts, nrm = ph.surface_sample(300, rng)
    assert pts.shape == (300, 3) and nrm.shape == (300, 3)
    assert np.allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-9)
    sdf = ph.sdf(pts)
    diag = np.linalg.norm(G_HI.spacing)
    assert np.abs(sdf).max() < diag


def test_simulate_zero_noise_records_truth():
    ph = builtin_phantom("sphere")
    exps, true_acqs = simulate(ph, "dip", 3, NoiseSpec(0.0, 0.0, 0.0, seed=5), G_HI, G_LO)
    for e, a in zip(exps, true_acqs):
        assert e.acq.flatten().tolist() == a.flatten().tolist()


def test_simulate_noise_perturbs_recorded_not_data():
    ph = builtin_phantom("sphere")
    noisy, true_acqs = simulate(ph, "dip", 4, NoiseSpec(0.0, 4.0, 0.04, seed=6), G_HI, G_LO)
    clean, _ = simulate(ph, "dip", 4, NoiseSpec(0.0, 0.0, 0.0, seed=6), G_HI, G_LO)
    for n, c, a in zip(noisy, clean, true_acqs):
        assert not np.array_equal(n.acq.flatten(), a.flatten())
        assert np.array_equal(n.observed, c.observed)  # data from true params


def test_simulate_trace_noise_statistics():
    ph = builtin_phantom("sphere")
    sigma_expect = 2.0 * G_LO.voxel_volume
    # gather many noise samples from interior slices (values >> sigma, no clipping)
    clean, _ = simulate(ph, "dip", 1, NoiseSpec(0.0, 0.0, 0.0, seed=1), G_HI, G_LO)
    samples = []
    for seed in range(40):
        noisy, _ = simulate(ph, "dip", 1, NoiseSpec(2.0, 0.0, 0.0, seed=1000 + seed), G_HI, G_LO)
        diff = noisy[0].observed - clean[0].observed
        big = clean[0].observed > 20 * sigma_expect
        samples.append(diff[big])
    samples = np.concatenate(samples)
    assert samples.size > 300
    assert abs(samples.std() - sigma_expect) / sigma_expect < 0.05


def test_simulate_reproducible():
    ph = builtin_phantom("dumbbell")
    a1, t1 = simulate(ph, "dip", 3, NoiseSpec(seed=9), G_HI, G_LO)
    a2, t2 = simulate(ph, "dip", 3, NoiseSpec(seed=9), G_HI, G_LO)
    for e1, e2 in zip(a1, a2):
        assert np.array_equal(e1.observed, e2.observed)
        assert e1.acq.flatten().tolist() == e2.acq.flatten().tolist()


def test_simulate_sfs_and_pc_shapes():
    ph = builtin_phantom("sphere")
    sfs, _ = simulate(ph, "sfs", 2, NoiseSpec(0.0, 0.0, 0.0, seed=2), G_HI, G_LO)
    assert sfs[0].observed.shape == (32, 32)
    assert sfs[0].observed.min() >= 0.0 and sfs[0].observed.max() <= 1.0
    pc, _ = simulate(ph, "pc", 2, NoiseSpec(0.0, 0.0, 0.0, seed=2), G_HI, G_LO, n_points=100)
    cloud, acq = pc[0]
    assert cloud.n_points == 100
    # transformed samples stay near the transformed sphere surface
    t = RigidTransform(acq, MID)
    moved = ph.transformed(t)
    assert np.abs(moved.sdf(cloud.points)).max() < np.linalg.norm(G_HI.spacing)


def test_builtin_phantom_unknown():
    with pytest.raises(ConfigError):
        builtin_phantom("nope")
