import numpy as np
import pytest

from pals3d.basis import (
    CholeskyBasis,
    EllipsoidBasis,
    KIND_CHOLESKY,
    KIND_ELLIPSOIDAL,
    KIND_SPHERICAL,
    ParameterVector,
    SphericalBasis,
)
from pals3d.calib import (
    AcquisitionParams,
    ExtendedParameters,
    RigidTransform,
    extended_rot_blocks,
    rot_jacobian_acq,
    rot_jacobian_params,
    rotate_params,
    rotation_matrix,
    rotation_matrix_derivs,
    transform_apply,
    transform_inverse,
    warp_field,
)
from pals3d.errors import UnsupportedKindError
from pals3d.field import field_eval, field_eval_points
from pals3d.grid import GridSpec, binarize

MID = (2.5, 2.5, 2.5)
RNG = np.random.default_rng(7)


def random_acq(rng=RNG):
    return AcquisitionParams(rng.uniform(-3, 3), rng.uniform(-1.5, 1.5), tuple(rng.normal(0, 0.2, 3)))


def test_rotation_identity_at_zero():
    assert np.allclose(rotation_matrix(0.0, 0.0), np.eye(3), atol=0)


def test_rotation_orthogonality():
    for _ in range(10):
        q = rotation_matrix(RNG.uniform(-4, 4), RNG.uniform(-4, 4))
        assert np.abs(q.T @ q - np.eye(3)).max() < 1e-12
        v = RNG.normal(size=3)
        assert abs(np.linalg.norm(q @ v) - np.linalg.norm(v)) < 1e-12


def test_rotation_convention_maps_e1_to_e2():
    q = rotation_matrix(np.pi / 2, 0.0)
    assert np.allclose(q @ np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), atol=1e-15)


def test_rotation_derivs_match_fd():
    th, ph = 0.63, -0.41
    qt, qp = rotation_matrix_derivs(th, ph)
    h = 1e-7
    fd_t = (rotation_matrix(th + h, ph) - rotation_matrix(th - h, ph)) / (2 * h)
    fd_p = (rotation_matrix(th, ph + h) - rotation_matrix(th, ph - h)) / (2 * h)
    assert np.abs(qt - fd_t).max() < 1e-9
    assert np.abs(qp - fd_p).max() < 1e-9


def test_transform_round_trip_and_fixed_point():
    acq = random_acq()
    t = RigidTransform(acq, MID)
    x = RNG.uniform(0, 5, size=(20, 3))
    assert np.abs(transform_inverse(t, transform_apply(t, x)) - x).max() < 1e-12
    assert np.allclose(transform_apply(t, np.array(MID)), np.array(MID) + np.array(acq.b))


def test_rotate_params_identity():
    pv = ParameterVector(
        KIND_ELLIPSOIDAL, (EllipsoidBasis(0.5, (1.1, 0.1, 0.0, 0.9, 0.1, 1.0), (2.0, 2.2, 2.8)),)
    )
    out = rotate_params(pv, AcquisitionParams(), MID)
    assert np.array_equal(out.flatten(), pv.flatten())


def test_rotate_params_spherical_moves_center_only():
    b = SphericalBasis(0.8, 1.2, (2.0, 2.4, 2.6))
    acq = random_acq()
    out = rotate_params(ParameterVector(KIND_SPHERICAL, (b,)), acq, MID)
    rb = out.bases[0]
    assert rb.alpha == b.alpha and rb.beta == b.beta
    t = RigidTransform(acq, MID)
    assert np.allclose(rb.xi, transform_apply(t, np.array(b.xi)))


def test_rotate_params_ellipsoid_preserves_spectrum():
    b = EllipsoidBasis(0.5, (1.4, 0.2, -0.1, 1.0, 0.15, 0.8), (2.0, 2.4, 2.6))
    acq = random_acq()
    out = rotate_params(ParameterVector(KIND_ELLIPSOIDAL, (b,)), acq, MID)
    w0 = np.linalg.eigvalsh(b.b_matrix)
    w1 = np.linalg.eigvalsh(out.bases[0].b_matrix)
    assert np.allclose(w0, w1, rtol=1e-12)
    assert abs(out.bases[0].det() - b.det()) < 1e-12


def test_rotate_params_cholesky_unsupported():
    pv = ParameterVector(KIND_CHOLESKY, (CholeskyBasis(1.0, (1, 0, 0, 1, 0, 1), MID),))
    with pytest.raises(UnsupportedKindError):
        rotate_params(pv, random_acq(), MID)
    with pytest.raises(UnsupportedKindError):
        rot_jacobian_params(pv.bases[0], random_acq(), MID)


@pytest.mark.parametrize("kind", [KIND_SPHERICAL, KIND_ELLIPSOIDAL])
def test_rot_jacobian_params_identity_and_fd(kind):
    if kind == KIND_SPHERICAL:
        basis = SphericalBasis(0.8, 1.2, (2.0, 2.4, 2.6))
    else:
        basis = EllipsoidBasis(0.5, (1.4, 0.2, -0.1, 1.0, 0.15, 0.8), (2.0, 2.4, 2.6))
    eye = rot_jacobian_params(basis, AcquisitionParams(), MID)
    assert np.array_equal(eye, np.eye(eye.shape[0]))

    acq = random_acq()
    jac = rot_jacobian_params(basis, acq, MID)
    pv = ParameterVector(kind, (basis,))
    flat0 = basis.flatten()
    worst = 0.0
    for c in range(flat0.size):
        h = 1e-7 * max(abs(flat0[c]), 1.0)
        fp, fm = flat0.copy(), flat0.copy()
        fp[c] += h
        fm[c] -= h
        rp = rotate_params(pv.from_flat(fp), acq, MID).bases[0].flatten()
        rm = rotate_params(pv.from_flat(fm), acq, MID).bases[0].flatten()
        worst = max(worst, np.abs((rp - rm) / (2 * h) - jac[:, c]).max())
    assert worst < 1e-7
    if kind == KIND_SPHERICAL:
        corner = jac[2:5, 2:5]
        assert np.abs(corner @ corner.T - np.eye(3)).max() < 1e-12


@pytest.mark.parametrize("kind", [KIND_SPHERICAL, KIND_ELLIPSOIDAL])
def test_rot_jacobian_acq_fd(kind):
    if kind == KIND_SPHERICAL:
        basis = SphericalBasis(0.8, 1.2, (2.0, 2.4, 2.6))
    else:
        basis = EllipsoidBasis(0.5, (1.4, 0.2, -0.1, 1.0, 0.15, 0.8), (2.0, 2.4, 2.6))
    acq = random_acq()
    jac = rot_jacobian_acq(basis, acq, MID)
    nb = basis.flatten().size
    assert jac.shape == (nb, nb + 5)
    # translation block is exactly [0; 0; I3]
    assert np.array_equal(jac[-3:, nb + 2 :], np.eye(3))
    assert np.all(jac[:-3, nb + 2 :] == 0.0)

    pv = ParameterVector(kind, (basis,))

    def rot_flat(joint):
        b = type(basis).from_flat(joint[:nb])
        a = AcquisitionParams.from_flat(joint[nb:])
        return rotate_params(pv.with_bases((b,)), a, MID).bases[0].flatten()

    joint0 = np.concatenate([basis.flatten(), acq.flatten()])
    worst = 0.0
    for c in range(joint0.size):
        h = 1e-7 * max(abs(joint0[c]), 1.0)
        jp, jm = joint0.copy(), joint0.copy()
        jp[c] += h
        jm[c] -= h
        worst = max(worst, np.abs((rot_flat(jp) - rot_flat(jm)) / (2 * h) - jac[:, c]).max())
    assert worst < 1e-7


def test_rot_jacobian_acq_center_at_mid():
    basis = SphericalBasis(1.0, 1.0, MID)
    jac = rot_jacobian_acq(basis, AcquisitionParams(0.0, 0.0, (0, 0, 0)), MID)
    assert np.all(jac[:, 5] == 0.0) and np.all(jac[:, 6] == 0.0)  # z_theta = z_phi = 0


def test_extended_rot_blocks_match_per_basis():
    pv = ParameterVector(
        KIND_ELLIPSOIDAL,
        (
            EllipsoidBasis(0.5, (1.4, 0.2, -0.1, 1.0, 0.15, 0.8), (2.0, 2.4, 2.6)),
            EllipsoidBasis(-0.3, (0.9, 0.0, 0.1, 1.2, -0.1, 1.1), (3.0, 2.1, 2.2)),
        ),
    )
    acq = random_acq()
    d_own, d_acq = extended_rot_blocks(pv, acq, MID)
    for i, b in enumerate(pv.bases):
        full = rot_jacobian_acq(b, acq, MID)
        assert np.allclose(d_own[i], full[:, :10], atol=1e-14)
        assert np.allclose(d_acq[i], full[:, 10:], atol=1e-14)


def test_spherical_rotation_identity_grid_free():
    pv = ParameterVector(
        KIND_SPHERICAL,
        (
            SphericalBasis(0.9, 1.2, (2.2, 2.7, 2.4)),
            SphericalBasis(-0.5, 0.9, (2.8, 2.3, 2.6)),
        ),
    )
    rng = np.random.default_rng(3)
    for _ in range(5):
        acq = random_acq(rng)
        rot = rotate_params(pv, acq, MID)
        t = RigidTransform(acq, MID)
        x = rng.uniform(0.5, 4.5, size=(100, 3))
        va, _ = field_eval_points(rot, x)
        vb, _ = field_eval_points(pv, transform_inverse(t, x))
        assert np.abs(va - vb).max() < 1e-10


def test_warp_identity_and_zero_field():
    grid = GridSpec((16, 16, 16))
    pv = ParameterVector(KIND_SPHERICAL, (SphericalBasis(1.0, 1.0, MID),))
    fld, _ = field_eval(pv, grid)
    out = warp_field(fld, RigidTransform(AcquisitionParams(), MID))
    assert np.abs(out.values - fld.values).max() < 1e-12
    zero = type(fld)(grid, np.zeros(grid.n_voxels))
    assert np.all(warp_field(zero, RigidTransform(random_acq(), MID)).values == 0.0)


def test_warp_matches_rotated_params_iou():
    grid = GridSpec((32, 32, 32))
    pv = ParameterVector(KIND_SPHERICAL, (SphericalBasis(2.0, 0.7, MID),))
    fld, _ = field_eval(pv, grid)
    rng = np.random.default_rng(17)
    for _ in range(5):
        acq = AcquisitionParams(rng.uniform(0, 2 * np.pi), rng.uniform(0, np.pi), tuple(rng.uniform(-0.2, 0.2, 3)))
        rot_fld, _ = field_eval(rotate_params(pv, acq, MID), grid)
        warped = warp_field(fld, RigidTransform(acq, MID))
        a = binarize(rot_fld, 0.7).values > 0.5
        b = binarize(warped, 0.7).values > 0.5
        iou = (a & b).sum() / max((a | b).sum(), 1)
        assert iou >= 0.95


def test_extended_parameters_layout():
    pv = ParameterVector(
        KIND_ELLIPSOIDAL, (EllipsoidBasis.isotropic(0.4, 1.0, MID),)
    )
    acqs = (random_acq(), random_acq(), random_acq())
    m = ExtendedParameters(pv, acqs)
    assert m.n_total == 10 + 15
    flat = m.flatten()
    back = m.from_flat(flat)
    assert np.array_equal(back.flatten(), flat)
    assert flat[m.acq_slice(1)].tolist() == list(acqs[1].flatten())
