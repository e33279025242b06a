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
from pals3d.errors import ConfigError, SingularBasisError
from pals3d.field import SparseJacobian, field_eval, field_eval_points, field_presum_grid
from pals3d.grid import GridSpec, binarize
from pals3d.kernels import HeavisideConfig, heaviside_deriv

GRID = GridSpec((12, 12, 12))
CFG = HeavisideConfig()


def spherical_pv(alpha=1.0, beta=1.0, xi=(2.5, 2.5, 2.5)):
    return ParameterVector(KIND_SPHERICAL, (SphericalBasis(alpha, beta, xi),))


def test_empty_params_ambient_half():
    fld, _ = field_eval(ParameterVector(KIND_SPHERICAL), GRID)
    assert np.all(fld.values == 0.5)


def test_field_at_center_saturates():
    vals, _ = field_eval_points(spherical_pv(), [(2.5, 2.5, 2.5)])
    assert vals[0] == 1.0  # sigma(psi(sqrt(eps))) saturates above delta+eps


def test_far_point_ambient():
    vals, _ = field_eval_points(spherical_pv(), [(0.1, 0.1, 0.1)])
    assert vals[0] == 0.5


def test_ellipsoid_identity_matches_spherical():
    pe = ParameterVector(KIND_ELLIPSOIDAL, (EllipsoidBasis.isotropic(1.0, 1.0, (2.5, 2.5, 2.5)),))
    fs, _ = field_eval(spherical_pv(), GRID)
    fe, _ = field_eval(pe, GRID)
    assert np.array_equal(fs.values, fe.values)


def test_cholesky_matches_ellipsoid_with_llt():
    rng = np.random.default_rng(5)
    l6 = (1.1, 0.3, -0.2, 0.9, 0.25, 1.2)
    L = np.array([[l6[0], 0, 0], [l6[1], l6[3], 0], [l6[2], l6[4], l6[5]]])
    B = L @ L.T
    pc = ParameterVector(KIND_CHOLESKY, (CholeskyBasis(0.8, l6, (2.4, 2.6, 2.5)),))
    pe = ParameterVector(
        KIND_ELLIPSOIDAL,
        (EllipsoidBasis(0.8, (B[0, 0], B[1, 0], B[2, 0], B[1, 1], B[2, 1], B[2, 2]), (2.4, 2.6, 2.5)),),
    )
    pts = rng.uniform(1.5, 3.5, size=(60, 3))
    vc, _ = field_eval_points(pc, pts)
    ve, _ = field_eval_points(pe, pts)
    assert np.allclose(vc, ve, atol=5e-14)


def test_points_match_grid_bitwise():
    pv = ParameterVector(
        KIND_ELLIPSOIDAL,
        (
            EllipsoidBasis.isotropic(0.7, 1.1, (2.2, 2.6, 2.4)),
            EllipsoidBasis.isotropic(-0.4, 0.8, (2.9, 2.2, 2.7)),
        ),
    )
    fld, _ = field_eval(pv, GRID)
    vals, _ = field_eval_points(pv, GRID.cell_centers())
    assert np.array_equal(fld.values, vals)


def test_singular_ellipsoid_raises():
    bad = EllipsoidBasis(1.0, (1.0, 0.0, 0.0, 1.0, 0.0, -0.5), (2.5, 2.5, 2.5))
    with pytest.raises(SingularBasisError):
        field_eval(ParameterVector(KIND_ELLIPSOIDAL, (bad,)), GRID)


@pytest.mark.parametrize("kind", [KIND_SPHERICAL, KIND_ELLIPSOIDAL, KIND_CHOLESKY])
def test_jacobian_matches_fd(kind):
    rng = np.random.default_rng(11)
    if kind == KIND_SPHERICAL:
        bases = tuple(
            SphericalBasis(rng.uniform(0.3, 0.8) * s, rng.uniform(0.8, 1.4), rng.uniform(2.0, 3.0, 3))
            for s in (1, -1)
        )
    elif kind == KIND_ELLIPSOIDAL:
        bases = tuple(
            EllipsoidBasis(
                rng.uniform(0.3, 0.8) * s,
                (1.2, 0.15, -0.1, 1.0, 0.2, 0.9),
                rng.uniform(2.0, 3.0, 3),
            )
            for s in (1, -1)
        )
    else:
        bases = tuple(
            CholeskyBasis(
                rng.uniform(0.3, 0.8) * s,
                (1.05, 0.2, -0.15, 0.95, 0.1, 1.1),
                rng.uniform(2.0, 3.0, 3),
            )
            for s in (1, -1)
        )
    pv = ParameterVector(kind, bases)
    pts = rng.uniform(1.5, 3.5, size=(30, 3))
    vals, jac = field_eval_points(pv, pts, want_jacobian=True)
    dense = jac.to_dense()
    flat = pv.flatten()
    worst = 0.0
    for c in range(flat.size):
        h = 1e-6 * max(abs(flat[c]), 1.0)
        fp, fm = flat.copy(), flat.copy()
        fp[c] += h
        fm[c] -= h
        vp, _ = field_eval_points(pv.from_flat(fp), pts)
        vm, _ = field_eval_points(pv.from_flat(fm), pts)
        fd = (vp - vm) / (2 * h)
        worst = max(worst, np.abs(fd - dense[:, c]).max())
    assert worst < 1e-5


def test_jacobian_row_support_pattern():
    pv = spherical_pv()
    grid = GridSpec((24, 24, 24))
    _, jac = field_eval(pv, grid, want_jacobian=True)
    s = field_presum_grid(pv, grid)
    sigma_p = heaviside_deriv(CFG, s)
    expected = set(np.flatnonzero((sigma_p != 0.0) & (s != 0.0)).tolist())
    assert set(jac.nonzero_rows().tolist()) == expected


def test_sparse_jacobian_dedup_and_sort():
    j = SparseJacobian(3, 3, [2, 0, 2], [1, 0, 1], [0.5, 1.0, 0.25])
    assert j.nnz == 2
    assert j.rows.tolist() == [0, 2] and j.cols.tolist() == [0, 1]
    assert j.vals.tolist() == [1.0, 0.75]
    with pytest.raises(ConfigError):
        SparseJacobian(2, 2, [0], [0], [np.nan])


def test_binarize_contract():
    fld, _ = field_eval(ParameterVector(KIND_SPHERICAL), GRID)  # all 0.5
    assert np.all(binarize(fld, 0.7).values == 0.0)
    ones = field_eval(spherical_pv(alpha=100.0, beta=0.2), GRID)[0]
    assert np.all(binarize(ones, 0.7).values == 1.0)
    exact = binarize(
        type(fld)(fld.grid, np.full(GRID.n_voxels, 0.7)), 0.7
    )
    assert np.all(exact.values == 0.0)  # strict inequality
    with pytest.raises(ConfigError):
        binarize(fld, 1.5)
