"""Rigid acquisition transforms and their action on basis parameters.

The per-experiment pose is a rotation about the domain midpoint followed
by a translation: T(x) = Q(theta, phi) (x - x_mid) + b + x_mid, with the
fixed convention Q = Rz(theta) @ Ry(phi). Rotating the *parameters* of the
level set reproduces the warped field exactly (spherical kind) or up to
round-off (ellipsoidal kind), and both rotations are analytically
differentiable in all basis and acquisition parameters.
"""

from dataclasses import dataclass

import numpy as np

from .basis import (
    KIND_ELLIPSOIDAL,
    KIND_SPHERICAL,
    EllipsoidBasis,
    ParameterVector,
    SphericalBasis,
    duplication_matrix,
    sym_from_tril,
    tril_from_sym,
    params_per_basis,
    TRIL_OF_VEC,
)
from .errors import ConfigError, UnsupportedKindError
from .grid import GridSpec, ScalarField

ACQ_PARAMS = 5  # theta, phi, b (3)


@dataclass(frozen=True)
class AcquisitionParams:
    theta: float = 0.0
    phi: float = 0.0
    b: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "phi", float(self.phi))
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))
        vals = (self.theta, self.phi, *self.b)
        if not all(np.isfinite(v) for v in vals):
            raise ConfigError("acquisition parameters must be finite")

    def flatten(self) -> np.ndarray:
        return np.array([self.theta, self.phi, *self.b])

    @staticmethod
    def from_flat(v) -> "AcquisitionParams":
        return AcquisitionParams(v[0], v[1], (v[2], v[3], v[4]))


def rotation_matrix(theta: float, phi: float) -> np.ndarray:
    """Orthogonal Q = Ry(phi) @ Rz(theta): spin in azimuth, then tilt in polar.

    With this order the slicing direction of the dip model, row 3 of Q,
    moves with BOTH angles (except at the poles), so both are identifiable
    from tomographic data.
    """
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    rz = np.array([[ct, -st, 0.0], [st, ct, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    return ry @ rz


def rotation_matrix_derivs(theta: float, phi: float) -> tuple[np.ndarray, np.ndarray]:
    """(dQ/dtheta, dQ/dphi) for Q = Ry(phi) @ Rz(theta)."""
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rz = np.array([[ct, -st, 0.0], [st, ct, 0.0], [0.0, 0.0, 1.0]])
    drz = np.array([[-st, -ct, 0.0], [ct, -st, 0.0], [0.0, 0.0, 0.0]])
    dry = np.array([[-sp, 0.0, cp], [0.0, 0.0, 0.0], [-cp, 0.0, -sp]])
    return ry @ drz, dry @ rz


@dataclass(frozen=True)
class RigidTransform:
    acq: AcquisitionParams
    x_mid: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "x_mid", tuple(float(v) for v in self.x_mid))

    @property
    def q(self) -> np.ndarray:
        return rotation_matrix(self.acq.theta, self.acq.phi)


def transform_apply(t: RigidTransform, x) -> np.ndarray:
    """T(x) = Q (x - x_mid) + b + x_mid; x may be (3,) or (n, 3)."""
    x = np.asarray(x, dtype=float)
    mid = np.asarray(t.x_mid)
    return (x - mid) @ t.q.T + np.asarray(t.acq.b) + mid


def transform_inverse(t: RigidTransform, x) -> np.ndarray:
    """T^{-1}(x) = Q^T (x - x_mid - b) + x_mid."""
    x = np.asarray(x, dtype=float)
    mid = np.asarray(t.x_mid)
    return (x - mid - np.asarray(t.acq.b)) @ t.q + mid


def rotate_params(
    params: ParameterVector, acq: AcquisitionParams, x_mid
) -> ParameterVector:
    """Carry the acquisition pose onto the basis parameters.

    Spherical bases only move their centers; ellipsoidal bases also conjugate
    the shape matrix, B -> Q B Q^T. The Cholesky kind has no analytic rotation
    rule and is rejected.
    """
    t = RigidTransform(acq, tuple(x_mid))
    if params.kind == KIND_SPHERICAL:
        bases = tuple(
            SphericalBasis(b.alpha, b.beta, tuple(transform_apply(t, b.xi)))
            for b in params.bases
        )
    elif params.kind == KIND_ELLIPSOIDAL:
        q = t.q
        bases = tuple(
            EllipsoidBasis(
                b.alpha,
                tuple(tril_from_sym(q @ b.b_matrix @ q.T)),
                tuple(transform_apply(t, b.xi)),
            )
            for b in params.bases
        )
    else:
        raise UnsupportedKindError("no analytic rotation rule for the cholesky kind")
    return params.with_bases(bases)


def _tril_conjugation_jacobian(q: np.ndarray) -> np.ndarray:
    """6x6 Jacobian of b_tril -> tril(Q B Q^T): rows of (Q kron Q) P at the tril indices."""
    P = duplication_matrix()
    return (np.kron(q, q) @ P)[list(TRIL_OF_VEC), :]


def rot_jacobian_params(basis, acq: AcquisitionParams, x_mid) -> np.ndarray:
    """Jacobian of the rotated basis w.r.t. its own parameters (5x5 or 10x10)."""
    q = rotation_matrix(acq.theta, acq.phi)
    if isinstance(basis, SphericalBasis):
        out = np.zeros((5, 5))
        out[0, 0] = 1.0
        out[1, 1] = 1.0
        out[2:5, 2:5] = q
        return out
    if isinstance(basis, EllipsoidBasis):
        out = np.zeros((10, 10))
        out[0, 0] = 1.0
        out[1:7, 1:7] = _tril_conjugation_jacobian(q)
        out[7:10, 7:10] = q
        return out
    raise UnsupportedKindError("no rotation Jacobian for the cholesky kind")


def rot_jacobian_acq(basis, acq: AcquisitionParams, x_mid) -> np.ndarray:
    """Jacobian of the rotated basis w.r.t. (own params, theta, phi, b).

    Shapes: 5x10 (spherical), 10x15 (ellipsoidal). The leading square block is
    rot_jacobian_params; then one column each for theta and phi, and I3 w.r.t.
    the translation (acting on the rotated center only).
    """
    q_t, q_p = rotation_matrix_derivs(acq.theta, acq.phi)
    z = np.asarray(basis.xi) - np.asarray(x_mid)
    z_theta = q_t @ z
    z_phi = q_p @ z
    base = rot_jacobian_params(basis, acq, x_mid)
    n = base.shape[0]
    out = np.zeros((n, n + ACQ_PARAMS))
    out[:, :n] = base
    if isinstance(basis, EllipsoidBasis):
        q = rotation_matrix(acq.theta, acq.phi)
        B = basis.b_matrix
        t_theta = tril_from_sym(q_t @ B @ q.T + q @ B @ q_t.T)
        t_phi = tril_from_sym(q_p @ B @ q.T + q @ B @ q_p.T)
        out[1:7, n] = t_theta
        out[1:7, n + 1] = t_phi
    out[-3:, n] = z_theta
    out[-3:, n + 1] = z_phi
    out[-3:, n + 2 : n + 5] = np.eye(3)
    return out


def warp_field(fld: ScalarField, t: RigidTransform) -> ScalarField:
    """Backward-warp a gridded field: output at x reads input at T^{-1}(x).

    Trilinear interpolation between voxel centers; samples outside the
    domain read the zero background.
    """
    grid = fld.grid
    pts = grid.cell_centers()
    src = transform_inverse(t, pts)
    spacing = grid.spacing
    origin = np.asarray(grid.origin)
    # continuous voxel coordinates relative to cell centers
    g = (src - origin) / spacing - 0.5
    i0 = np.floor(g).astype(int)
    frac = g - i0
    cube = fld.cube()
    dims = np.array(grid.dims)
    out = np.zeros(pts.shape[0])
    for corner in range(8):
        off = np.array([(corner >> k) & 1 for k in range(3)])
        idx = i0 + off
        ok = np.all((idx >= 0) & (idx < dims), axis=1)
        w = np.prod(np.where(off, frac, 1.0 - frac), axis=1)
        if not ok.any():
            continue
        vals = cube[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
        out[ok] += w[ok] * vals
    return ScalarField(grid, np.clip(out, 0.0, 1.0))


@dataclass(frozen=True)
class ExtendedParameters:
    """Shape parameters plus one acquisition-parameter block per experiment."""

    pals: ParameterVector
    acq_list: tuple = ()

    def __post_init__(self):
        acq = tuple(self.acq_list)
        for a in acq:
            if not isinstance(a, AcquisitionParams):
                raise ConfigError("acq_list entries must be AcquisitionParams")
        object.__setattr__(self, "acq_list", acq)

    @property
    def n_ex(self) -> int:
        return len(self.acq_list)

    @property
    def n_pals(self) -> int:
        return self.pals.n_params

    @property
    def n_total(self) -> int:
        return self.n_pals + ACQ_PARAMS * self.n_ex

    def acq_slice(self, j: int) -> slice:
        if not (0 <= j < self.n_ex):
            raise ConfigError(f"experiment index {j} out of range (n_ex={self.n_ex})")
        start = self.n_pals + ACQ_PARAMS * j
        return slice(start, start + ACQ_PARAMS)

    def flatten(self) -> np.ndarray:
        parts = [self.pals.flatten()] + [a.flatten() for a in self.acq_list]
        return np.concatenate(parts) if parts else np.zeros(0)

    def from_flat(self, flat) -> "ExtendedParameters":
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_total:
            raise ConfigError(
                f"flat length {flat.size} does not match extended layout {self.n_total}"
            )
        pals = self.pals.from_flat(flat[: self.n_pals])
        acq = tuple(
            AcquisitionParams.from_flat(flat[self.acq_slice(j)]) for j in range(self.n_ex)
        )
        return ExtendedParameters(pals, acq)


_TRIL_IJ = ((0, 0), (1, 0), (2, 0), (1, 1), (2, 1), (2, 2))


def extended_rot_blocks(params: ParameterVector, acq: AcquisitionParams, x_mid):
    """Per-basis Jacobian blocks of the rotation map, split into
    (d rot / d own-params) stacked as (n, k, k) and (d rot / d acq) as (n, k, 5).

    Vectorized equivalent of stacking rot_jacobian_acq over all bases.
    """
    k = params_per_basis(params.kind)
    n = params.n_rbf
    d_own = np.zeros((n, k, k))
    d_acq = np.zeros((n, k, ACQ_PARAMS))
    if n == 0:
        return d_own, d_acq
    q = rotation_matrix(acq.theta, acq.phi)
    q_t, q_p = rotation_matrix_derivs(acq.theta, acq.phi)
    z = params.centers() - np.asarray(x_mid)
    z_theta = z @ q_t.T
    z_phi = z @ q_p.T
    d_own[:, 0, 0] = 1.0
    if params.kind == KIND_SPHERICAL:
        d_own[:, 1, 1] = 1.0
        d_own[:, 2:5, 2:5] = q
        d_acq[:, 2:5, 0] = z_theta
        d_acq[:, 2:5, 1] = z_phi
        d_acq[:, 2:5, 2:5] = np.eye(3)
    elif params.kind == KIND_ELLIPSOIDAL:
        d_own[:, 1:7, 1:7] = _tril_conjugation_jacobian(q)
        d_own[:, 7:10, 7:10] = q
        B = np.stack([b.b_matrix for b in params.bases])
        sym_t = np.einsum("ab,nbc,dc->nad", q_t, B, q)
        sym_t += sym_t.transpose(0, 2, 1)
        sym_p = np.einsum("ab,nbc,dc->nad", q_p, B, q)
        sym_p += sym_p.transpose(0, 2, 1)
        for m, (i, j) in enumerate(_TRIL_IJ):
            d_acq[:, 1 + m, 0] = sym_t[:, i, j]
            d_acq[:, 1 + m, 1] = sym_p[:, i, j]
        d_acq[:, 7:10, 0] = z_theta
        d_acq[:, 7:10, 1] = z_phi
        d_acq[:, 7:10, 2:5] = np.eye(3)
    else:
        raise UnsupportedKindError("no rotation Jacobian for the cholesky kind")
    return d_own, d_acq
