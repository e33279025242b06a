"""Level-set field evaluation with exact analytic sensitivities.

The field is u(x) = sigma(sum_i alpha_i * psi(r_i(x))) where r_i is the
regularized distance of x to basis i in that basis's metric. Evaluation
is restricted per basis to an axis-aligned bounding box of its support
(grid path) or a bounding ball (scattered-points path); outside the
support both psi and psi' vanish exactly, so the restriction is lossless.
"""

import functools
from dataclasses import dataclass, field as dc_field

import numpy as np

from .basis import (
    KIND_ELLIPSOIDAL,
    KIND_SPHERICAL,
    ParameterVector,
    params_per_basis,
)
from .errors import ConfigError, SingularBasisError
from .grid import GridSpec, ScalarField
from .kernels import (
    DEFAULT_WENDLAND_ORDER,
    HeavisideConfig,
    heaviside_deriv,
    heaviside_eval,
    wendland_deriv,
    wendland_eval,
)
from .spatial import NeighborIndex


@dataclass(frozen=True)
class SparseJacobian:
    """Triplet-form sparse matrix, sorted row-major with duplicates summed."""

    n_rows: int
    n_cols: int
    rows: np.ndarray = dc_field(repr=False)
    cols: np.ndarray = dc_field(repr=False)
    vals: np.ndarray = dc_field(repr=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.intp)
        cols = np.asarray(self.cols, dtype=np.intp)
        vals = np.asarray(self.vals, dtype=float)
        if not (rows.shape == cols.shape == vals.shape):
            raise ConfigError("jacobian triplet arrays must have equal length")
        if vals.size and not np.all(np.isfinite(vals)):
            raise ConfigError("jacobian contains non-finite values")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            # sum duplicate (row, col) entries
            same = np.zeros(rows.size, dtype=bool)
            same[1:] = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if same.any():
                starts = np.flatnonzero(~same)
                vals = np.add.reduceat(vals, starts)
                rows, cols = rows[starts], cols[starts]
        for a in (rows, cols, vals):
            a.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "vals", vals)

    @property
    def nnz(self) -> int:
        return self.vals.size

    def to_csr(self):
        from scipy.sparse import csr_matrix

        return csr_matrix(
            (self.vals, (self.rows, self.cols)), shape=(self.n_rows, self.n_cols)
        )

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols))
        out[self.rows, self.cols] = self.vals
        return out

    def nonzero_rows(self) -> np.ndarray:
        return np.unique(self.rows)


@functools.lru_cache(maxsize=16)
def _cell_centers(grid: GridSpec) -> np.ndarray:
    pts = grid.cell_centers()
    pts.flags.writeable = False
    return pts


def _shape_matrix(basis, kind):
    if kind == KIND_SPHERICAL:
        return basis.beta**2 * np.eye(3)
    if kind == KIND_ELLIPSOIDAL:
        return basis.b_matrix
    L = basis.l_matrix
    return L @ L.T


def _metric_min_eig(basis, kind) -> float:
    """Smallest eigenvalue of the effective metric; raises on singular ellipsoids."""
    if kind == KIND_SPHERICAL:
        return basis.beta**2
    B = _shape_matrix(basis, kind)
    lam_min = float(np.linalg.eigvalsh(B)[0])
    if kind == KIND_ELLIPSOIDAL and lam_min <= 0.0:
        raise SingularBasisError(
            f"ellipsoid basis at {basis.xi} has non-positive-definite shape matrix "
            f"(det={np.linalg.det(B):.3e})"
        )
    return lam_min


def _support_ball_radius(basis, kind) -> float:
    lam_min = _metric_min_eig(basis, kind)
    if lam_min <= 0.0:
        return np.inf
    return 1.0 / np.sqrt(lam_min)


def _support_halfwidths(basis, kind) -> np.ndarray:
    """Per-axis half extents of the support bounding box (unit ball of the metric)."""
    _metric_min_eig(basis, kind)
    if kind == KIND_SPHERICAL:
        return np.full(3, 1.0 / basis.beta)
    B = _shape_matrix(basis, kind)
    Binv = np.linalg.inv(B)
    diag = np.clip(np.diag(Binv), 0.0, None)
    return np.sqrt(diag)


def _basis_terms(basis, kind, pts, eps_norm, order, want_partials):
    """Kernel value psi(r) per point and optionally d(alpha*psi(r))/d(basis params)."""
    xi = np.asarray(basis.xi)
    z = pts - xi
    if kind == KIND_SPHERICAL:
        q = np.einsum("ij,ij->i", z, z)
        r = np.sqrt(basis.beta**2 * q + eps_norm)
    elif kind == KIND_ELLIPSOIDAL:
        B = basis.b_matrix
        Bz = z @ B
        r = np.sqrt(np.einsum("ij,ij->i", z, Bz) + eps_norm)
    else:
        L = basis.l_matrix
        w = z @ L
        r = np.sqrt(np.einsum("ij,ij->i", w, w) + eps_norm)
    psi = wendland_eval(order, r)
    mask = r < 1.0
    if not want_partials:
        return psi, None, mask
    dpsi = wendland_deriv(order, r)
    coef = basis.alpha * dpsi
    step = params_per_basis(kind)
    out = np.zeros((pts.shape[0], step))
    out[:, 0] = psi
    inv_r = 1.0 / r
    if kind == KIND_SPHERICAL:
        out[:, 1] = coef * basis.beta * q * inv_r
        out[:, 2:5] = (coef * basis.beta**2 * inv_r)[:, None] * (-z)
    elif kind == KIND_ELLIPSOIDAL:
        half_inv_r = 0.5 * inv_r
        z1, z2, z3 = z[:, 0], z[:, 1], z[:, 2]
        quad_partials = np.stack(
            [z1 * z1, 2.0 * z1 * z2, 2.0 * z1 * z3, z2 * z2, 2.0 * z2 * z3, z3 * z3],
            axis=1,
        )
        out[:, 1:7] = (coef * half_inv_r)[:, None] * quad_partials
        out[:, 7:10] = (coef * inv_r)[:, None] * (-Bz)
    else:
        z1, z2, z3 = z[:, 0], z[:, 1], z[:, 2]
        w1, w2, w3 = w[:, 0], w[:, 1], w[:, 2]
        fac_partials = np.stack(
            [z1 * w1, z2 * w1, z3 * w1, z2 * w2, z3 * w2, z3 * w3], axis=1
        )
        out[:, 1:7] = (coef * inv_r)[:, None] * fac_partials
        out[:, 7:10] = (coef * inv_r)[:, None] * (-(w @ L.T))
    return psi, out, mask


def _grid_subbox(grid: GridSpec, center, halfwidths) -> np.ndarray:
    """Flat voxel indices whose centers lie in the box, inflated by one voxel."""
    halfwidths = np.minimum(halfwidths, np.asarray(grid.extent).sum())  # keep casts finite
    lo = np.asarray(center) - halfwidths
    hi = np.asarray(center) + halfwidths
    spacing = grid.spacing
    origin = np.asarray(grid.origin)
    first = np.floor((lo - origin) / spacing - 0.5).astype(int) - 1
    last = np.ceil((hi - origin) / spacing - 0.5).astype(int) + 1
    first = np.maximum(first, 0)
    last = np.minimum(last, np.array(grid.dims) - 1)
    if np.any(first > last):
        return np.zeros(0, dtype=np.intp)
    n1, n2, _ = grid.dims
    ix = np.arange(first[0], last[0] + 1)
    iy = np.arange(first[1], last[1] + 1)
    iz = np.arange(first[2], last[2] + 1)
    flat = (
        ix[:, None, None] + n1 * (iy[None, :, None] + n2 * iz[None, None, :])
    )
    return flat.ravel().astype(np.intp)


def _grid_candidates(params: ParameterVector, grid: GridSpec):
    return [
        _grid_subbox(grid, b.xi, _support_halfwidths(b, params.kind))
        for b in params.bases
    ]


def _point_candidates(params: ParameterVector, index: NeighborIndex):
    return [
        index.query_ball(b.xi, _support_ball_radius(b, params.kind))
        for b in params.bases
    ]


def presum(
    params: ParameterVector,
    pts: np.ndarray,
    candidates=None,
    order: int = DEFAULT_WENDLAND_ORDER,
) -> np.ndarray:
    """Pre-step sum s(x) = sum_i alpha_i psi(r_i(x)) at the given points."""
    s = np.zeros(pts.shape[0])
    for i, b in enumerate(params.bases):
        idx = None if candidates is None else candidates[i]
        if idx is None:
            psi, _, _ = _basis_terms(b, params.kind, pts, params.eps_norm, order, False)
            s += b.alpha * psi
        else:
            if idx.size == 0:
                continue
            psi, _, _ = _basis_terms(b, params.kind, pts[idx], params.eps_norm, order, False)
            s[idx] += b.alpha * psi
    return s


def _eval_at(params, pts, candidates, cfg, order, want_jacobian):
    n_pts = pts.shape[0]
    s = np.zeros(n_pts)
    kind, eps_norm = params.kind, params.eps_norm
    masks = []
    for b, idx in zip(params.bases, candidates):
        if idx.size == 0:
            masks.append(None)
            continue
        psi, _, mask = _basis_terms(b, kind, pts[idx], eps_norm, order, False)
        s[idx] += b.alpha * psi
        masks.append(mask)
    u = np.clip(heaviside_eval(cfg, s), 0.0, 1.0)
    if not want_jacobian:
        return s, u, None
    sigma_p = heaviside_deriv(cfg, s)
    step = params_per_basis(kind)
    rows_l, cols_l, vals_l = [], [], []
    for i, (b, idx, mask) in enumerate(zip(params.bases, candidates, masks)):
        if mask is None:
            continue
        keep = mask & (sigma_p[idx] != 0.0)
        if not keep.any():
            continue
        kept_idx = idx[keep]
        _, partials, _ = _basis_terms(b, kind, pts[kept_idx], eps_norm, order, True)
        scaled = sigma_p[kept_idx][:, None] * partials
        m = kept_idx.size
        rows_l.append(np.repeat(kept_idx, step))
        cols_l.append(np.tile(np.arange(i * step, (i + 1) * step, dtype=np.intp), m))
        vals_l.append(scaled.ravel())
    if rows_l:
        rows = np.concatenate(rows_l)
        cols = np.concatenate(cols_l)
        vals = np.concatenate(vals_l)
    else:
        rows = cols = np.zeros(0, dtype=np.intp)
        vals = np.zeros(0)
    jac = SparseJacobian(n_pts, params.n_params, rows, cols, vals)
    return s, u, jac


def field_eval(
    params: ParameterVector,
    grid: GridSpec,
    cfg: HeavisideConfig = HeavisideConfig(),
    order: int = DEFAULT_WENDLAND_ORDER,
    want_jacobian: bool = False,
):
    """Evaluate u on all voxel centers; optionally d u / d params as a SparseJacobian."""
    pts = _cell_centers(grid)
    candidates = _grid_candidates(params, grid)
    _, u, jac = _eval_at(params, pts, candidates, cfg, order, want_jacobian)
    fld = ScalarField(grid, u)
    return (fld, jac) if want_jacobian else (fld, None)


def field_eval_points(
    params: ParameterVector,
    points,
    cfg: HeavisideConfig = HeavisideConfig(),
    order: int = DEFAULT_WENDLAND_ORDER,
    want_jacobian: bool = False,
    index: NeighborIndex | None = None,
):
    """Evaluate u at arbitrary points (mesh-free); same formulas as field_eval."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if not np.all(np.isfinite(pts)):
        raise ConfigError("field_eval_points: coordinates must be finite")
    if index is None:
        index = NeighborIndex(pts)
    candidates = _point_candidates(params, index)
    _, u, jac = _eval_at(params, pts, candidates, cfg, order, want_jacobian)
    return (u, jac) if want_jacobian else (u, None)


def field_presum_grid(
    params: ParameterVector, grid: GridSpec, order: int = DEFAULT_WENDLAND_ORDER
) -> np.ndarray:
    """The pre-step sum s on the grid (needed wherever sigma'(s) is queried)."""
    pts = _cell_centers(grid)
    return presum(params, pts, _grid_candidates(params, grid), order)


def field_grid_engine(
    params: ParameterVector,
    grid: GridSpec,
    rowspec=None,
    cfg: HeavisideConfig = HeavisideConfig(),
    order: int = DEFAULT_WENDLAND_ORDER,
):
    """One-sweep field values plus a row-projected Jacobian on the grid.

    `rowspec(s, u) -> (row_of, weight, n_rows)` describes a projection with at
    most one output row per voxel: voxel v contributes weight[v] * du_v/dm to
    row row_of[v] (negative row drops the voxel). Returns (s, u, J) with J a
    dense (n_rows, n_params) array, or (s, u, None) when rowspec is None.
    Candidate voxel sets and support masks are shared between the value and
    Jacobian passes.
    """
    pts = _cell_centers(grid)
    candidates = _grid_candidates(params, grid)
    kind, eps_norm = params.kind, params.eps_norm
    s = np.zeros(pts.shape[0])
    masks = []
    for b, idx in zip(params.bases, candidates):
        if idx.size == 0:
            masks.append(None)
            continue
        psi, _, mask = _basis_terms(b, kind, pts[idx], eps_norm, order, False)
        s[idx] += b.alpha * psi
        masks.append(mask)
    u = np.clip(heaviside_eval(cfg, s), 0.0, 1.0)
    if rowspec is None:
        return s, u, None
    row_of, weight, n_rows = rowspec(s, u)
    active = weight * heaviside_deriv(cfg, s)
    step = params_per_basis(kind)
    out = np.zeros((n_rows, params.n_params))
    col_off = np.arange(step, dtype=np.intp)
    for i, (b, idx, mask) in enumerate(zip(params.bases, candidates, masks)):
        if mask is None:
            continue
        keep = mask & (row_of[idx] >= 0) & (active[idx] != 0.0)
        kept_idx = idx[keep]
        if kept_idx.size == 0:
            continue
        _, partials, _ = _basis_terms(b, kind, pts[kept_idx], eps_norm, order, True)
        scaled = active[kept_idx][:, None] * partials
        comb = (row_of[kept_idx][:, None] * step + col_off).ravel()
        block = np.bincount(comb, weights=scaled.ravel(), minlength=n_rows * step)
        out[:, i * step : (i + 1) * step] += block.reshape(n_rows, step)
    return s, u, out
