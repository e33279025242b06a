"""Gauss-Newton reconstruction driver.

One outer iteration: place new zero-coefficient bases where the data misfit
is most sensitive, re-anchor the iterated Tikhonov regularizer at the
current iterate, run a fixed number of damped Gauss-Newton steps with an
Armijo backtracking line search, then decay the regularization weight.
Acquisition parameters ride along in the extended parameter vector and are
optimized jointly when calibration estimation is enabled.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.linalg

from .basis import (
    KIND_CHOLESKY,
    KIND_ELLIPSOIDAL,
    KIND_SPHERICAL,
    CholeskyBasis,
    EllipsoidBasis,
    ParameterVector,
    SphericalBasis,
    duplication_matrix,
    params_per_basis,
)
from .calib import (
    ACQ_PARAMS,
    AcquisitionParams,
    ExtendedParameters,
    RigidTransform,
    transform_apply,
    transform_inverse,
)
from .errors import (
    BarrierViolation,
    ConfigError,
    ContractError,
    DomainError,
    OptimizationError,
    SingularBasisError,
)
from .field import field_grid_engine
from .forward import (
    AMBIENT_TAU_BG,
    DipExperiment,
    PointCloudData,
    SilhouetteExperiment,
    _run_masks,
    _softmax_image,
    dip_forward,
    pc_residuals,
    sfs_forward,
)
from .grid import GridSpec, ScalarField, binarize
from .kernels import HeavisideConfig, heaviside_deriv
from .spatial import NeighborIndex

log = logging.getLogger("pals3d.solver")


@dataclass(frozen=True)
class GNConfig:
    it_gn: int = 5
    lambda0: float = 1e-3
    lambda_decay: float = 0.8
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    armijo_max: int = 20
    barrier_weight: float = 1e-6

    def __post_init__(self):
        positive = {
            "it_gn": self.it_gn,
            "lambda0": self.lambda0,
            "lambda_decay": self.lambda_decay,
            "armijo_c": self.armijo_c,
            "armijo_shrink": self.armijo_shrink,
            "armijo_max": self.armijo_max,
            "barrier_weight": self.barrier_weight,
        }
        for name, v in positive.items():
            if v <= 0:
                raise ConfigError(f"GNConfig.{name} must be positive, got {v}")
        if not (0.0 < self.armijo_shrink < 1.0):
            raise ConfigError("armijo_shrink must be in (0, 1)")


@dataclass(frozen=True)
class RBFSchedule:
    p0: int = 20
    p: int = 5
    outer_iters: int = 40
    init_radius: float = 1.0
    add_radius: float = 1.0 / 3.0
    min_spacing_cells: int = 2
    binarize_threshold: float = 0.7

    def __post_init__(self):
        if self.p0 < 1 or self.p < 1:
            raise ConfigError("p0 and p must be >= 1")
        if self.init_radius <= 0 or self.add_radius <= 0:
            raise ConfigError("basis radii must be positive")
        if not (0.0 < self.binarize_threshold < 1.0):
            raise ConfigError("binarize threshold must be in (0, 1)")
        if self.outer_iters < 1:
            raise ConfigError("outer_iters must be >= 1")


# ---------------------------------------------------------------------------
# objective terms


class ObjectiveTerm:
    """Residual/Jacobian provider for one experiment of one modality."""

    modality = "?"

    def __init__(self, exp_index: int, weight: float = 1.0):
        self.exp_index = int(exp_index)
        self.weight = float(weight)

    def residual(self, m_ext: ExtendedParameters) -> np.ndarray:
        raise NotImplementedError

    def residual_and_jacobian(self, m_ext: ExtendedParameters):
        raise NotImplementedError

    def misfit_grad_field(self, m_ext: ExtendedParameters, grid: GridSpec) -> np.ndarray:
        """d(weight * ||r||^2) / d(canonical field u), per voxel of `grid`."""
        raise NotImplementedError

    def misfit(self, m_ext: ExtendedParameters) -> float:
        r = self.residual(m_ext)
        return self.weight * float(r @ r)


class DipTerm(ObjectiveTerm):
    modality = "dip"

    def __init__(self, grid: GridSpec, experiment: DipExperiment, exp_index: int, weight: float = 1.0):
        super().__init__(exp_index, weight)
        if experiment.observed.size != grid.dims[2]:
            raise ConfigError(
                f"dip trace length {experiment.observed.size} does not match grid n3={grid.dims[2]}"
            )
        self.grid = grid
        self.experiment = experiment

    def residual(self, m_ext):
        trace, _ = dip_forward(m_ext, self.grid, self.exp_index, want_jacobian=False)
        return trace - self.experiment.observed

    def residual_and_jacobian(self, m_ext):
        trace, jac = dip_forward(m_ext, self.grid, self.exp_index)
        return trace - self.experiment.observed, jac

    def misfit_grad_field(self, m_ext, grid):
        # a canonical voxel y feeds the slice that T(y) lands in
        r = self.residual(m_ext)
        t = RigidTransform(m_ext.acq_list[self.exp_index], tuple(grid.midpoint))
        moved = transform_apply(t, grid.cell_centers())
        h3 = grid.extent[2] / grid.dims[2]
        k = np.floor((moved[:, 2] - grid.origin[2]) / h3).astype(int)
        ok = (k >= 0) & (k < grid.dims[2])
        out = np.zeros(grid.n_voxels)
        out[ok] = 2.0 * self.weight * grid.voxel_volume * r[k[ok]]
        return out


class SfsTerm(ObjectiveTerm):
    modality = "sfs"

    def __init__(
        self,
        grid: GridSpec,
        experiment: SilhouetteExperiment,
        exp_index: int,
        weight: float = 1.0,
        tau_bg: float = AMBIENT_TAU_BG,
    ):
        super().__init__(exp_index, weight)
        if experiment.observed.shape != (grid.dims[0], grid.dims[1]):
            raise ConfigError(
                f"silhouette shape {experiment.observed.shape} does not match grid cross-section"
            )
        self.grid = grid
        self.experiment = experiment
        self.tau_bg = float(tau_bg)

    def _image(self, m_ext, want_jacobian):
        return sfs_forward(
            m_ext,
            self.grid,
            self.exp_index,
            eta=self.experiment.eta,
            want_jacobian=want_jacobian,
            tau_bg=self.tau_bg,
        )

    def residual(self, m_ext):
        img, _ = self._image(m_ext, False)
        return (img - self.experiment.observed).ravel(order="F")

    def residual_and_jacobian(self, m_ext):
        img, jac = self._image(m_ext, True)
        return (img - self.experiment.observed).ravel(order="F"), jac

    def misfit_grad_field(self, m_ext, grid):
        from .calib import rotate_params

        acq = m_ext.acq_list[self.exp_index]
        x_mid = grid.midpoint
        rot = rotate_params(m_ext.pals, acq, x_mid)
        _, u, _ = field_grid_engine(rot, grid, None)
        n1, n2, n3 = grid.dims
        npix = n1 * n2
        rays = u.reshape((npix, n3), order="F")
        mask = _run_masks(rays, self.tau_bg)
        d, w = _softmax_image(rays, mask, self.experiment.eta)
        r = d - self.experiment.observed.ravel(order="F")
        dd_du = w * (1.0 + self.experiment.eta * (rays - d[:, None]))
        dd_du[~mask] = 0.0
        grad_rot = (2.0 * self.weight * r[:, None] * dd_du).ravel(order="F")
        # pull the sensitivity back to the canonical frame (nearest voxel)
        t = RigidTransform(acq, tuple(x_mid))
        moved = transform_apply(t, grid.cell_centers())
        ijk, ok = grid.point_to_index(moved)
        out = np.zeros(grid.n_voxels)
        flat = grid.flat_index(ijk[ok, 0], ijk[ok, 1], ijk[ok, 2])
        out[ok] = grad_rot[flat]
        return out


class PcTerm(ObjectiveTerm):
    modality = "pc"

    def __init__(self, cloud: PointCloudData, exp_index: int, x_mid, weight: float = 1.0):
        super().__init__(exp_index, weight)
        self.cloud = cloud
        self.x_mid = tuple(float(v) for v in x_mid)
        self._index = NeighborIndex(cloud.sample_points())

    def residual(self, m_ext):
        r, _ = pc_residuals(
            m_ext, self.cloud, self.exp_index, self.x_mid, want_jacobian=False, index=self._index
        )
        return r

    def residual_and_jacobian(self, m_ext):
        return pc_residuals(
            m_ext, self.cloud, self.exp_index, self.x_mid, want_jacobian=True, index=self._index
        )

    def misfit_grad_field(self, m_ext, grid):
        r = self.residual(m_ext)
        t = RigidTransform(m_ext.acq_list[self.exp_index], self.x_mid)
        back = transform_inverse(t, self.cloud.sample_points())
        ijk, ok = grid.point_to_index(back)
        out = np.zeros(grid.n_voxels)
        flat = grid.flat_index(ijk[ok, 0], ijk[ok, 1], ijk[ok, 2])
        np.add.at(out, flat, 2.0 * self.weight * r[ok])
        return out


# ---------------------------------------------------------------------------
# regularizers


def iterated_tikhonov(m, m_anchor, lam: float):
    """Quadratic pull toward the anchor: (value, gradient, Hessian diagonal scale).

    value = lam * ||m - anchor||^2, gradient = 2 lam (m - anchor), and the
    Hessian is 2 lam I (returned as the scalar 2 lam to be added to the
    normal-matrix diagonal).
    """
    m = np.asarray(m, dtype=float)
    m_anchor = np.asarray(m_anchor, dtype=float)
    if m.shape != m_anchor.shape:
        raise ContractError(f"anchor length {m_anchor.shape} does not match {m.shape}")
    d = m - m_anchor
    return lam * float(d @ d), 2.0 * lam * d, 2.0 * lam


class TikhonovRegularizer:
    """Quadratic pull toward `anchor`, optionally restricted to an index mask.

    The shape block uses the iterated form (anchor reset to the current
    iterate before each step); the calibration block is anchored at the
    recorded acquisition values, which pins the data-invisible common-mode
    rotation shared between the shape and all experiment poses.
    """

    def __init__(self, anchor, lam: float, mask=None):
        self.anchor = np.asarray(anchor, dtype=float).copy()
        self.lam = float(lam)
        self.mask = None if mask is None else np.asarray(mask, dtype=bool).copy()

    def _diff(self, flat):
        d = flat - self.anchor
        if self.mask is not None:
            d = np.where(self.mask, d, 0.0)
        return d

    def value_grad(self, flat):
        d = self._diff(flat)
        return self.lam * float(d @ d), 2.0 * self.lam * d

    def value(self, flat):
        d = self._diff(flat)
        return self.lam * float(d @ d)

    def add_hessian(self, H):
        if self.mask is None:
            H[np.diag_indices_from(H)] += 2.0 * self.lam
        else:
            idx = np.flatnonzero(self.mask)
            H[idx, idx] += 2.0 * self.lam


def logdet_barrier(params: ParameterVector, weight: float):
    """Barrier -weight * sum_i log det(B_i) with gradient/Hessian over the flat layout.

    Only defined for the ellipsoidal kind. Raises BarrierViolation when any
    det(B_i) <= 0 so the line search can reject the step.
    """
    if params.kind != KIND_ELLIPSOIDAL:
        raise ConfigError("log-det barrier applies to the ellipsoidal kind only")
    n = params.n_rbf
    step = params_per_basis(params.kind)
    value = 0.0
    grad = np.zeros(n * step)
    hess = np.zeros((n * step, n * step))
    P = duplication_matrix()
    for i, b in enumerate(params.bases):
        B = b.b_matrix
        det = np.linalg.det(B)
        if det <= 0:
            raise BarrierViolation(f"basis {i}: det(B) = {det:.3e} <= 0")
        value -= weight * float(np.log(det))
        Binv = np.linalg.inv(B)
        g6 = np.array(
            [Binv[0, 0], 2 * Binv[1, 0], 2 * Binv[2, 0], Binv[1, 1], 2 * Binv[2, 1], Binv[2, 2]]
        )
        sl = slice(i * step + 1, i * step + 7)
        grad[sl] = -weight * g6
        hess[sl, sl.start : sl.stop] = weight * (P.T @ np.kron(Binv, Binv) @ P)
    return value, grad, hess


class BarrierRegularizer:
    """Marker carrying the log-det barrier weight; evaluated via logdet_barrier."""

    def __init__(self, weight: float):
        self.weight = float(weight)


# ---------------------------------------------------------------------------
# Gauss-Newton step


@dataclass
class StepRecord:
    outer_iter: int
    inner_iter: int
    misfit: float
    reg: float
    n_rbf: int
    step_size: float
    objective_before: float
    objective_after: float
    stalled: bool = False


@dataclass
class OptimizationTrace:
    steps: list = dc_field(default_factory=list)
    acq_history: list = dc_field(default_factory=list)

    def record(self, step: StepRecord):
        self.steps.append(step)

    def misfit_history(self) -> np.ndarray:
        return np.array([s.misfit for s in self.steps])

    def rows(self):
        """CSV rows: iter, misfit, reg, n_rbf, step."""
        for i, s in enumerate(self.steps):
            yield i, s.misfit, s.reg, s.n_rbf, s.step_size


def _eval_terms(terms, m_ext, want_jacobian, pool=None):
    """Evaluate all terms, preserving term order for deterministic reduction."""
    if want_jacobian:
        fn = lambda t: t.residual_and_jacobian(m_ext)
    else:
        fn = lambda t: (t.residual(m_ext), None)
    if pool is None:
        return [fn(t) for t in terms]
    return list(pool.map(fn, terms))


def _objective_value(terms, m_ext, regularizers, flat, pool=None):
    """(full objective, data part); raises BarrierViolation outside the domain."""
    reg_total = 0.0
    # barrier first: it is cheap and guards the forward evaluations
    for reg in regularizers:
        if isinstance(reg, TikhonovRegularizer):
            reg_total += reg.value(flat)
        elif isinstance(reg, BarrierRegularizer):
            v, _, _ = logdet_barrier(m_ext.pals, reg.weight)
            reg_total += v
    data = 0.0
    for t, (r, _) in zip(terms, _eval_terms(terms, m_ext, False, pool)):
        data += t.weight * float(r @ r)
    return reg_total + data, data


def gauss_newton_step(
    m_ext: ExtendedParameters,
    objective_terms,
    regularizers,
    cfg: GNConfig,
    free_mask=None,
    pool=None,
    viability=None,
):
    """One damped Gauss-Newton step on the extended parameters.

    Assembles the normal system from all terms, solves it (dense Cholesky),
    and backtracks the step length until the full objective satisfies the
    Armijo decrease or the backtrack budget is exhausted (then the step is
    flagged stalled and the parameters are returned unchanged). Trials
    outside the barrier/positivity domain, or rejected by the optional
    `viability` predicate, shrink the step like a failed decrease. A singular
    normal matrix triggers one automatic 10x bump of the Tikhonov weight.
    """
    if not objective_terms:
        raise ConfigError("gauss_newton_step needs at least one objective term")
    flat = m_ext.flatten()
    n = flat.size
    if free_mask is None:
        free_mask = np.ones(n, dtype=bool)
    free_idx = np.flatnonzero(free_mask)

    H = np.zeros((n, n))
    g = np.zeros(n)
    data_misfit = 0.0
    evals = _eval_terms(objective_terms, m_ext, True, pool)
    for t, (r, J) in zip(objective_terms, evals):
        if r.size != J.shape[0]:
            raise ContractError("term residual length and Jacobian rows disagree")
        w2 = 2.0 * t.weight
        H += w2 * (J.T @ J)
        g += w2 * (J.T @ r)
        data_misfit += t.weight * float(r @ r)

    reg_value = 0.0
    tik = None
    for reg in regularizers:
        if isinstance(reg, TikhonovRegularizer):
            v, gr = reg.value_grad(flat)
            reg_value += v
            g += gr
            reg.add_hessian(H)
            tik = reg
        elif isinstance(reg, BarrierRegularizer):
            v, gr, he = logdet_barrier(m_ext.pals, reg.weight)
            reg_value += v
            np_pals = m_ext.n_pals
            g[:np_pals] += gr
            H[:np_pals, :np_pals] += he
        else:
            raise ConfigError(f"unknown regularizer {reg!r}")

    f0 = data_misfit + reg_value
    Hf = H[np.ix_(free_idx, free_idx)]
    gf = g[free_idx]

    try:
        cho = scipy.linalg.cho_factor(Hf, check_finite=False)
    except np.linalg.LinAlgError:
        bump = 10.0 * (tik.lam if tik is not None else cfg.lambda0)
        log.warning("singular normal matrix; retrying with extra diagonal %g", 2 * bump)
        Hf = Hf + 2.0 * bump * np.eye(Hf.shape[0])
        try:
            cho = scipy.linalg.cho_factor(Hf, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise OptimizationError(
                f"normal matrix singular even after 10x regularization bump "
                f"(n={Hf.shape[0]}, ||g||={np.linalg.norm(gf):.3e})"
            ) from exc
    p_free = -scipy.linalg.cho_solve(cho, gf, check_finite=False)
    slope = float(gf @ p_free)

    direction = np.zeros(n)
    direction[free_idx] = p_free
    mu = 1.0
    accepted = None
    for _ in range(cfg.armijo_max):
        trial_flat = flat + mu * direction
        try:
            trial = m_ext.from_flat(trial_flat)
            f_trial, trial_misfit = _objective_value(
                objective_terms, trial, regularizers, trial_flat, pool
            )
        except (BarrierViolation, SingularBasisError, DomainError):
            mu *= cfg.armijo_shrink
            continue
        if f_trial <= f0 + cfg.armijo_c * mu * slope:
            # a would-be-accepted step must also keep the representation alive
            if viability is not None and not viability(trial):
                mu *= cfg.armijo_shrink
                continue
            accepted = (trial, f_trial, trial_misfit)
            break
        mu *= cfg.armijo_shrink

    if accepted is None:
        record = StepRecord(0, 0, data_misfit, reg_value, m_ext.pals.n_rbf, 0.0, f0, f0, True)
        return m_ext, record
    trial, f_trial, trial_misfit = accepted
    record = StepRecord(
        0, 0, trial_misfit, f_trial - trial_misfit, trial.pals.n_rbf, mu, f0, f_trial, False
    )
    return trial, record


# ---------------------------------------------------------------------------
# adaptive basis insertion


def _new_basis(kind: str, radius: float, center) -> object:
    if kind == KIND_SPHERICAL:
        return SphericalBasis(0.0, 1.0 / radius, tuple(center))
    if kind == KIND_ELLIPSOIDAL:
        return EllipsoidBasis.isotropic(0.0, radius, tuple(center))
    if kind == KIND_CHOLESKY:
        inv = 1.0 / radius
        return CholeskyBasis(0.0, (inv, 0.0, 0.0, inv, 0.0, inv), tuple(center))
    raise ConfigError(f"unknown kind {kind}")


def add_rbfs(
    params: ParameterVector,
    presum_s: np.ndarray,
    grad_u: np.ndarray,
    schedule: RBFSchedule,
    grid: GridSpec,
    blocked_cells=None,
    cfg: HeavisideConfig = HeavisideConfig(),
):
    """Append `p` zero-coefficient bases at the most sensitive voxel centers.

    Sensitivity is |sigma'(s) * grad_u| per voxel; picks descend it greedily
    subject to a Chebyshev separation of `min_spacing_cells` grid cells both
    pairwise and against `blocked_cells` (centers added in earlier rounds).
    Inserted bases have alpha = 0, so no residual changes.
    """
    if grad_u.shape != (grid.n_voxels,):
        raise ContractError("grad_u length must equal the voxel count")
    sens = np.abs(heaviside_deriv(cfg, presum_s) * grad_u)
    order = np.argsort(-sens, kind="stable")
    n1, n2, _ = grid.dims
    chosen = []
    blocked = [np.asarray(c, dtype=int) for c in (blocked_cells or [])]
    spacing = schedule.min_spacing_cells
    for flat in order:
        if len(chosen) == schedule.p:
            break
        if sens[flat] <= 0.0:
            break
        iz, rem = divmod(int(flat), n1 * n2)
        iy, ix = divmod(rem, n1)
        cell = np.array([ix, iy, iz])
        ok = all(np.max(np.abs(cell - c)) >= spacing for c in blocked)
        ok = ok and all(np.max(np.abs(cell - c)) >= spacing for c in chosen)
        if ok:
            chosen.append(cell)
    if len(chosen) < schedule.p:
        log.warning("add_rbfs: only %d of %d eligible centers found", len(chosen), schedule.p)
    centers = [
        (
            grid.origin[0] + (c[0] + 0.5) * grid.spacing[0],
            grid.origin[1] + (c[1] + 0.5) * grid.spacing[1],
            grid.origin[2] + (c[2] + 0.5) * grid.spacing[2],
        )
        for c in chosen
    ]
    new = [_new_basis(params.kind, schedule.add_radius, c) for c in centers]
    return params.with_bases(params.bases + tuple(new)), [c for c in chosen]


# ---------------------------------------------------------------------------
# weighting of modalities


def joint_objective(terms_by_modality: dict, gamma_mode="auto", m_ext=None):
    """Flatten modality groups into one weighted term list.

    gamma_mode: "auto" balances each modality's initial misfit against the
    first group's (requires m_ext); a float applies that fixed weight to
    every group after the first.
    """
    if not terms_by_modality:
        raise ConfigError("joint_objective needs at least one modality")
    groups = [(name, list(ts)) for name, ts in terms_by_modality.items() if ts]
    if not groups:
        raise ConfigError("joint_objective needs at least one nonempty modality")
    if len(groups) == 1:
        return groups[0][1]
    out = list(groups[0][1])
    if gamma_mode == "auto":
        if m_ext is None:
            raise ConfigError("auto gamma needs the initial parameters")
        base = sum(t.misfit(m_ext) for t in groups[0][1])
        for name, ts in groups[1:]:
            cur = sum(t.misfit(m_ext) for t in ts)
            gamma = base / cur if cur > 0 else 1.0
            log.info("joint objective: modality %s weighted by %.4g", name, gamma)
            for t in ts:
                t.weight = t.weight * gamma
            out.extend(ts)
    else:
        gamma = float(gamma_mode)
        if gamma <= 0:
            raise ConfigError("fixed gamma must be positive")
        for _, ts in groups[1:]:
            for t in ts:
                t.weight = t.weight * gamma
            out.extend(ts)
    return out


# ---------------------------------------------------------------------------
# outer driver


def _initial_bases(kind, schedule, grid, rng, spread=0.1, signed_alpha=True):
    mid = grid.midpoint
    extent = np.array(grid.extent)
    lo = mid - spread * extent
    hi = mid + spread * extent
    bases = []
    for _ in range(schedule.p0):
        center = rng.uniform(lo, hi)
        alpha = rng.uniform(0.05, 0.15)
        if signed_alpha and rng.random() < 0.5:
            alpha = -alpha
        b = _new_basis(kind, schedule.init_radius, center)
        flat = b.flatten()
        flat[0] = alpha
        bases.append(type(b).from_flat(flat))
    return tuple(bases)


def _band_alive(grid: GridSpec, cfg: HeavisideConfig = HeavisideConfig()):
    """Viability predicate: the level-set field must keep an active transition
    band somewhere on the grid, otherwise every sensitivity vanishes and the
    optimization can never move again."""

    def check(m_ext: ExtendedParameters) -> bool:
        s, _, _ = field_grid_engine(m_ext.pals, grid, None)
        return bool(np.any(heaviside_deriv(cfg, s) != 0.0))

    return check


def normalize_term_weights(objective_terms, m_ext: ExtendedParameters) -> float:
    """Scale all term weights so the initial data misfit is 1.

    A pure rescaling of the objective: minimizers and monotonicity are
    untouched, but the fixed regularization weight becomes relative to the
    data scale, which keeps the Gauss-Newton steps well damped independently
    of grid resolution and experiment count. Returns the scale applied.
    """
    total = sum(t.misfit(m_ext) for t in objective_terms)
    if total <= 0:
        return 1.0
    for t in objective_terms:
        t.weight = t.weight / total
    return 1.0 / total


def reconstruct(
    objective_terms,
    grid: GridSpec,
    schedule: RBFSchedule = RBFSchedule(),
    cfg: GNConfig = GNConfig(),
    estimate_calibration: bool = False,
    seed: int = 0,
    kind: str = KIND_ELLIPSOIDAL,
    n_workers: int = 1,
    init_spread: float = 0.1,
    normalize: bool = True,
    gamma_groups: dict | None = None,
    gamma_mode="auto",
    acq_prior_scale: float = 1.0,
):
    """Run the full outer loop and return (m_ext, binary field, trace).

    Starts from `p0` random small-coefficient bases around the domain center,
    adds `p` bases per outer iteration, runs `it_gn` Gauss-Newton steps per
    iteration (the Tikhonov anchor is re-zeroed at the current iterate before
    every step), and finishes by thresholding the field. Deterministic for a
    fixed seed. With estimate_calibration off the acquisition parameters are
    frozen at their recorded values.
    """
    if not objective_terms:
        raise ConfigError("reconstruct needs at least one objective term")
    for t in objective_terms:
        tgrid = getattr(t, "grid", None)
        if tgrid is not None and tgrid != grid:
            raise ConfigError("all objective terms must share the reconstruction grid")
    rng = np.random.default_rng(seed)
    pals = ParameterVector(kind, _initial_bases(kind, schedule, grid, rng, init_spread))
    acq0 = []
    for t in objective_terms:
        exp = getattr(t, "experiment", None)
        acq0.append(exp.acq if exp is not None else AcquisitionParams())
    # terms are expected to be indexed 0..n_ex-1 in order
    for j, t in enumerate(objective_terms):
        if t.exp_index != j:
            raise ConfigError("objective terms must be numbered consecutively from 0")
    m_ext = ExtendedParameters(pals, tuple(acq0))
    recorded_acq = np.concatenate([a.flatten() for a in acq0]) if acq0 else np.zeros(0)
    if gamma_groups is not None:
        joint_objective(gamma_groups, gamma_mode, m_ext)
    if normalize:
        normalize_term_weights(objective_terms, m_ext)

    trace = OptimizationTrace()
    lam = cfg.lambda0
    blocked: list = []
    pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None
    try:
        for outer in range(schedule.outer_iters):
            s, _, _ = field_grid_engine(m_ext.pals, grid, None)
            grad_u = np.zeros(grid.n_voxels)
            for t in objective_terms:
                grad_u += t.misfit_grad_field(m_ext, grid)
            new_pals, chosen = add_rbfs(m_ext.pals, s, grad_u, schedule, grid, blocked)
            blocked.extend(chosen)
            m_ext = ExtendedParameters(new_pals, m_ext.acq_list)

            free = np.ones(m_ext.n_total, dtype=bool)
            if not estimate_calibration:
                free[m_ext.n_pals :] = False
            pals_mask = np.zeros(m_ext.n_total, dtype=bool)
            pals_mask[: m_ext.n_pals] = True

            for inner in range(cfg.it_gn):
                # iterated Tikhonov on the shape block: the anchor is the
                # current iterate, so the penalty is zero at the base point
                regs = [TikhonovRegularizer(m_ext.flatten(), lam, pals_mask)]
                if estimate_calibration:
                    # weak calibration prior toward the recorded poses: it has
                    # to pin only the common-mode rotation the data cannot see,
                    # so it stays far below the data curvature elsewhere
                    anchor = m_ext.flatten()
                    anchor[m_ext.n_pals :] = recorded_acq
                    regs.append(TikhonovRegularizer(anchor, acq_prior_scale * lam, ~pals_mask))
                if kind == KIND_ELLIPSOIDAL:
                    regs.append(BarrierRegularizer(cfg.barrier_weight))
                m_ext, rec = gauss_newton_step(
                    m_ext, objective_terms, regs, cfg, free, pool, viability=_band_alive(grid)
                )
                rec.outer_iter, rec.inner_iter = outer, inner
                trace.record(rec)
                if rec.stalled:
                    break
            trace.acq_history.append(tuple(m_ext.acq_list))
            lam *= cfg.lambda_decay
            log.info(
                "outer %d: misfit %.4e, n_rbf %d", outer, trace.steps[-1].misfit, m_ext.pals.n_rbf
            )
    finally:
        if pool is not None:
            pool.shutdown()
    _, u, _ = field_grid_engine(m_ext.pals, grid, None)
    fld = ScalarField(grid, u)
    return m_ext, binarize(fld, schedule.binarize_threshold), trace
