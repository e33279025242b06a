"""Parametric level-set 3D shape reconstruction.

Shapes are sums of compactly supported radial bumps pushed through a
smoothed step; the few hundred basis parameters (plus per-experiment
acquisition poses) are estimated by Gauss-Newton from dip traces,
silhouettes, and point clouds, jointly or separately.
"""

from .basis import (
    CholeskyBasis,
    EllipsoidBasis,
    KIND_CHOLESKY,
    KIND_ELLIPSOIDAL,
    KIND_SPHERICAL,
    ParameterVector,
    SphericalBasis,
    duplication_matrix,
    tril_select,
)
from .calib import (
    AcquisitionParams,
    ExtendedParameters,
    RigidTransform,
    rot_jacobian_acq,
    rot_jacobian_params,
    rotate_params,
    rotation_matrix,
    rotation_matrix_derivs,
    transform_apply,
    transform_inverse,
    warp_field,
)
from .errors import (
    BarrierViolation,
    ConfigError,
    ContractError,
    DomainError,
    OptimizationError,
    PalsError,
    SingularBasisError,
    UnsupportedKindError,
)
from .field import SparseJacobian, field_eval, field_eval_points
from .forward import (
    DipExperiment,
    NeighborIndex,
    PointCloudData,
    SilhouetteExperiment,
    dip_forward,
    pc_residuals,
    sfs_boundary_run,
    sfs_forward,
    softmax_vote,
)
from .gradcheck import gradcheck
from .grid import GridSpec, ScalarField, binarize
from .harness import (
    BoxPrim,
    EllipsoidPrim,
    Metrics,
    NoiseSpec,
    Phantom,
    builtin_phantom,
    downsample,
    iou,
    simulate,
    voxelize,
)
from .kernels import (
    HeavisideConfig,
    heaviside_deriv,
    heaviside_eval,
    pseudo_norm,
    pseudo_norm_b,
    wendland_deriv,
    wendland_eval,
)
from .solver import (
    DipTerm,
    GNConfig,
    ObjectiveTerm,
    OptimizationTrace,
    PcTerm,
    RBFSchedule,
    SfsTerm,
    add_rbfs,
    gauss_newton_step,
    iterated_tikhonov,
    joint_objective,
    logdet_barrier,
    reconstruct,
)

__version__ = "0.1.0"
