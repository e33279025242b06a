"""Basis-function parameterizations and the flat parameter vector.

A shape is a sum of compactly supported bumps, each owning a coefficient
`alpha`, a shape parameter (scalar inverse radius / symmetric matrix /
Cholesky factor), and a center `xi`. Per-basis flat layout is
[alpha, shape..., xi_x, xi_y, xi_z]: 5 numbers for spherical bases, 10
for the matrix-valued kinds.

Symmetric 3x3 matrices are packed as the 6-vector of their lower triangle
in column-major order: [B11, B21, B31, B22, B32, B33].
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .kernels import DEFAULT_EPS_NORM

KIND_SPHERICAL = "spherical"
KIND_ELLIPSOIDAL = "ellipsoidal"
KIND_CHOLESKY = "cholesky"
KINDS = (KIND_SPHERICAL, KIND_ELLIPSOIDAL, KIND_CHOLESKY)

# vec() is column-stacking of the 3x3; these rows of vec() are the lower triangle.
TRIL_OF_VEC = (0, 1, 2, 4, 5, 8)
# row k of the duplication matrix picks this entry of the packed 6-vector
_VEC_FROM_TRIL = (0, 1, 2, 1, 3, 4, 2, 4, 5)


def duplication_matrix() -> np.ndarray:
    """Constant 9x6 matrix P with P @ b6 = vec(B) for the symmetric packing."""
    P = np.zeros((9, 6))
    for row, col in enumerate(_VEC_FROM_TRIL):
        P[row, col] = 1.0
    return P


def tril_select(v9) -> np.ndarray:
    """Pick the lower-triangular rows of a column-stacked 3x3 (rows 0,1,2,4,5,8)."""
    v9 = np.asarray(v9, dtype=float)
    if v9.shape[0] != 9:
        raise ConfigError(f"tril_select expects 9 leading entries, got shape {v9.shape}")
    return v9[list(TRIL_OF_VEC)]


def sym_from_tril(b6) -> np.ndarray:
    """Unpack [B11,B21,B31,B22,B32,B33] into the symmetric 3x3 matrix."""
    b = np.asarray(b6, dtype=float)
    return np.array(
        [[b[0], b[1], b[2]],
         [b[1], b[3], b[4]],
         [b[2], b[4], b[5]]]
    )


def tril_from_sym(mat) -> np.ndarray:
    """Pack the lower triangle of a symmetric 3x3 into a 6-vector."""
    m = np.asarray(mat, dtype=float)
    return np.array([m[0, 0], m[1, 0], m[2, 0], m[1, 1], m[2, 1], m[2, 2]])


def lower_from_tril(l6) -> np.ndarray:
    """Unpack a 6-vector into the lower-triangular 3x3 factor."""
    l = np.asarray(l6, dtype=float)
    return np.array(
        [[l[0], 0.0, 0.0],
         [l[1], l[3], 0.0],
         [l[2], l[4], l[5]]]
    )


@dataclass(frozen=True)
class SphericalBasis:
    alpha: float
    beta: float  # inverse radius, support radius ~ 1/beta
    xi: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "xi", tuple(float(v) for v in self.xi))
        if self.beta <= 0:
            raise DomainError(f"spherical basis needs beta > 0, got {self.beta}")

    def flatten(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, *self.xi])

    @staticmethod
    def from_flat(v) -> "SphericalBasis":
        return SphericalBasis(v[0], v[1], (v[2], v[3], v[4]))


@dataclass(frozen=True)
class EllipsoidBasis:
    alpha: float
    b_tril: tuple[float, ...]  # packed symmetric shape matrix
    xi: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "b_tril", tuple(float(v) for v in self.b_tril))
        object.__setattr__(self, "xi", tuple(float(v) for v in self.xi))
        if len(self.b_tril) != 6:
            raise ConfigError("ellipsoid basis needs 6 packed matrix entries")

    @property
    def b_matrix(self) -> np.ndarray:
        return sym_from_tril(self.b_tril)

    def det(self) -> float:
        return float(np.linalg.det(self.b_matrix))

    def flatten(self) -> np.ndarray:
        return np.array([self.alpha, *self.b_tril, *self.xi])

    @staticmethod
    def from_flat(v) -> "EllipsoidBasis":
        return EllipsoidBasis(v[0], tuple(v[1:7]), (v[7], v[8], v[9]))

    @staticmethod
    def isotropic(alpha: float, radius: float, xi) -> "EllipsoidBasis":
        s = 1.0 / (radius * radius)
        return EllipsoidBasis(alpha, (s, 0.0, 0.0, s, 0.0, s), tuple(xi))


@dataclass(frozen=True)
class CholeskyBasis:
    alpha: float
    l_tril: tuple[float, ...]  # packed lower-triangular factor, positive diagonal
    xi: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "l_tril", tuple(float(v) for v in self.l_tril))
        object.__setattr__(self, "xi", tuple(float(v) for v in self.xi))
        if len(self.l_tril) != 6:
            raise ConfigError("cholesky basis needs 6 packed factor entries")
        if self.l_tril[0] <= 0 or self.l_tril[3] <= 0 or self.l_tril[5] <= 0:
            raise DomainError("cholesky factor needs strictly positive diagonal")

    @property
    def l_matrix(self) -> np.ndarray:
        return lower_from_tril(self.l_tril)

    def flatten(self) -> np.ndarray:
        return np.array([self.alpha, *self.l_tril, *self.xi])

    @staticmethod
    def from_flat(v) -> "CholeskyBasis":
        return CholeskyBasis(v[0], tuple(v[1:7]), (v[7], v[8], v[9]))


_BASIS_CLS = {
    KIND_SPHERICAL: SphericalBasis,
    KIND_ELLIPSOIDAL: EllipsoidBasis,
    KIND_CHOLESKY: CholeskyBasis,
}


def params_per_basis(kind: str) -> int:
    return 5 if kind == KIND_SPHERICAL else 10


@dataclass(frozen=True)
class ParameterVector:
    """Ordered bases of one kind plus the pseudo-norm floor.

    flatten()/from_flat() round-trip exactly; the flat length is
    5*n or 10*n depending on kind.
    """

    kind: str
    bases: tuple = ()
    eps_norm: float = DEFAULT_EPS_NORM

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown basis kind {self.kind!r}")
        cls = _BASIS_CLS[self.kind]
        bases = tuple(self.bases)
        for b in bases:
            if not isinstance(b, cls):
                raise ConfigError(f"{self.kind} parameter vector got a {type(b).__name__}")
        object.__setattr__(self, "bases", bases)
        if self.eps_norm <= 0:
            raise ConfigError("eps_norm must be positive")

    @property
    def n_rbf(self) -> int:
        return len(self.bases)

    @property
    def n_params(self) -> int:
        return params_per_basis(self.kind) * self.n_rbf

    def flatten(self) -> np.ndarray:
        if not self.bases:
            return np.zeros(0)
        return np.concatenate([b.flatten() for b in self.bases])

    def from_flat(self, flat) -> "ParameterVector":
        """Rebuild a vector of the same kind/eps_norm from flat values."""
        flat = np.asarray(flat, dtype=float)
        step = params_per_basis(self.kind)
        if flat.size % step:
            raise ConfigError(f"flat length {flat.size} not a multiple of {step}")
        cls = _BASIS_CLS[self.kind]
        bases = tuple(cls.from_flat(flat[i : i + step]) for i in range(0, flat.size, step))
        return ParameterVector(self.kind, bases, self.eps_norm)

    def with_bases(self, bases) -> "ParameterVector":
        return ParameterVector(self.kind, tuple(bases), self.eps_norm)

    def centers(self) -> np.ndarray:
        return np.array([b.xi for b in self.bases]).reshape(self.n_rbf, 3)
