"""Scalar building blocks of the level-set representation.

Compactly supported polynomial radial kernels (orders 0..3), the piecewise
polynomial smoothed step that turns the kernel sum into an occupancy value
in [0, 1], and the regularized norms used so derivatives never divide by
zero.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

WENDLAND_ORDERS = (0, 1, 2, 3)
DEFAULT_WENDLAND_ORDER = 1
DEFAULT_EPS_NORM = 1e-4


@dataclass(frozen=True)
class HeavisideConfig:
    """Transition half-width `delta` and smoothness width `eps`, 0 < eps < delta."""

    delta: float = 0.1
    eps: float = 0.01

    def __post_init__(self):
        if not (0.0 < self.eps < self.delta):
            raise ConfigError(
                f"heaviside widths must satisfy 0 < eps < delta, got eps={self.eps}, delta={self.delta}"
            )


def _check_order(order: int) -> int:
    if order not in WENDLAND_ORDERS:
        raise ConfigError(f"wendland order must be one of {WENDLAND_ORDERS}, got {order!r}")
    return int(order)


def wendland_eval(order: int, r):
    """Kernel value psi_order(r) for r >= 0; identically 0 for r >= 1.

    Accepts scalars or arrays. Orders 2 and 3 use the classical minimal-degree
    polynomials (35r^2+18r+3)/3 and exponent 8; see the package notes on the
    order-2/3 coefficients.
    """
    order = _check_order(order)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise DomainError("wendland_eval: radius must be nonnegative")
    t = np.maximum(1.0 - r, 0.0)
    if order == 0:
        out = t**2
    elif order == 1:
        out = t**4 * (4.0 * r + 1.0)
    elif order == 2:
        out = t**6 * (35.0 * r**2 + 18.0 * r + 3.0) / 3.0
    else:
        out = t**8 * (32.0 * r**3 + 25.0 * r**2 + 8.0 * r + 1.0)
    return out if out.ndim else float(out)


def wendland_deriv(order: int, r):
    """d psi_order / dr, with psi'(r) = 0 for r >= 1."""
    order = _check_order(order)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise DomainError("wendland_deriv: radius must be nonnegative")
    t = np.maximum(1.0 - r, 0.0)
    if order == 0:
        out = -2.0 * t
    elif order == 1:
        out = -20.0 * r * t**3
    elif order == 2:
        out = -(56.0 / 3.0) * r * (5.0 * r + 1.0) * t**5
    else:
        out = -22.0 * r * (16.0 * r**2 + 7.0 * r + 1.0) * t**7
    return out if out.ndim else float(out)


def heaviside_eval(cfg: HeavisideConfig, x):
    """Smoothed step sigma_{delta,eps}(x) in [0, 1].

    Five branches: 0, a quadratic lead-in, a linear core of slope 1/(2 delta),
    a quadratic lead-out, then 1. Continuous with continuous first derivative.
    """
    d, e = cfg.delta, cfg.eps
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    lo, hi = -d - e, d + e
    out[x < lo] = 0.0
    out[x >= hi] = 1.0
    m = (x >= lo) & (x < -d + e)
    out[m] = (x[m] + d + e) ** 2 / (8.0 * d * e)
    m = (x >= -d + e) & (x < d - e)
    out[m] = (x[m] + d) / (2.0 * d)
    m = (x >= d - e) & (x < hi)
    out[m] = 1.0 - (d + e - x[m]) ** 2 / (8.0 * d * e)
    return out if out.ndim else float(out)


def heaviside_deriv(cfg: HeavisideConfig, x):
    """First derivative of the smoothed step; continuous, zero outside (-delta-eps, delta+eps)."""
    d, e = cfg.delta, cfg.eps
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    m = (x >= -d - e) & (x < -d + e)
    out[m] = (x[m] + d + e) / (4.0 * d * e)
    m = (x >= -d + e) & (x < d - e)
    out[m] = 1.0 / (2.0 * d)
    m = (x >= d - e) & (x < d + e)
    out[m] = (d + e - x[m]) / (4.0 * d * e)
    return out if out.ndim else float(out)


def heaviside_breakpoints(cfg: HeavisideConfig) -> np.ndarray:
    """The four branch joints of sigma, where it is only C^1."""
    d, e = cfg.delta, cfg.eps
    return np.array([-d - e, -d + e, d - e, d + e])


def pseudo_norm(v, eps_norm: float = DEFAULT_EPS_NORM):
    """sqrt(||v||_2^2 + eps_norm); v may be a single 3-vector or an (n, 3) array."""
    if eps_norm <= 0:
        raise DomainError("pseudo_norm: eps_norm must be positive")
    v = np.asarray(v, dtype=float)
    sq = np.sum(v * v, axis=-1)
    return np.sqrt(sq + eps_norm)


def pseudo_norm_b(v, b_matrix, eps_norm: float = DEFAULT_EPS_NORM):
    """Weighted variant sqrt(v^T B v + eps_norm) for symmetric positive definite B."""
    if eps_norm <= 0:
        raise DomainError("pseudo_norm_b: eps_norm must be positive")
    v = np.asarray(v, dtype=float)
    b_matrix = np.asarray(b_matrix, dtype=float)
    quad = np.einsum("...i,ij,...j->...", v, b_matrix, v)
    if np.any(quad < 0):
        raise DomainError("pseudo_norm_b: matrix is not positive semidefinite along input")
    return np.sqrt(quad + eps_norm)
