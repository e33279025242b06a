"""Voxel grid geometry and gridded occupancy fields.

Flat storage is x-fastest: linear index = ix + n1*(iy + n2*iz). Sample
points are cell centers, origin + (i + 0.5) * spacing.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

DEFAULT_EXTENT = (5.0, 5.0, 5.0)


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, int, int]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    extent: tuple[float, float, float] = DEFAULT_EXTENT

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))
        if len(self.dims) != 3 or any(n < 2 for n in self.dims):
            raise ConfigError(f"grid dims must be three counts >= 2, got {self.dims}")
        if len(self.extent) != 3 or any(e <= 0 for e in self.extent):
            raise ConfigError(f"grid extent must be three positive lengths, got {self.extent}")

    @property
    def n_voxels(self) -> int:
        n1, n2, n3 = self.dims
        return n1 * n2 * n3

    @property
    def spacing(self) -> np.ndarray:
        return np.array(self.extent) / np.array(self.dims)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def midpoint(self) -> np.ndarray:
        """Domain center, used as the rotation center of rigid transforms."""
        return np.array(self.origin) + 0.5 * np.array(self.extent)

    def axis_centers(self, axis: int) -> np.ndarray:
        n = self.dims[axis]
        h = self.extent[axis] / n
        return self.origin[axis] + (np.arange(n) + 0.5) * h

    def cell_centers(self) -> np.ndarray:
        """All voxel centers as an (n_voxels, 3) array in x-fastest order."""
        xs, ys, zs = (self.axis_centers(a) for a in range(3))
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        pts = np.stack(
            [gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")], axis=1
        )
        return pts

    def flat_index(self, ix, iy, iz):
        n1, n2, _ = self.dims
        return np.asarray(ix) + n1 * (np.asarray(iy) + n2 * np.asarray(iz))

    def point_to_index(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Containing-voxel integer coords and an in-domain mask for points (n, 3)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        rel = (pts - np.array(self.origin)) / self.spacing
        ijk = np.floor(rel).astype(int)
        inside = np.all((ijk >= 0) & (ijk < np.array(self.dims)), axis=1)
        return ijk, inside


@dataclass(frozen=True)
class ScalarField:
    """Per-voxel values in [0, 1], flat x-fastest storage."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.n_voxels,):
            raise ConfigError(
                f"field length {vals.shape} does not match grid with {self.grid.n_voxels} voxels"
            )
        if vals.size and (vals.min() < -1e-12 or vals.max() > 1.0 + 1e-12):
            raise ConfigError("field values must lie in [0, 1]")
        vals = np.clip(vals, 0.0, 1.0)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def cube(self) -> np.ndarray:
        """View shaped (n1, n2, n3); cube[:, :, k] is slice k along the third axis."""
        return self.values.reshape(self.grid.dims, order="F")


def binarize(field: ScalarField, threshold: float = 0.7) -> ScalarField:
    """Threshold to {0, 1}: value 1 strictly above `threshold`, else 0."""
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"binarize threshold must be in (0, 1), got {threshold}")
    return ScalarField(field.grid, (field.values > threshold).astype(float))
