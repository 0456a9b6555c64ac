"""Unit geometry: coordinates, pairwise distances and the transmission kernel."""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "SpatialUnits",
    "KernelParams",
    "pairwise_distances",
    "kernel_eval",
    "kernel_matrix",
]


@dataclass(frozen=True)
class SpatialUnits:
    """A set of epi-units located by planar coordinates in kilometres."""

    ids: tuple
    coords: np.ndarray = field(repr=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        coords = np.array(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InvalidInputError(f"coords must be N x 2, got shape {coords.shape}")
        if coords.shape[0] != len(ids):
            raise InvalidInputError("ids and coords differ in length")
        if len(ids) < 2:
            raise InvalidInputError("need at least two units")
        if len(set(ids)) != len(ids):
            raise InvalidInputError("unit ids must be unique")
        if not np.all(np.isfinite(coords)):
            raise InvalidInputError("non-finite coordinates")
        coords.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "coords", coords)

    @property
    def n(self):
        return len(self.ids)

    def subset(self, index):
        index = np.asarray(index)
        return SpatialUnits([self.ids[i] for i in index], self.coords[index])

    def index_of(self, ids):
        lookup = {u: k for k, u in enumerate(self.ids)}
        try:
            return np.array([lookup[str(u)] for u in ids], dtype=int)
        except KeyError as err:
            raise InvalidInputError(f"unknown unit id {err.args[0]!r}") from None


@dataclass(frozen=True)
class KernelParams:
    """Power-law kernel ``(1 + d/phi) ** -b0``."""

    phi: float
    b0: float = 3.0

    def __post_init__(self):
        if not (np.isfinite(self.phi) and self.phi > 0):
            raise InvalidInputError(f"phi must be positive, got {self.phi}")
        if not (np.isfinite(self.b0) and self.b0 > 0):
            raise InvalidInputError(f"b0 must be positive, got {self.b0}")


def pairwise_distances(units):
    """Dense Euclidean distance matrix between all units (km)."""
    xy = units.coords if isinstance(units, SpatialUnits) else np.asarray(units, float)
    if not np.all(np.isfinite(xy)):
        raise InvalidInputError("non-finite coordinates")
    diff = xy[:, None, :] - xy[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    # exact symmetry regardless of rounding in the einsum
    d = np.triu(d, 1)
    d = d + d.T
    assert np.all(np.diag(d) == 0.0)
    return d


def kernel_eval(d, kernel):
    """Kernel weight for distance(s) ``d``; 1 at zero, decaying to 0."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise InvalidInputError("distances must be nonnegative")
    out = (1.0 + d / kernel.phi) ** (-kernel.b0)
    return float(out) if out.ndim == 0 else out


def kernel_matrix(d, kernel):
    return kernel_eval(d, kernel)
