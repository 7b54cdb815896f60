"""Low-dimensional feature projections of velocity fields.

States are summarized by the coefficients of the leading Stokes modes plus
the kinetic energy.  Empirical measures over states live on a fixed binning
of this feature space, stored sparsely.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import FieldFormatError
from .grid_field import DomainSpec, StokesBasis, VelocityField, field_norms, stokes_basis


@dataclass(frozen=True)
class FeatureMap:
    """First `n_coeffs` Stokes coefficients followed by 0.5*|u|^2."""

    domain: DomainSpec
    basis: StokesBasis
    n_coeffs: int

    def __post_init__(self):
        if self.n_coeffs < 0:
            raise FieldFormatError("feature coefficient count must be >= 0")
        if len(self.basis.modes) < self.n_coeffs:
            raise FieldFormatError(
                f"basis holds {len(self.basis.modes)} modes, need {self.n_coeffs}")

    @property
    def dim(self) -> int:
        return self.n_coeffs + 1

    @classmethod
    def build(cls, domain: DomainSpec, n_coeffs: int = 8, seed: int = 0) -> "FeatureMap":
        basis = stokes_basis(domain, max(n_coeffs, 1), seed=seed)
        return cls(domain=domain, basis=basis, n_coeffs=n_coeffs)

    def _mode_matrix(self) -> np.ndarray:
        d = self.domain
        w = np.sqrt(d.dx * d.dy)
        rows = []
        for mode in self.basis.modes[: self.n_coeffs]:
            rows.append(np.concatenate([mode.u.ravel(), mode.v.ravel()]) * w)
        if not rows:
            return np.zeros((0, d.u_shape[0] * d.u_shape[1] + d.v_shape[0] * d.v_shape[1]))
        return np.stack(rows)

    def __call__(self, f: VelocityField) -> np.ndarray:
        coeffs = [self.basis.coefficients(f)[j] for j in range(self.n_coeffs)]
        energy = 0.5 * field_norms(f)[0] ** 2
        return np.array(coeffs + [energy])

    def apply_flat(self, flat: np.ndarray) -> np.ndarray:
        """Features for rows of an L2-weighted flat state matrix (k, dof)."""
        flat = np.atleast_2d(flat)
        coeffs = flat @ self._mode_matrix().T
        energy = 0.5 * np.sum(flat ** 2, axis=1, keepdims=True)
        return np.concatenate([coeffs, energy], axis=1)


@dataclass(frozen=True)
class FeatureBinning:
    """Uniform per-axis binning of feature space; out-of-range values clip
    into the edge bins so every point carries mass."""

    lo: np.ndarray
    hi: np.ndarray
    n_bins: int = 16

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise FieldFormatError("binning bounds must be 1-d arrays of equal length")
        if not np.all(hi > lo):
            raise FieldFormatError("binning requires hi > lo on every axis")
        if self.n_bins < 1:
            raise FieldFormatError("need at least one bin per axis")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def widths(self) -> np.ndarray:
        return (self.hi - self.lo) / self.n_bins

    @classmethod
    def for_ball(cls, dim: int, radius: float, n_bins: int = 16) -> "FeatureBinning":
        """Bounds for features of states with |u| <= radius: each Stokes
        coefficient lies in [-radius, radius], the energy in [0, radius^2/2]."""
        if radius <= 0:
            raise FieldFormatError("ball radius must be positive")
        lo = np.full(dim, -radius)
        hi = np.full(dim, radius)
        lo[-1] = 0.0
        hi[-1] = 0.5 * radius * radius
        return cls(lo=lo, hi=hi, n_bins=n_bins)

    def indices(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        if pts.shape[1] != self.dim:
            raise FieldFormatError(f"points have dim {pts.shape[1]}, binning {self.dim}")
        raw = np.floor((pts - self.lo) / self.widths).astype(np.int64)
        return np.clip(raw, 0, self.n_bins - 1)

    def centers(self, idx: np.ndarray) -> np.ndarray:
        return self.lo + (np.asarray(idx) + 0.5) * self.widths


class SparseHistogram:
    """Normalized mass on occupied bins of a FeatureBinning."""

    def __init__(self, binning: FeatureBinning, mass: Dict[Tuple[int, ...], float]):
        self.binning = binning
        self.mass = dict(mass)

    @classmethod
    def from_points(cls, binning: FeatureBinning, points: np.ndarray,
                    weights: Optional[np.ndarray] = None) -> "SparseHistogram":
        pts = np.atleast_2d(points)
        if pts.shape[0] == 0:
            raise FieldFormatError("cannot build a histogram from zero points")
        if weights is None:
            weights = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            weights = np.asarray(weights, dtype=float)
            total = weights.sum()
            if total <= 0:
                raise FieldFormatError("histogram weights must have positive total")
            weights = weights / total
        idx = binning.indices(pts)
        mass: Dict[Tuple[int, ...], float] = {}
        for row, w in zip(idx, weights):
            key = tuple(int(i) for i in row)
            mass[key] = mass.get(key, 0.0) + float(w)
        return cls(binning, mass)

    def total(self) -> float:
        return sum(self.mass.values())

    def tv_distance(self, other: "SparseHistogram") -> float:
        keys = set(self.mass) | set(other.mass)
        return 0.5 * sum(abs(self.mass.get(k, 0.0) - other.mass.get(k, 0.0)) for k in keys)

    def mixed_with(self, other: "SparseHistogram", w_self: float, w_other: float) -> "SparseHistogram":
        total = w_self + w_other
        if total <= 0:
            raise FieldFormatError("mixture weights must have positive total")
        a, b = w_self / total, w_other / total
        keys = set(self.mass) | set(other.mass)
        return SparseHistogram(
            self.binning,
            {k: a * self.mass.get(k, 0.0) + b * other.mass.get(k, 0.0) for k in keys})

    def support_centers(self) -> np.ndarray:
        if not self.mass:
            return np.zeros((0, self.binning.dim))
        idx = np.array(sorted(self.mass.keys()))
        return self.binning.centers(idx)

    def masses(self) -> np.ndarray:
        return np.array([self.mass[tuple(k)] for k in sorted(self.mass.keys())])

    def expect(self, values_at_centers) -> float:
        """<g, sigma> where g is evaluated at occupied bin centers."""
        centers = self.support_centers()
        vals = np.asarray(values_at_centers(centers), dtype=float)
        return float(vals @ self.masses())


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of a (n, d) and b (m, d)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    sq = aa + bb - 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    return sq


def coverage_fraction(points: np.ndarray, reference: np.ndarray, r: float,
                      chunk: int = 1024) -> float:
    """Fraction of `points` rows within Euclidean distance r of some
    `reference` row."""
    points = np.atleast_2d(points)
    reference = np.atleast_2d(reference)
    if points.shape[0] == 0:
        return 1.0
    if reference.shape[0] == 0:
        return 0.0
    hits = 0
    r2 = r * r
    for lo in range(0, points.shape[0], chunk):
        block = points[lo:lo + chunk]
        sq = pairwise_sq_dists(block, reference)
        hits += int(np.count_nonzero(sq.min(axis=1) <= r2))
    return hits / points.shape[0]
