"""Spline bases: natural cubic splines for the longitudinal time effect and
B-splines (Cox-de Boor) for the log baseline hazard."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BasisDomainError(ValueError):
    """Evaluation point outside the B-spline boundary knots."""


class DegenerateKnotsError(ValueError):
    """Requested knot sequence cannot be formed from the data."""


def _check_knots(internal, lo, hi, what):
    internal = tuple(float(k) for k in internal)
    if any(not np.isfinite(k) for k in internal) or not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError(f"{what}: knots must be finite")
    if lo >= hi:
        raise ValueError(f"{what}: boundary must satisfy min < max, got ({lo}, {hi})")
    if any(internal[i] >= internal[i + 1] for i in range(len(internal) - 1)):
        raise ValueError(f"{what}: internal knots must be strictly increasing")
    if internal and (internal[0] <= lo or internal[-1] >= hi):
        raise ValueError(f"{what}: internal knots must lie strictly inside the boundary")
    return internal


@dataclass(frozen=True)
class NaturalSplineSpec:
    """Knot layout for a natural cubic spline basis (no intercept column)."""

    internal_knots: tuple[float, ...]
    boundary_knots: tuple[float, float]

    def __post_init__(self):
        lo, hi = self.boundary_knots
        internal = _check_knots(self.internal_knots, lo, hi, "NaturalSplineSpec")
        object.__setattr__(self, "internal_knots", internal)
        object.__setattr__(self, "boundary_knots", (float(lo), float(hi)))

    @property
    def dim(self) -> int:
        return len(self.internal_knots) + 1

    @property
    def all_knots(self) -> np.ndarray:
        lo, hi = self.boundary_knots
        return np.array([lo, *self.internal_knots, hi], dtype=float)


@dataclass(frozen=True)
class BSplineSpec:
    """Knot layout for a B-spline basis on a closed interval."""

    degree: int
    internal_knots: tuple[float, ...]
    boundary: tuple[float, float]

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("BSplineSpec: degree must be >= 0")
        lo, hi = self.boundary
        internal = _check_knots(self.internal_knots, lo, hi, "BSplineSpec")
        object.__setattr__(self, "internal_knots", internal)
        object.__setattr__(self, "boundary", (float(lo), float(hi)))

    @property
    def dim(self) -> int:
        return len(self.internal_knots) + self.degree + 1

    @property
    def knot_vector(self) -> np.ndarray:
        lo, hi = self.boundary
        return np.concatenate([
            np.full(self.degree + 1, lo),
            np.asarray(self.internal_knots, dtype=float),
            np.full(self.degree + 1, hi),
        ])


def natural_cubic_basis(t, spec: NaturalSplineSpec) -> np.ndarray:
    """Natural cubic spline basis row(s) at `t`.

    Dimension is ``len(internal_knots) + 1``; the functions are linear beyond
    the boundary knots (zero second derivative outside), so extrapolation is
    well defined for any finite `t`.
    """
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("natural_cubic_basis: t must be finite")
    knots = spec.all_knots
    K = len(knots)
    scalar = t.ndim == 0
    tt = np.atleast_1d(t)

    def d(k_idx):
        # ((t - k)^3_+ - (t - k_last)^3_+) / (k_last - k)
        num = np.clip(tt - knots[k_idx], 0.0, None) ** 3 - np.clip(tt - knots[-1], 0.0, None) ** 3
        return num / (knots[-1] - knots[k_idx])

    cols = [tt]
    if K >= 2:
        d_last = d(K - 2)
        for k in range(K - 2):
            cols.append(d(k) - d_last)
    out = np.stack(cols, axis=-1)
    return out[0] if scalar else out


def bspline_basis(t, spec: BSplineSpec) -> np.ndarray:
    """B-spline basis row(s) at `t` via the Cox-de Boor recursion.

    `t` must lie inside [boundary.min, boundary.max]; the right endpoint is
    treated as closed. Raises BasisDomainError outside the boundary.
    """
    t = np.asarray(t, dtype=float)
    lo, hi = spec.boundary
    scalar = t.ndim == 0
    tt = np.atleast_1d(t)
    if not np.all(np.isfinite(tt)):
        raise BasisDomainError("bspline_basis: t must be finite")
    if np.any(tt < lo) or np.any(tt > hi):
        bad = tt[(tt < lo) | (tt > hi)][0]
        raise BasisDomainError(
            f"bspline_basis: t={bad} outside boundary [{lo}, {hi}]")

    kv = spec.knot_vector
    p = spec.degree
    m = len(kv) - 1  # number of degree-0 functions
    # Degree 0: indicator of [kv[i], kv[i+1]); close the last nonempty interval.
    N = np.zeros(tt.shape + (m,))
    for i in range(m):
        if kv[i] < kv[i + 1]:
            inside = (tt >= kv[i]) & (tt < kv[i + 1])
            if kv[i + 1] == hi:
                inside |= tt == hi
            N[..., i] = inside.astype(float)
    for deg in range(1, p + 1):
        N_new = np.zeros(tt.shape + (m - deg,))
        for i in range(m - deg):
            left_den = kv[i + deg] - kv[i]
            right_den = kv[i + deg + 1] - kv[i + 1]
            term = 0.0
            if left_den > 0:
                term = (tt - kv[i]) / left_den * N[..., i]
            if right_den > 0:
                term = term + (kv[i + deg + 1] - tt) / right_den * N[..., i + 1]
            N_new[..., i] = term
        N = N_new
    assert N.shape[-1] == spec.dim
    return N[0] if scalar else N


def knots_from_quantiles(event_times, count: int) -> np.ndarray:
    """`count` knots at equally spaced probabilities j/(count+1) of the
    empirical event-time distribution (linear-interpolation quantiles)."""
    x = np.asarray(event_times, dtype=float)
    if x.size == 0:
        raise ValueError("knots_from_quantiles: event_times is empty")
    if count < 1:
        raise ValueError("knots_from_quantiles: count must be >= 1")
    n_distinct = np.unique(x).size
    if count >= n_distinct:
        raise DegenerateKnotsError(
            f"degenerate knot sequence: {count} knots requested from "
            f"{n_distinct} distinct event times")
    probs = np.arange(1, count + 1) / (count + 1)
    return np.quantile(x, probs, method="linear")


def hazard_basis_from_events(event_times, n_internal: int, degree: int = 2,
                             placement: str = "percentile") -> BSplineSpec:
    """Build the baseline-hazard B-spline spec from observed event times.

    Boundary is (0, max event time); internal knots either at equally spaced
    percentiles of the event times (default) or equidistant over the boundary.
    """
    x = np.asarray(event_times, dtype=float)
    hi = float(np.max(x))
    if n_internal == 0:
        internal = ()
    elif placement == "percentile":
        internal = tuple(knots_from_quantiles(x, n_internal))
    elif placement == "equidistant":
        internal = tuple(np.linspace(0.0, hi, n_internal + 2)[1:-1])
    else:
        raise ValueError(f"unknown knot placement {placement!r}")
    return BSplineSpec(degree=degree, internal_knots=internal, boundary=(0.0, hi))
