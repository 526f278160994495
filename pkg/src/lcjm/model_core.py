"""Domain types shared by all modules: records, validated datasets, model
specification, parameter state and chain output, plus the CSV interfaces."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .basis import BSplineSpec, NaturalSplineSpec

EVENT_TIME_TOL = 1e-9


class ValidationError(ValueError):
    """Dataset or specification violates a structural invariant."""


@dataclass(frozen=True)
class LongRecord:
    subject_id: str
    time: float
    y: float
    x_covariates: tuple[float, ...] = ()


@dataclass(frozen=True)
class SurvRecord:
    subject_id: str
    event_time: float
    event_indicator: int
    w_covariates: tuple[float, ...] = ()


@dataclass(frozen=True)
class Dataset:
    """Validated joint dataset: one survival row per subject, at least one
    longitudinal row each, subjects densely indexed in first-appearance order."""

    longitudinal: tuple[LongRecord, ...]
    survival: tuple[SurvRecord, ...]  # ordered by subject index
    n: int
    subject_ids: tuple[str, ...]
    x_names: tuple[str, ...]
    w_names: tuple[str, ...]

    def subject_index(self, subject_id: str) -> int:
        return self.subject_ids.index(subject_id)

    @property
    def n_obs(self) -> int:
        return len(self.longitudinal)


def validate_dataset(long: Sequence[LongRecord], surv: Sequence[SurvRecord],
                     x_names: Sequence[str] | None = None,
                     w_names: Sequence[str] | None = None) -> Dataset:
    """Check all Dataset invariants and assign dense subject indices.

    Raises ValidationError naming the offending subject and row on the first
    violation encountered.
    """
    if not long:
        raise ValidationError("no longitudinal records")
    if not surv:
        raise ValidationError("no survival records")

    px = len(long[0].x_covariates)
    for row, r in enumerate(long):
        if not (math.isfinite(r.time) and r.time >= 0):
            raise ValidationError(
                f"subject {r.subject_id!r}, longitudinal row {row}: "
                f"time {r.time} is not finite and non-negative")
        if not math.isfinite(r.y):
            raise ValidationError(
                f"subject {r.subject_id!r}, longitudinal row {row}: y is not finite")
        if len(r.x_covariates) != px:
            raise ValidationError(
                f"subject {r.subject_id!r}, longitudinal row {row}: expected "
                f"{px} covariates, got {len(r.x_covariates)}")
        if any(not math.isfinite(v) for v in r.x_covariates):
            raise ValidationError(
                f"subject {r.subject_id!r}, longitudinal row {row}: non-finite covariate")

    pw = len(surv[0].w_covariates)
    surv_by_id: dict[str, SurvRecord] = {}
    for row, r in enumerate(surv):
        if not (math.isfinite(r.event_time) and r.event_time > 0):
            raise ValidationError(
                f"subject {r.subject_id!r}, survival row {row}: "
                f"event_time {r.event_time} is not finite and positive")
        if r.event_indicator not in (0, 1):
            raise ValidationError(
                f"subject {r.subject_id!r}, survival row {row}: "
                f"event_indicator must be 0 or 1, got {r.event_indicator}")
        if len(r.w_covariates) != pw:
            raise ValidationError(
                f"subject {r.subject_id!r}, survival row {row}: expected "
                f"{pw} covariates, got {len(r.w_covariates)}")
        if any(not math.isfinite(v) for v in r.w_covariates):
            raise ValidationError(
                f"subject {r.subject_id!r}, survival row {row}: non-finite covariate")
        if r.subject_id in surv_by_id:
            raise ValidationError(
                f"subject {r.subject_id!r}: duplicate survival record (row {row})")
        surv_by_id[r.subject_id] = r

    # Dense indices in first-appearance order over the longitudinal records.
    order: dict[str, int] = {}
    for r in long:
        if r.subject_id not in order:
            order[r.subject_id] = len(order)

    for row, r in enumerate(long):
        if r.subject_id not in surv_by_id:
            raise ValidationError(
                f"subject {r.subject_id!r}: missing survival record")
        t_event = surv_by_id[r.subject_id].event_time
        if r.time > t_event + EVENT_TIME_TOL:
            raise ValidationError(
                f"subject {r.subject_id!r}, longitudinal row {row}: "
                f"observation after event time ({r.time} > {t_event})")

    for sid in surv_by_id:
        if sid not in order:
            raise ValidationError(
                f"subject {sid!r}: survival record without longitudinal records")

    subject_ids = tuple(order)
    surv_sorted = tuple(surv_by_id[sid] for sid in subject_ids)
    if x_names is None:
        x_names = tuple(f"x{j}" for j in range(px))
    if w_names is None:
        w_names = tuple(f"w{j}" for j in range(pw))
    if len(x_names) != px or len(w_names) != pw:
        raise ValidationError("covariate name lists do not match covariate widths")
    return Dataset(longitudinal=tuple(long), survival=surv_sorted, n=len(subject_ids),
                   subject_ids=subject_ids, x_names=tuple(x_names), w_names=tuple(w_names))


# ---------------------------------------------------------------------------
# Model specification

TIME_TERMS = ("time", "ns(time)")


@dataclass(frozen=True)
class ModelSpec:
    """Formula-level model description.

    Design terms are strings: "intercept", "time" (linear time), "ns(time)"
    (natural cubic spline of time, expanded to `long_time_basis.dim` columns),
    a covariate name from the longitudinal CSV, or an interaction
    "<time term>:<covariate>" such as "time:male" or "ns(time):male".
    """

    G: int
    fixed_effects: tuple[str, ...]
    random_effects: tuple[str, ...]
    survival_covariates: tuple[str, ...]
    long_time_basis: NaturalSplineSpec | None = None
    hazard_basis: BSplineSpec | None = None
    survival_intercept: bool = True
    dirichlet_a: tuple[float, ...] | None = None
    prior_variances: Mapping[str, float] = field(default_factory=dict)
    standardize: bool = False

    def __post_init__(self):
        if self.G < 1:
            raise ValidationError(f"ModelSpec: G must be >= 1, got {self.G}")
        object.__setattr__(self, "fixed_effects", tuple(self.fixed_effects))
        object.__setattr__(self, "random_effects", tuple(self.random_effects))
        object.__setattr__(self, "survival_covariates", tuple(self.survival_covariates))
        missing = set(self.random_effects) - set(self.fixed_effects)
        if missing:
            raise ValidationError(
                f"ModelSpec: random-effect terms {sorted(missing)} not in the fixed design")
        for term in (*self.fixed_effects, *self.random_effects):
            if "ns(time)" in term and self.long_time_basis is None:
                raise ValidationError(
                    f"ModelSpec: term {term!r} requires long_time_basis")
        if self.dirichlet_a is not None:
            a = tuple(float(v) for v in self.dirichlet_a)
            if len(a) != self.G:
                raise ValidationError(
                    f"ModelSpec: dirichlet_a has length {len(a)}, expected G={self.G}")
            if any(v <= 0 for v in a):
                raise ValidationError("ModelSpec: dirichlet_a entries must be > 0")
            object.__setattr__(self, "dirichlet_a", a)

    def _term_width(self, term: str) -> int:
        base = term.split(":", 1)[0]
        if base == "ns(time)":
            return self.long_time_basis.dim
        return 1

    @property
    def n_fixed(self) -> int:
        return sum(self._term_width(t) for t in self.fixed_effects)

    @property
    def n_random(self) -> int:
        return sum(self._term_width(t) for t in self.random_effects)

    @property
    def n_survival(self) -> int:
        return len(self.survival_covariates) + (1 if self.survival_intercept else 0)

    @property
    def hazard_dim(self) -> int:
        """Number of B-spline coefficients (excluding the hazard intercept)."""
        return self.hazard_basis.dim if self.hazard_basis is not None else 0

    @property
    def dirichlet(self) -> np.ndarray:
        if self.dirichlet_a is None:
            return np.ones(self.G)
        return np.asarray(self.dirichlet_a, dtype=float)

    def with_classes(self, G: int, dirichlet_a=None) -> "ModelSpec":
        return replace(self, G=G, dirichlet_a=dirichlet_a)


# ---------------------------------------------------------------------------
# Parameter state and chain output


@dataclass(frozen=True)
class ParameterState:
    """All parameters at one MCMC iteration.

    Class indices are 0-based internally; reporting uses 1-based labels.
    Arrays are treated as read-only; `copy()` gives an independent snapshot.
    """

    beta: np.ndarray       # (G, p)
    sigma_y2: float
    Sigma_b: np.ndarray    # (G, q, q)
    gamma: np.ndarray      # (G, p_w)
    alpha: np.ndarray      # (G,)
    gamma_h0: np.ndarray   # (G, Q+1); entry 0 is the intercept
    pi: np.ndarray         # (G,)
    v: np.ndarray          # (n,) ints in 0..G-1
    b: np.ndarray          # (n, G, q)

    @property
    def G(self) -> int:
        return self.beta.shape[0]

    def copy(self) -> "ParameterState":
        return ParameterState(
            beta=self.beta.copy(), sigma_y2=float(self.sigma_y2),
            Sigma_b=self.Sigma_b.copy(), gamma=self.gamma.copy(),
            alpha=self.alpha.copy(), gamma_h0=self.gamma_h0.copy(),
            pi=self.pi.copy(), v=self.v.copy(), b=self.b.copy())

    def validate(self) -> None:
        if not self.sigma_y2 > 0:
            raise ValidationError(f"sigma_y2 must be > 0, got {self.sigma_y2}")
        if abs(self.pi.sum() - 1.0) > 1e-12 or np.any(self.pi < 0):
            raise ValidationError("pi must be a probability vector (sum 1 within 1e-12)")
        for g in range(self.G):
            S = self.Sigma_b[g]
            if not np.allclose(S, S.T, atol=1e-12):
                raise ValidationError(f"Sigma_b[{g + 1}] is not symmetric")
            try:
                np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise ValidationError(f"Sigma_b[{g + 1}] is not positive definite") from None
        if np.any(self.v < 0) or np.any(self.v >= self.G):
            raise ValidationError("class indicators out of range")


@dataclass(frozen=True)
class ChainOutput:
    """Retained draws plus per-iteration occupancy and sampler diagnostics."""

    draws: tuple[ParameterState, ...]
    occupancy: np.ndarray            # (iterations, G), every iteration incl. burn-in
    acceptance: dict[str, float]
    step_sizes: dict[str, float]
    config_echo: object              # ChainConfig
    priors_echo: object = None       # PriorConfig
    relabel_trace: np.ndarray | None = None  # (draws, G) permutations, if relabeled
    relabel_ties: np.ndarray | None = None   # (draws,) bool tie flags

    @property
    def G(self) -> int:
        return self.occupancy.shape[1]


# ---------------------------------------------------------------------------
# CSV interfaces

LONG_FIXED_COLS = ("subject_id", "time", "y")
SURV_FIXED_COLS = ("subject_id", "event_time", "event_indicator")


def _parse_float(text: str, what: str, row: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"row {row}: cannot parse {what} value {text!r}") from None


def read_longitudinal_csv(path) -> tuple[list[LongRecord], tuple[str, ...]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:3]) != LONG_FIXED_COLS:
            raise ValidationError(
                f"{path}: longitudinal CSV must start with header "
                f"{','.join(LONG_FIXED_COLS)}")
        x_names = tuple(header[3:])
        records = []
        for row, cells in enumerate(reader, start=1):
            if len(cells) != len(header):
                raise ValidationError(f"{path} row {row}: expected {len(header)} cells")
            records.append(LongRecord(
                subject_id=cells[0],
                time=_parse_float(cells[1], "time", row),
                y=_parse_float(cells[2], "y", row),
                x_covariates=tuple(_parse_float(c, x_names[j], row)
                                   for j, c in enumerate(cells[3:]))))
    return records, x_names


def read_survival_csv(path) -> tuple[list[SurvRecord], tuple[str, ...]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:3]) != SURV_FIXED_COLS:
            raise ValidationError(
                f"{path}: survival CSV must start with header "
                f"{','.join(SURV_FIXED_COLS)}")
        w_names = tuple(header[3:])
        records = []
        for row, cells in enumerate(reader, start=1):
            if len(cells) != len(header):
                raise ValidationError(f"{path} row {row}: expected {len(header)} cells")
            ind = _parse_float(cells[2], "event_indicator", row)
            if ind not in (0.0, 1.0):
                raise ValidationError(
                    f"{path} row {row}: event_indicator must be 0 or 1, got {cells[2]!r}")
            records.append(SurvRecord(
                subject_id=cells[0],
                event_time=_parse_float(cells[1], "event_time", row),
                event_indicator=int(ind),
                w_covariates=tuple(_parse_float(c, w_names[j], row)
                                   for j, c in enumerate(cells[3:]))))
    return records, w_names


def write_longitudinal_csv(path, records: Sequence[LongRecord], x_names: Sequence[str]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*LONG_FIXED_COLS, *x_names])
        for r in records:
            writer.writerow([r.subject_id, repr(float(r.time)), repr(float(r.y)),
                             *(repr(float(v)) for v in r.x_covariates)])


def write_survival_csv(path, records: Sequence[SurvRecord], w_names: Sequence[str]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*SURV_FIXED_COLS, *w_names])
        for r in records:
            writer.writerow([r.subject_id, repr(float(r.event_time)), str(r.event_indicator),
                             *(repr(float(v)) for v in r.w_covariates)])


def load_dataset(long_path, surv_path) -> Dataset:
    long, x_names = read_longitudinal_csv(long_path)
    surv, w_names = read_survival_csv(surv_path)
    return validate_dataset(long, surv, x_names=x_names, w_names=w_names)
