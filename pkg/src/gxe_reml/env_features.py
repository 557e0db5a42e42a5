"""Environmental covariates: thermal time, piecewise summaries, and
environment-by-environment similarity.

Daily weather is reduced to one heat-unit trajectory per environment.  Each
additional covariate is then regressed on accumulated heat units with a
piecewise-constant model (one intercept per fixed-width window), giving a
feature matrix with one column per environment and one row per
variable-window pair.  Rows are standardized to mean zero and unit
population variance, after which

    Chat = X^T X / q          (q = number of feature rows)

is the environment correlation estimate and

    D_ij = sum_k (X_ki - X_kj)^2

is the squared Euclidean distance driving Gaussian kernels.  Distances and
correlations are tied through D_ij = q * (Chat_ii + Chat_jj - 2 Chat_ij).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DataError,
    EmptyBinError,
    InvalidInputError,
    ZeroVarianceError,
)

logger = logging.getLogger(__name__)

_SYM_TOL = 1e-8


def _check_square(values: np.ndarray, labels: Sequence[str], what: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise InvalidInputError(f"{what} must be square, got shape {values.shape}")
    if len(labels) != values.shape[0]:
        raise InvalidInputError(
            f"{what} has {values.shape[0]} rows but {len(labels)} labels"
        )
    if len(set(labels)) != len(labels):
        raise InvalidInputError(f"{what} labels contain duplicates")
    if not np.all(np.isfinite(values)):
        raise InvalidInputError(f"{what} contains non-finite entries")
    gap = float(np.max(np.abs(values - values.T), initial=0.0))
    if gap > _SYM_TOL:
        raise InvalidInputError(
            f"{what} is asymmetric beyond tolerance (max gap {gap:.3e})"
        )
    return 0.5 * (values + values.T)


@dataclass(frozen=True)
class DailyWeatherRecord:
    """One day of weather for one environment.

    Attributes:
        environment: Environment label.
        day: Day index within the season; must increase strictly within an
            environment.
        t_min: Daily minimum temperature (Fahrenheit).
        t_max: Daily maximum temperature (Fahrenheit).
        covariates: Additional named daily measurements.
    """

    environment: str
    day: int
    t_min: float
    t_max: float
    covariates: Mapping[str, float] = field(default_factory=dict)


@dataclass
class EnvFeatureMatrix:
    """Row-standardized feature matrix, one column per environment."""

    values: np.ndarray
    variable_labels: list[str]
    environment_labels: list[str]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InvalidInputError("feature matrix must be two-dimensional")
        q, p = self.values.shape
        if len(self.variable_labels) != q or len(self.environment_labels) != p:
            raise InvalidInputError(
                f"feature matrix is {q}x{p} but has {len(self.variable_labels)} "
                f"row labels and {len(self.environment_labels)} column labels"
            )
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("feature matrix contains non-finite entries")

    @property
    def q(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def check_standardized(self, tol: float = 1e-8) -> None:
        """Raise unless every row has mean 0 and population sd 1 within tol."""
        means = self.values.mean(axis=1)
        sds = self.values.std(axis=1)
        if np.max(np.abs(means), initial=0.0) > tol or np.max(
            np.abs(sds - 1.0), initial=0.0
        ) > tol:
            raise InvalidInputError(
                "feature matrix rows are not standardized to mean 0, sd 1"
            )


@dataclass
class EnvCorrelationMatrix:
    """Symmetric environment correlation estimate with labels."""

    values: np.ndarray
    labels: list[str]

    def __post_init__(self) -> None:
        self.values = _check_square(self.values, self.labels, "correlation matrix")
        diag_gap = float(np.max(np.abs(np.diag(self.values) - 1.0), initial=0.0))
        if diag_gap > 0.25:
            logger.warning(
                "correlation matrix diagonal deviates from 1 by up to %.3g", diag_gap
            )

    @property
    def p(self) -> int:
        return self.values.shape[0]


@dataclass
class EnvDistanceMatrix:
    """Symmetric squared-distance matrix with zero diagonal and labels."""

    values: np.ndarray
    labels: list[str]

    def __post_init__(self) -> None:
        values = _check_square(self.values, self.labels, "distance matrix")
        diag = np.diag(values)
        if np.max(np.abs(diag), initial=0.0) > 1e-10:
            raise InvalidInputError("distance matrix diagonal must be zero")
        if values.min(initial=0.0) < -1e-10:
            raise InvalidInputError("distance matrix contains negative entries")
        values = np.clip(values, 0.0, None)
        np.fill_diagonal(values, 0.0)
        self.values = values

    @property
    def p(self) -> int:
        return self.values.shape[0]


def gdd_daily(t_min: float, t_max: float, base: float = 50.0, ceiling: float = 86.0) -> float:
    """Daily heat units from min/max temperature.

    The minimum is floored at ``base`` and the maximum capped at ``ceiling``
    before averaging; the value may be negative on cold days (no flooring of
    the result).

    Args:
        t_min: Daily minimum temperature.
        t_max: Daily maximum temperature.
        base: Lower development threshold (also subtracted from the mean).
        ceiling: Upper development threshold.

    Returns:
        ((max(t_min, base) + min(t_max, ceiling)) / 2) - base.
    """
    if not (np.isfinite(t_min) and np.isfinite(t_max)):
        raise InvalidInputError("temperatures must be finite")
    if t_min > t_max:
        raise InvalidInputError(f"t_min {t_min} exceeds t_max {t_max}")
    return (max(t_min, base) + min(t_max, ceiling)) / 2.0 - base


def gdd_accumulate(pairs: Iterable[tuple[float, float]]) -> np.ndarray:
    """Cumulative heat units over a season.

    Args:
        pairs: Daily (t_min, t_max) tuples in chronological order.

    Returns:
        Array of running totals, one per day.
    """
    daily = [gdd_daily(lo, hi) for lo, hi in pairs]
    if not daily:
        raise InvalidInputError("at least one day of weather is required")
    return np.cumsum(daily)


def piecewise_intercepts(
    points: Iterable[tuple[float, float]],
    interval: float = 100.0,
    window: tuple[float, float] = (0.0, 2000.0),
) -> np.ndarray:
    """Piecewise-constant regression of a covariate on accumulated heat units.

    The window [lo, hi) is cut into bins of equal width ``interval`` and the
    fitted intercept for each bin is the mean of the covariate values whose
    position falls in it.  Points outside the window are discarded.

    Args:
        points: (position, value) pairs.
        interval: Bin width; must divide the window evenly.
        window: (lo, hi) with lo < hi.

    Returns:
        One mean per bin, in increasing bin order.

    Raises:
        EmptyBinError: If some bin receives no points.
    """
    lo, hi = float(window[0]), float(window[1])
    if not np.isfinite(interval) or interval <= 0:
        raise InvalidInputError(f"interval must be positive, got {interval}")
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        raise InvalidInputError(f"window must satisfy lo < hi, got ({lo}, {hi})")
    span = (hi - lo) / interval
    n_bins = int(round(span))
    if n_bins < 1 or abs(span - n_bins) > 1e-9:
        raise InvalidInputError(
            f"window width {hi - lo} is not a whole number of intervals {interval}"
        )
    sums = np.zeros(n_bins)
    counts = np.zeros(n_bins, dtype=int)
    for x, value in points:
        if not (np.isfinite(x) and np.isfinite(value)):
            raise InvalidInputError("points must be finite")
        if x < lo or x >= hi:
            continue
        k = int((x - lo) // interval)
        if k >= n_bins:
            continue
        sums[k] += value
        counts[k] += 1
    empty = np.nonzero(counts == 0)[0]
    if empty.size:
        k = int(empty[0])
        raise EmptyBinError(
            f"bin [{lo + k * interval:g}, {lo + (k + 1) * interval:g}) "
            "contains no observations"
        )
    return sums / counts


def standardize_rows(
    raw: np.ndarray,
    variable_labels: Sequence[str] | None = None,
    environment_labels: Sequence[str] | None = None,
) -> EnvFeatureMatrix:
    """Center and scale each row to mean 0 and unit population variance.

    Args:
        raw: q x p matrix, one row per variable-window pair.
        variable_labels: Optional row labels; defaults to v0..v{q-1}.
        environment_labels: Optional column labels; defaults to e0..e{p-1}.

    Raises:
        ZeroVarianceError: If some row is constant.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2:
        raise InvalidInputError("feature matrix must be two-dimensional")
    q, p = raw.shape
    if p < 2:
        raise InvalidInputError(f"at least two environments are required, got {p}")
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError("feature matrix contains non-finite entries")
    if variable_labels is None:
        variable_labels = [f"v{i}" for i in range(q)]
    if environment_labels is None:
        environment_labels = [f"e{j}" for j in range(p)]
    sds = raw.std(axis=1)
    dead = np.nonzero(sds == 0.0)[0]
    if dead.size:
        raise ZeroVarianceError(
            f"feature row {variable_labels[int(dead[0])]!r} is constant"
        )
    values = (raw - raw.mean(axis=1, keepdims=True)) / sds[:, None]
    return EnvFeatureMatrix(values, list(variable_labels), list(environment_labels))


def env_correlation(features: EnvFeatureMatrix) -> EnvCorrelationMatrix:
    """Environment correlation estimate Chat = X^T X / q.

    Rows of ``features`` must already be standardized; the diagonal of the
    result is close to, but not exactly, 1 while its trace equals p exactly.
    """
    features.check_standardized()
    x = features.values
    c = x.T @ x / features.q
    c = 0.5 * (c + c.T)
    return EnvCorrelationMatrix(c, list(features.environment_labels))


def env_distance(features: EnvFeatureMatrix) -> EnvDistanceMatrix:
    """Squared Euclidean distance between environment columns.

    Standardized input is the caller's responsibility; the tie
    D = 2q(J - Chat) holds only when rows are standardized.
    """
    x = features.values
    sq = np.einsum("ij,ij->j", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x.T @ x)
    d = 0.5 * (d + d.T)
    np.clip(d, 0.0, None, out=d)
    np.fill_diagonal(d, 0.0)
    return EnvDistanceMatrix(d, list(features.environment_labels))


def blend_correlation(
    corr: EnvCorrelationMatrix,
    noise: EnvCorrelationMatrix,
    lam: float,
) -> EnvCorrelationMatrix:
    """Convex combination (1 - lam) * corr + lam * noise.

    Args:
        corr: Base correlation matrix.
        noise: Matrix to blend toward (same labels and size).
        lam: Mixing weight in [0, 1]; 0 returns ``corr`` unchanged.
    """
    if not np.isfinite(lam) or lam < 0.0 or lam > 1.0:
        raise InvalidInputError(f"lambda must lie in [0, 1], got {lam}")
    if corr.labels != noise.labels:
        raise InvalidInputError("blended matrices must share environment labels")
    out = (1.0 - lam) * corr.values + lam * noise.values
    # Where both inputs carry an exact unit diagonal, keep it exact.
    diag_a = np.diag(corr.values)
    diag_b = np.diag(noise.values)
    unit = (diag_a == 1.0) & (diag_b == 1.0)
    d = np.diag(out).copy()
    d[unit] = 1.0
    np.fill_diagonal(out, d)
    return EnvCorrelationMatrix(out, list(corr.labels))


def random_correlation(p: int, seed: int, labels: Sequence[str] | None = None) -> EnvCorrelationMatrix:
    """Random correlation matrix from a rescaled Wishart-style draw.

    A p x p standard normal matrix A is drawn from
    ``numpy.random.default_rng(seed)`` (PCG64), B = A A^T is formed, and B is
    rescaled to unit diagonal.  The result is positive semidefinite with
    exact ones on the diagonal.
    """
    if p < 2:
        raise InvalidInputError(f"at least two environments are required, got {p}")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((p, p))
    b = a @ a.T
    b = 0.5 * (b + b.T)
    d = np.sqrt(np.diag(b))
    c = b / np.outer(d, d)
    np.fill_diagonal(c, 1.0)
    if labels is None:
        labels = [f"e{j}" for j in range(p)]
    return EnvCorrelationMatrix(c, list(labels))


def weather_to_features(
    records: Sequence[DailyWeatherRecord],
    variables: Sequence[str],
    interval: float = 100.0,
    window: tuple[float, float] = (0.0, 2000.0),
) -> tuple[np.ndarray, list[str], list[str]]:
    """Raw per-environment piecewise summaries of daily weather.

    For every environment, daily heat units are accumulated and each
    requested variable is regressed on the running total with
    :func:`piecewise_intercepts`.  Variables may be ``t_min``, ``t_max``, or
    any covariate name present on every record.

    Returns:
        (raw matrix with one row per variable-bin and one column per
        environment, row labels ``var@binstart``, environment labels in
        first-appearance order).
    """
    if not records:
        raise DataError("no weather records supplied")
    if not variables:
        raise InvalidInputError("at least one variable is required")
    grouped: dict[str, list[DailyWeatherRecord]] = {}
    for rec in records:
        grouped.setdefault(rec.environment, []).append(rec)
    env_labels = list(grouped)
    for env, recs in grouped.items():
        days = [r.day for r in recs]
        if any(b <= a for a, b in zip(days, days[1:])):
            raise DataError(f"environment {env!r}: day indices must increase strictly")
        for r in recs:
            if r.t_min > r.t_max:
                raise DataError(
                    f"environment {env!r}, day {r.day}: t_min {r.t_min} exceeds "
                    f"t_max {r.t_max}"
                )

    def value_of(rec: DailyWeatherRecord, var: str) -> float:
        if var == "t_min":
            return rec.t_min
        if var == "t_max":
            return rec.t_max
        try:
            return float(rec.covariates[var])
        except KeyError:
            raise DataError(
                f"environment {rec.environment!r}, day {rec.day}: "
                f"missing covariate {var!r}"
            ) from None

    lo = float(window[0])
    columns: list[np.ndarray] = []
    for env in env_labels:
        recs = grouped[env]
        cum = gdd_accumulate([(r.t_min, r.t_max) for r in recs])
        col_parts = []
        for var in variables:
            points = [(float(c), value_of(r, var)) for c, r in zip(cum, recs)]
            try:
                col_parts.append(piecewise_intercepts(points, interval, window))
            except EmptyBinError as exc:
                raise EmptyBinError(
                    f"environment {env!r}, variable {var!r}: {exc}"
                ) from None
        columns.append(np.concatenate(col_parts))
    raw = np.column_stack(columns)
    n_bins = raw.shape[0] // len(variables)
    row_labels = [
        f"{var}@{lo + k * interval:g}"
        for var in variables
        for k in range(n_bins)
    ]
    return raw, row_labels, env_labels


def process_weather(
    records: Sequence[DailyWeatherRecord],
    variables: Sequence[str],
    interval: float = 100.0,
    window: tuple[float, float] = (0.0, 2000.0),
) -> tuple[EnvFeatureMatrix, EnvCorrelationMatrix, EnvDistanceMatrix]:
    """Full pipeline from daily weather to similarity matrices."""
    raw, row_labels, env_labels = weather_to_features(
        records, variables, interval, window
    )
    features = standardize_rows(raw, row_labels, env_labels)
    return features, env_correlation(features), env_distance(features)
