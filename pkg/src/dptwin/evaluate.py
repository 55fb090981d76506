"""Twin utility metrics: matrix errors, regressions, discovery verdicts.

Regressions are fit by iteratively reweighted least squares with the
canonical link (log for Poisson, logit for logistic); standard errors come
from the inverse observed information and p-values are two-sided Wald z.
A "reproduced discovery" requires every designated regressor to be positive
and significant at the strict 0.05 level, mirroring how the original
epidemiological finding is defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .schema import BINARY, CATEGORICAL, CONTINUOUS, Dataset, SchemaError
from .util import substream

MAX_IRLS_ITER = 100
IRLS_TOL = 1e-8
# Logistic norms beyond this are treated as separation (likelihood unbounded).
SEPARATION_NORM = 30.0


class RankDeficientError(ValueError):
    """Design matrix is not full column rank; names the offending columns."""


@dataclass(frozen=True)
class RegressionReport:
    names: tuple[str, ...]
    coefficients: np.ndarray
    std_errors: np.ndarray
    p_values: np.ndarray
    converged: bool
    offset_used: bool = False
    separation: bool = False

    def coefficient(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def p_value(self, name: str) -> float:
        return float(self.p_values[self.names.index(name)])


@dataclass(frozen=True)
class DiscoveryVerdict:
    """Signs and significance per designated regressor, plus the combined call."""

    regressors: tuple[str, ...]
    signs: tuple[int, ...]
    significant: tuple[bool, ...]
    combined: bool


def frobenius_error(a: np.ndarray, b: np.ndarray) -> float:
    """sqrt of the summed squared entrywise differences."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def second_moment_matrix(ds: Dataset) -> np.ndarray:
    """Uncentered second-moment matrix (1/n) X^T X of the encoded features.

    Uncentered rather than mean-centered: the centered covariance has
    data-dependent sensitivity through the mean, which would break the noise
    calibration in the DP release path.
    """
    x = np.asarray(ds.rows, dtype=float)
    return x.T @ x / ds.n


def _check_rank(x: np.ndarray, names: tuple[str, ...]) -> None:
    rank = np.linalg.matrix_rank(x)
    if rank == x.shape[1]:
        return
    offenders = []
    for j in range(1, x.shape[1] + 1):
        if np.linalg.matrix_rank(x[:, :j]) < j:
            offenders.append(names[j - 1])
    raise RankDeficientError(f"collinear design columns: {offenders}")


def _wald_p(z: np.ndarray) -> np.ndarray:
    return np.array([math.erfc(abs(v) / math.sqrt(2.0)) for v in np.atleast_1d(z)])


def _irls(
    x: np.ndarray,
    y: np.ndarray,
    family: str,
    offset: np.ndarray | None,
    names: tuple[str, ...],
) -> RegressionReport:
    n, p = x.shape
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    beta = np.zeros(p)
    converged = False
    separation = False
    for _ in range(MAX_IRLS_ITER):
        eta = x @ beta + off
        if family == "poisson":
            mu = np.exp(np.clip(eta, -500, 500))
            w = mu
        else:
            mu = 1.0 / (1.0 + np.exp(-np.clip(eta, -500, 500)))
            w = mu * (1.0 - mu)
        w = np.maximum(w, 1e-12)
        z = eta - off + (y - mu) / w
        xtw = x.T * w
        try:
            beta_new = np.linalg.solve(xtw @ x, xtw @ z)
        except np.linalg.LinAlgError:
            break
        step = np.max(np.abs(beta_new - beta))
        beta = beta_new
        if family == "logistic" and np.max(np.abs(beta)) > SEPARATION_NORM:
            separation = True
            beta = np.clip(beta, -SEPARATION_NORM, SEPARATION_NORM)
            break
        if step < IRLS_TOL:
            converged = True
            break
    if family == "logistic" and not converged and not separation:
        # the slow-divergence signature: perfect classification with a norm
        # still climbing when the iteration budget ran out
        mu_fit = 1.0 / (1.0 + np.exp(-np.clip(x @ beta + off, -500, 500)))
        if np.all((mu_fit > 0.5) == (y > 0.5)) and np.max(np.abs(beta)) > 10.0:
            separation = True
    eta = x @ beta + off
    if family == "poisson":
        w = np.exp(np.clip(eta, -500, 500))
    else:
        mu = 1.0 / (1.0 + np.exp(-np.clip(eta, -500, 500)))
        w = mu * (1.0 - mu)
    info = (x.T * np.maximum(w, 1e-12)) @ x
    cov = np.linalg.inv(info)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    zscores = np.divide(beta, se, out=np.zeros_like(beta), where=se > 0)
    return RegressionReport(
        names=names,
        coefficients=beta,
        std_errors=se,
        p_values=_wald_p(zscores),
        converged=converged,
        offset_used=offset is not None,
        separation=separation,
    )


def poisson_regression(
    x: np.ndarray,
    y: np.ndarray,
    offset: np.ndarray | None = None,
    names: tuple[str, ...] | None = None,
) -> RegressionReport:
    """Maximum-likelihood Poisson fit with log link.

    offset, when given, is the log-exposure added to the linear predictor.
    Raises RankDeficientError (naming columns) on collinear designs; a fit
    that runs out of iterations comes back with converged=False.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    rounded = np.round(y)
    # tolerate encode/decode float noise on count-valued features
    if (y < -1e-9).any() or np.max(np.abs(y - rounded), initial=0.0) > 1e-6:
        raise ValueError("poisson response must be nonnegative integer counts")
    y = np.maximum(rounded, 0.0)
    if names is None:
        names = tuple(f"x{j}" for j in range(x.shape[1]))
    _check_rank(x, names)
    return _irls(x, y, "poisson", offset, names)


class LogisticModel:
    """Fitted logistic classifier with its inference report."""

    def __init__(self, report: RegressionReport):
        self.report = report

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        eta = np.asarray(x, dtype=float) @ self.report.coefficients
        return 1.0 / (1.0 + np.exp(-np.clip(eta, -500, 500)))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.predict_proba(x) >= 0.5).astype(float)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y, dtype=float)))


def logistic_regression(
    x: np.ndarray, y: np.ndarray, names: tuple[str, ...] | None = None
) -> LogisticModel:
    """IRLS logistic fit; separation is flagged and the norm capped."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValueError("logistic response must be binary 0/1")
    if names is None:
        names = tuple(f"x{j}" for j in range(x.shape[1]))
    _check_rank(x, names)
    return LogisticModel(_irls(x, y, "logistic", None, names))


def discovery_verdict(report: RegressionReport, regressors: list[str]) -> DiscoveryVerdict:
    """Combined is true iff every named regressor is positive with p < 0.05.

    The inequality is strict: p exactly 0.05 does not count as significant.
    """
    signs = []
    significant = []
    for name in regressors:
        coef = report.coefficient(name)
        signs.append(1 if coef > 0 else (-1 if coef < 0 else 0))
        significant.append(report.p_value(name) < 0.05)
    combined = all(s == 1 for s in signs) and all(significant)
    return DiscoveryVerdict(
        regressors=tuple(regressors),
        signs=tuple(signs),
        significant=tuple(significant),
        combined=combined,
    )


@dataclass(frozen=True)
class RegressionSpec:
    """Declarative regression: response, design columns, designated regressors.

    Columns are taken from the dataset in data units (continuous decoded,
    binary as 0/1); categorical regressors expand into reference-coded
    dummies named "feature=label" (first category is the reference).
    designated lists the regressors whose joint positive significance
    defines a reproduced discovery.
    """

    response: str
    regressors: tuple[str, ...]
    designated: tuple[str, ...]
    family: str = "poisson"
    offset_feature: str | None = None
    add_intercept: bool = True

    def __post_init__(self) -> None:
        if self.family not in ("poisson", "logistic"):
            raise ValueError(f"unknown family {self.family!r}")


def build_design(
    ds: Dataset, spec: RegressionSpec
) -> tuple[np.ndarray, np.ndarray, tuple[str, ...], np.ndarray | None]:
    """Materialize (X, y, column names, offset) from a dataset."""
    schema = ds.schema
    resp = schema.feature(spec.response)
    if resp.kind == CATEGORICAL:
        raise SchemaError("categorical responses are not supported")
    if resp.kind == CONTINUOUS:
        lo, hi = resp.bounds
        y = ds.column(spec.response) * (hi - lo) + lo
    else:
        y = ds.column(spec.response)

    cols: list[np.ndarray] = []
    names: list[str] = []
    if spec.add_intercept:
        cols.append(np.ones(ds.n))
        names.append("intercept")
    for reg in spec.regressors:
        f = schema.feature(reg)
        col = ds.column(reg)
        if f.kind == CONTINUOUS:
            lo, hi = f.bounds
            cols.append(col * (hi - lo) + lo)
            names.append(reg)
        elif f.kind == BINARY:
            cols.append(col)
            names.append(reg)
        else:
            for c in range(1, f.cardinality):
                cols.append((col == c).astype(float))
                names.append(f"{reg}={f.categories[c]}")
    x = np.column_stack(cols)

    offset = None
    if spec.offset_feature is not None:
        f = schema.feature(spec.offset_feature)
        exposure = ds.column(spec.offset_feature)
        if f.kind == CONTINUOUS:
            lo, hi = f.bounds
            exposure = exposure * (hi - lo) + lo
        if (exposure <= 0).any():
            raise ValueError("offset exposures must be strictly positive")
        offset = np.log(exposure)
    return x, y, tuple(names), offset


def fit_spec(ds: Dataset, spec: RegressionSpec) -> RegressionReport:
    x, y, names, offset = build_design(ds, spec)
    if spec.family == "poisson":
        return poisson_regression(x, y, offset=offset, names=names)
    return logistic_regression(x, y, names=names).report


def resolve_designated(spec: RegressionSpec, names: tuple[str, ...]) -> list[str]:
    """Expand designated base feature names to their dummy column names."""
    out = []
    for want in spec.designated:
        if want in names:
            out.append(want)
            continue
        expanded = [n for n in names if n.startswith(want + "=")]
        if not expanded:
            raise ValueError(f"designated regressor {want!r} not in design {names}")
        out.extend(expanded)
    return out


def bootstrap_discovery_rate(
    ds: Dataset, spec: RegressionSpec, iterations: int, seed: int
) -> tuple[float, int]:
    """Fraction of resamples whose refit reproduces the combined discovery.

    Resamples n rows with replacement per iteration.  Degenerate resamples
    (rank-deficient designs) count as non-discoveries; their count is
    returned alongside the rate.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = substream(seed, "bootstrap")
    hits = 0
    degenerate = 0
    designated: list[str] | None = None
    for _ in range(iterations):
        idx = rng.integers(0, ds.n, size=ds.n)
        sample = Dataset(schema=ds.schema, rows=ds.rows[idx])
        try:
            report = fit_spec(sample, spec)
        except (RankDeficientError, np.linalg.LinAlgError):
            degenerate += 1
            continue
        if designated is None:
            designated = resolve_designated(spec, report.names)
        if discovery_verdict(report, designated).combined:
            hits += 1
    return hits / iterations, degenerate


@dataclass(frozen=True)
class RarityBin:
    case_range: tuple[float, float]
    mean_abs_error: float
    reference: float  # mean inverse case count; proportional to the 1/n law
    coefficient_names: tuple[str, ...] = ()


@dataclass(frozen=True)
class RarityCurve:
    bins: tuple[RarityBin, ...]
    single_bin_fallback: bool = False


def rarity_binned_error(
    original: RegressionReport,
    synthetic_reports: list[RegressionReport],
    case_counts: dict,
) -> RarityCurve:
    """Coefficient error as a function of how many cases carry the feature.

    Coefficients are split into four equal-sized bins by case count; each bin
    reports the mean absolute error between original and synthetic
    coefficients (averaged over the synthetic repeats) plus the mean inverse
    case count, which scales like the error of an optimal private estimator.
    Fewer than four coefficients fall back to a single flagged bin.
    """
    names = [n for n in original.names if n in case_counts]
    if not names:
        raise ValueError("no coefficients with case counts")
    order = sorted(names, key=lambda n: case_counts[n])
    n_bins = 4 if len(order) >= 4 else 1
    chunks = np.array_split(np.array(order, dtype=object), n_bins)

    bins = []
    for chunk in chunks:
        errs = []
        for rep in synthetic_reports:
            for name in chunk:
                errs.append(abs(original.coefficient(name) - rep.coefficient(name)))
        counts = [case_counts[name] for name in chunk]
        bins.append(
            RarityBin(
                case_range=(float(min(counts)), float(max(counts))),
                mean_abs_error=float(np.mean(errs)),
                reference=float(np.mean([1.0 / c for c in counts])),
                coefficient_names=tuple(str(n) for n in chunk),
            )
        )
    return RarityCurve(bins=tuple(bins), single_bin_fallback=n_bins == 1)
