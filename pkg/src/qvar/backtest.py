"""VaR forecast scoring: exceedance statistics and the Dynamic Quantile test.

The hit variable takes the value 1 - theta when the day's return falls below
the negated VaR forecast (an exceedance) and -theta otherwise, so it has
zero mean under correct calibration. The DQ test regresses hits on the
current VaR and lagged hits and refers the quadratic form to a chi-square
distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InsufficientDataError, ShapeError

DEFAULT_HIT_LAGS = 3


@dataclass(frozen=True)
class HitSeries:
    """Centered exceedance indicators: each value is exactly 1-theta or -theta."""

    values: np.ndarray
    theta: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if not 0.0 < self.theta < 1.0:
            raise DomainError("quantile level must lie strictly inside (0, 1)")
        ok = (values == 1.0 - self.theta) | (values == -self.theta)
        if not np.all(ok):
            raise DomainError("hit values must be exactly 1-theta or -theta")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def exceedance_rate(self) -> float:
        return float(np.mean(self.values == 1.0 - self.theta))


@dataclass(frozen=True)
class DqResult:
    statistic: float
    dof: int
    p_value: float


@dataclass(frozen=True)
class BacktestResult:
    """Scores for one VaR forecast series over a test segment."""

    exceedance_rate: float
    mean_var: float
    dq_statistic: float
    dof: int
    p_value: float
    n_days: int
    n_exceedances: int


def hits(returns, var, theta: float) -> HitSeries:
    """Hit_t = 1-theta if return_t < -VaR_t (strict), else -theta."""
    returns = np.asarray(returns, dtype=float)
    var = np.asarray(var, dtype=float)
    if returns.shape != var.shape:
        raise ShapeError(f"returns ({returns.shape}) and VaR ({var.shape}) lengths differ")
    if not 0.0 < theta < 1.0:
        raise DomainError("quantile level must lie strictly inside (0, 1)")
    values = np.where(returns < -var, 1.0 - theta, -theta)
    return HitSeries(values=values, theta=theta)


# ---------------------------------------------------------------------------
# chi-square tail probability
# ---------------------------------------------------------------------------

_GAMMA_EPS = 1e-16
_GAMMA_MAX_ITER = 1000


def _lower_gamma_series(a: float, x: float) -> float:
    # regularized lower incomplete gamma P(a, x) by power series; good for x < a + 1
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_GAMMA_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _GAMMA_EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _upper_gamma_cf(a: float, x: float) -> float:
    # regularized upper incomplete gamma Q(a, x) by continued fraction; good for x >= a + 1
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma_q(a: float, x: float) -> float:
    """Q(a, x) = Gamma(a, x) / Gamma(a), the upper regularized incomplete gamma."""
    if a <= 0:
        raise DomainError("shape parameter must be positive")
    if x < 0:
        raise DomainError("argument must be non-negative")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return min(max(1.0 - _lower_gamma_series(a, x), 0.0), 1.0)
    return min(max(_upper_gamma_cf(a, x), 0.0), 1.0)


def chi2_sf(x: float, k: int) -> float:
    """Upper-tail chi-square probability P(chi2_k > x)."""
    if x < 0:
        raise DomainError("chi-square statistic must be non-negative")
    if k < 1:
        raise DomainError("degrees of freedom must be >= 1")
    return regularized_gamma_q(0.5 * k, 0.5 * x)


# ---------------------------------------------------------------------------
# Dynamic Quantile test
# ---------------------------------------------------------------------------


def dq_regressors(hit: HitSeries, var, hit_lags: int = DEFAULT_HIT_LAGS):
    """Design matrix [VaR_t, Hit_{t-1}, ..., Hit_{t-L}] and the aligned hit vector.

    The first hit_lags observations are dropped so every row has a full set
    of lags.
    """
    var = np.asarray(var, dtype=float)
    h = hit.values
    if var.shape != h.shape:
        raise ShapeError(f"hits ({h.shape}) and VaR ({var.shape}) lengths differ")
    rows = np.arange(hit_lags, h.size)
    cols = [var[rows]]
    for lag in range(1, hit_lags + 1):
        cols.append(h[rows - lag])
    return np.column_stack(cols), h[rows]


def dq_test(hit: HitSeries, var, hit_lags: int = DEFAULT_HIT_LAGS) -> DqResult:
    """Dynamic Quantile statistic Hit'X (X'X)^- X'Hit / (theta (1 - theta)).

    Uses a rank-tolerant pseudo-inverse (singular values below 1e-10 of the
    largest are dropped) so degenerate regressors such as a constant VaR
    with no exceedances still yield a defined statistic. dof equals the
    number of regressor columns regardless of rank.
    """
    X, h = dq_regressors(hit, var, hit_lags)
    dof = X.shape[1]
    if h.size <= dof:
        raise InsufficientDataError(
            f"DQ test needs more than {hit_lags + dof} observations, got {len(hit)}"
        )
    gram = X.T @ X
    xh = X.T @ h
    delta = np.linalg.pinv(gram, rcond=1e-10, hermitian=True) @ xh
    statistic = float(xh @ delta) / (hit.theta * (1.0 - hit.theta))
    statistic = max(statistic, 0.0)
    return DqResult(statistic=statistic, dof=dof, p_value=chi2_sf(statistic, dof))


def score_forecast(
    returns, var, theta: float, hit_lags: int = DEFAULT_HIT_LAGS
) -> BacktestResult:
    """Exceedance rate, mean VaR and the DQ test for one forecast series.

    A series with zero exceedances is assigned p_value = 0 regardless of the
    DQ statistic, so it always counts as a rejection.
    """
    hit = hits(returns, var, theta)
    var = np.asarray(var, dtype=float)
    n_exc = int(np.sum(hit.values == 1.0 - theta))
    dq = dq_test(hit, var, hit_lags)
    p_value = 0.0 if n_exc == 0 else dq.p_value
    return BacktestResult(
        exceedance_rate=hit.exceedance_rate,
        mean_var=float(np.mean(var)),
        dq_statistic=dq.statistic,
        dof=dq.dof,
        p_value=p_value,
        n_days=len(hit),
        n_exceedances=n_exc,
    )
