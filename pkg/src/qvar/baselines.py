"""Reference VaR forecasters: constant historical quantile, GARCH(1,1) with
normal innovations, and linear quantile autoregression with 4 lags.

All VaR numbers follow the sign convention VaR = -(predicted return
quantile), so a typical lower-tail forecast comes out positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter

from .errors import DomainError, FitError, InsufficientDataError, ShapeError

# ---------------------------------------------------------------------------
# normal quantile
# ---------------------------------------------------------------------------

# Rational approximations from Wichura's PPND16 algorithm (AS 241); absolute
# error is below 1e-15 over (0, 1), comfortably inside the 1e-9 contract.
_PPND_A = (
    3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
    1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
    3.3430575583588128105e4, 2.5090809287301226727e3,
)
_PPND_B = (
    1.0, 4.2313330701600911252e1, 6.8718700749205790830e2,
    5.3941960214247511077e3, 2.1213794301586595867e4, 3.9307895800092710610e4,
    2.8729085735721942674e4, 5.2264952788528545610e3,
)
_PPND_C = (
    1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
    3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
    2.27238449892691845833e-2, 7.74545014278341407640e-4,
)
_PPND_D = (
    1.0, 2.05319162663775882187e0, 1.67638483018380384940e0,
    6.89767334985100004550e-1, 1.48103976427480074590e-1, 1.51986665636164571966e-2,
    5.47593808499534494600e-4, 1.05075007164441684324e-9,
)
_PPND_E = (
    6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
    2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
    2.71155556874348757815e-5, 2.01033439929228813265e-7,
)
_PPND_F = (
    1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1,
    1.48753612908506148525e-2, 7.86869131145613259100e-4, 1.84631831751005468180e-5,
    1.42151175831644588870e-7, 2.04426310338993978564e-15,
)


def _poly(coeffs, x):
    acc = np.full_like(x, coeffs[-1])
    for c in coeffs[-2::-1]:
        acc = acc * x + c
    return acc


def gaussian_quantile(theta):
    """Standard normal quantile: the z with Phi(z) = theta.

    Accepts a scalar or an ndarray in (0, 1); scalars come back as float.
    """
    arr = np.asarray(theta, dtype=float)
    if arr.size and not np.all((arr > 0.0) & (arr < 1.0)):
        raise DomainError("quantile level must lie strictly inside (0, 1)")
    q = arr - 0.5
    central = np.abs(q) <= 0.425
    r_central = 0.180625 - q * q
    z = np.where(
        central,
        q * _poly(_PPND_A, r_central) / _poly(_PPND_B, r_central),
        0.0,
    )
    if not np.all(central):
        p_tail = np.where(q < 0, arr, 1.0 - arr)
        # guard the log for central entries; they are overwritten by `central` anyway
        r = np.sqrt(-np.log(np.where(central, 0.5, p_tail)))
        near = r <= 5.0
        rn = np.where(near, r - 1.6, r - 5.0)
        tail = np.where(
            near,
            _poly(_PPND_C, rn) / _poly(_PPND_D, rn),
            _poly(_PPND_E, rn) / _poly(_PPND_F, rn),
        )
        z = np.where(central, z, np.where(q < 0, -tail, tail))
    if np.isscalar(theta) or arr.ndim == 0:
        return float(z)
    return z


# ---------------------------------------------------------------------------
# constant quantile
# ---------------------------------------------------------------------------


def constant_quantile(xs, theta: float) -> float:
    """Empirical theta-quantile by linear interpolation.

    Sorts ascending and evaluates x_[i] + (i - [i]) * (x_[i]+1 - x_[i]) at
    the 1-based index i = (N - 1) * theta + 1.
    """
    if not 0.0 < theta < 1.0:
        raise DomainError("quantile level must lie strictly inside (0, 1)")
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        raise InsufficientDataError("cannot take the quantile of an empty sample")
    xs = np.sort(xs)
    n = xs.size
    i = (n - 1) * theta + 1.0
    j = int(math.floor(i))
    if j >= n:
        return float(xs[-1])
    frac = i - j
    return float(xs[j - 1] + frac * (xs[j] - xs[j - 1]))


def constant_var(train_returns, theta: float) -> float:
    """Constant VaR forecast: the negated empirical quantile of training returns."""
    return -constant_quantile(train_returns, theta)


# ---------------------------------------------------------------------------
# GARCH(1,1) with normal innovations
# ---------------------------------------------------------------------------

MIN_GARCH_OBS = 100


@dataclass(frozen=True)
class GarchParams:
    """GARCH(1,1) parameters with a constant mean return."""

    omega: float
    alpha: float
    beta: float
    mu: float

    def __post_init__(self):
        if not self.omega > 0:
            raise DomainError(f"omega must be positive, got {self.omega}")
        if self.alpha < 0 or self.beta < 0:
            raise DomainError("alpha and beta must be non-negative")
        if not self.alpha + self.beta < 1:
            raise DomainError(
                f"alpha + beta = {self.alpha + self.beta} violates stationarity"
            )

    @property
    def unconditional_variance(self) -> float:
        return self.omega / (1.0 - self.alpha - self.beta)


def _variance_recursion(eps2: np.ndarray, omega: float, alpha: float, beta: float, init_var: float):
    # sigma2[t] = (omega + alpha*eps2[t-1]) + beta*sigma2[t-1] is a first-order
    # IIR filter, so lfilter runs the exact recursion in one call
    driver = np.empty(eps2.size)
    driver[0] = init_var
    driver[1:] = omega + alpha * eps2[:-1]
    return lfilter([1.0], [1.0, -beta], driver)


def garch_variance_path(returns, params: GarchParams, init_var: float | None = None):
    """Conditional variance recursion sigma2[t] = omega + alpha*eps[t-1]^2 + beta*sigma2[t-1].

    eps[t] = r[t] - mu and sigma2[0] = init_var (the unconditional variance
    when not given). Each sigma2[t] depends only on returns before t.
    """
    returns = np.asarray(returns, dtype=float)
    if returns.size < 1:
        raise InsufficientDataError("need at least one observation for the variance recursion")
    if init_var is None:
        init_var = params.unconditional_variance
    if not init_var > 0:
        raise DomainError("initial variance must be positive")
    eps2 = (returns - params.mu) ** 2
    return _variance_recursion(eps2, params.omega, params.alpha, params.beta, init_var)


def garch_loglik(returns, params: GarchParams, init_var: float | None = None) -> float:
    """Gaussian log-likelihood of the returns under the variance recursion."""
    returns = np.asarray(returns, dtype=float)
    sigma2 = garch_variance_path(returns, params, init_var)
    eps2 = (returns - params.mu) ** 2
    return float(-0.5 * np.sum(np.log(2.0 * np.pi) + np.log(sigma2) + eps2 / sigma2))


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def fit_garch(train_returns) -> GarchParams:
    """Maximum-likelihood GARCH(1,1) fit with mu fixed at the sample mean.

    Maximizes the Gaussian log-likelihood with sigma2[0] set to the sample
    variance of the demeaned returns. Constraints (omega > 0, alpha, beta >= 0,
    alpha + beta < 1) are enforced by optimizing Nelder-Mead over
    (log omega, logit persistence, logit alpha-share).
    """
    returns = np.asarray(train_returns, dtype=float)
    if returns.size < MIN_GARCH_OBS:
        raise InsufficientDataError(
            f"GARCH fit needs >= {MIN_GARCH_OBS} observations, got {returns.size}"
        )
    mu = float(np.mean(returns))
    eps = returns - mu
    sample_var = float(np.var(eps))
    if sample_var <= 0:
        raise FitError("returns have zero variance; GARCH likelihood is degenerate")
    eps2 = eps * eps

    def negloglik(raw):
        log_omega, raw_p, raw_s = raw
        persistence = 1.0 / (1.0 + math.exp(-raw_p))
        share = 1.0 / (1.0 + math.exp(-raw_s))
        omega = math.exp(log_omega)
        alpha = persistence * share
        beta = persistence * (1.0 - share)
        sigma2 = _variance_recursion(eps2, omega, alpha, beta, sample_var)
        return 0.5 * np.sum(np.log(2.0 * np.pi) + np.log(sigma2) + eps2 / sigma2)

    alpha0, beta0 = 0.05, 0.90
    p0 = alpha0 + beta0
    x0 = np.array([math.log(0.05 * sample_var), _logit(p0), _logit(alpha0 / p0)])
    nll0 = negloglik(x0)
    result = minimize(
        negloglik,
        x0,
        method="Nelder-Mead",
        options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 5000, "maxfev": 8000},
    )
    if not np.isfinite(result.fun):
        raise FitError(f"GARCH likelihood diverged: {result.message}")
    if result.fun > nll0 + 1e-9:
        raise FitError(
            f"GARCH optimizer ended below the starting likelihood "
            f"({-result.fun:.3f} < {-nll0:.3f}): {result.message}"
        )
    log_omega, raw_p, raw_s = result.x
    persistence = 1.0 / (1.0 + math.exp(-raw_p))
    share = 1.0 / (1.0 + math.exp(-raw_s))
    return GarchParams(
        omega=math.exp(log_omega),
        alpha=persistence * share,
        beta=persistence * (1.0 - share),
        mu=mu,
    )


def garch_var(
    params: GarchParams,
    returns,
    theta: float,
    init_var: float | None = None,
) -> float:
    """One-step-ahead VaR: -(mu + sigma[t+1] * z_theta) given returns up to t.

    sigma[t+1] comes from running the variance recursion over the whole
    history. With the default init_var (the unconditional variance) the
    forecast depends only on the supplied history.
    """
    returns = np.asarray(returns, dtype=float)
    sigma2 = garch_variance_path(returns, params, init_var)
    eps_last = returns[-1] - params.mu
    next_var = params.omega + params.alpha * eps_last**2 + params.beta * sigma2[-1]
    z = gaussian_quantile(theta)
    return float(-(params.mu + math.sqrt(next_var) * z))


def garch_var_path(
    params: GarchParams,
    returns,
    start: int,
    theta: float,
    init_var: float | None = None,
):
    """VaR forecasts for days start..len(returns)-1, each using history < day.

    Equivalent to calling garch_var(params, returns[:t], theta) for each t,
    but runs the recursion once.
    """
    returns = np.asarray(returns, dtype=float)
    if not 0 < start <= returns.size:
        raise DomainError(f"start index {start} outside (0, {returns.size}]")
    sigma2 = garch_variance_path(returns, params, init_var)
    eps2 = (returns - params.mu) ** 2
    # variance for day t is built from eps[t-1] and sigma2[t-1]
    idx = np.arange(start - 1, returns.size - 1)
    sigma_next = np.sqrt(params.omega + params.alpha * eps2[idx] + params.beta * sigma2[idx])
    z = gaussian_quantile(theta)
    return -(params.mu + sigma_next * z)


# ---------------------------------------------------------------------------
# linear quantile autoregression
# ---------------------------------------------------------------------------

MIN_QR_OBS = 50
QR_LAGS = 4


@dataclass(frozen=True)
class QrCoefficients:
    """Linear quantile autoregression coefficients; lag_weights[0] is the most recent lag."""

    intercept: float
    lag_weights: np.ndarray
    theta: float

    def __post_init__(self):
        weights = np.asarray(self.lag_weights, dtype=float)
        object.__setattr__(self, "lag_weights", weights)
        if weights.ndim != 1:
            raise DomainError("lag weights must be a flat vector")
        if not 0.0 < self.theta < 1.0:
            raise DomainError("quantile level must lie strictly inside (0, 1)")


def smoothed_pinball(u, theta: float, kappa: float):
    """Pinball loss with a quadratic patch of half-width kappa around the kink."""
    u = np.asarray(u, dtype=float)
    return np.where(
        u >= kappa,
        theta * u,
        np.where(
            u <= -kappa,
            (theta - 1.0) * u,
            u * u / (4.0 * kappa) + (theta - 0.5) * u + kappa / 4.0,
        ),
    )


def _smoothed_psi(u, theta: float, kappa: float):
    # derivative of smoothed_pinball with respect to u
    return np.clip(u / (2.0 * kappa) + (theta - 0.5), theta - 1.0, theta)


def _lag_matrix(returns: np.ndarray, lags: int):
    # row t: [r[t-1], r[t-2], ..., r[t-lags]] for t = lags .. len-1
    n = returns.size - lags
    cols = [returns[lags - 1 - j : lags - 1 - j + n] for j in range(lags)]
    return np.column_stack(cols), returns[lags:]


def fit_linear_qr(
    train_returns,
    theta: float,
    lags: int = QR_LAGS,
    kappa: float = 1e-6,
    max_iter: int = 20000,
) -> QrCoefficients:
    """Fit r_t ~ [1, r_{t-1..t-lags}] by minimizing the mean smoothed pinball loss.

    Full-batch gradient descent with a doubling/halving step search on
    internally standardized regressors. Convergence is validated through the
    quantile first-order condition: the fraction of training rows strictly
    below the fitted quantile must sit within (lags + 2) / n of theta (up to
    ties sitting exactly on the fit). Raises FitError otherwise.
    """
    if not 0.0 < theta < 1.0:
        raise DomainError("quantile level must lie strictly inside (0, 1)")
    returns = np.asarray(train_returns, dtype=float)
    if returns.size < MIN_QR_OBS:
        raise InsufficientDataError(
            f"linear quantile regression needs >= {MIN_QR_OBS} observations, got {returns.size}"
        )
    lag_cols, y = _lag_matrix(returns, lags)
    n = y.size

    # standardize lag columns so the descent geometry is scale-free
    col_mean = lag_cols.mean(axis=0)
    col_std = lag_cols.std(axis=0)
    col_std[col_std == 0] = 1.0
    X = np.column_stack([np.ones(n), (lag_cols - col_mean) / col_std])

    def objective(b):
        return float(np.mean(smoothed_pinball(y - X @ b, theta, kappa)))

    # first-order condition of the quantile fit, up to ties sitting on it
    tie_tol = 1e-9 * max(1.0, float(np.max(np.abs(y))))
    band = (lags + 2) / n

    def band_ok(b) -> bool:
        residual = y - X @ b
        strict_below = float(np.mean(residual < -tie_tol))
        below_or_tied = float(np.mean(residual <= tie_tol))
        return strict_below <= theta + band and below_or_tied >= theta - band

    beta = np.zeros(lags + 1)
    beta[0] = constant_quantile(y, theta)
    f = objective(beta)
    step = 1.0
    check_every = 25
    f_checkpoint = f
    for it in range(max_iter):
        u = y - X @ beta
        grad = -(X.T @ _smoothed_psi(u, theta, kappa)) / n
        gnorm2 = float(grad @ grad)
        if gnorm2 == 0.0:
            break
        step *= 2.0
        while True:
            cand = beta - step * grad
            f_cand = objective(cand)
            if f_cand < f - 1e-4 * step * gnorm2:
                break
            step *= 0.5
            if step < 1e-18:
                break
        if step < 1e-18:
            break
        beta, f = cand, f_cand
        if (it + 1) % check_every == 0:
            plateaued = f_checkpoint - f <= check_every * 1e-10 * max(1.0, abs(f))
            if plateaued and band_ok(beta):
                break
            f_checkpoint = f

    if not band_ok(beta):
        residual = y - X @ beta
        raise FitError(
            f"quantile regression did not converge: below-fraction "
            f"{float(np.mean(residual < -tie_tol)):.5f} outside {theta} +- {band:.5f}"
        )

    # undo the internal standardization
    weights = beta[1:] / col_std
    intercept = float(beta[0] - np.dot(weights, col_mean))
    return QrCoefficients(intercept=intercept, lag_weights=weights, theta=theta)


def linear_qr_predict(coeffs: QrCoefficients, recent_returns) -> float:
    """Quantile forecast from the most recent `lags` returns (most recent first)."""
    recent = np.asarray(recent_returns, dtype=float)
    if recent.shape != coeffs.lag_weights.shape:
        raise ShapeError(
            f"expected {coeffs.lag_weights.size} lagged returns, got {recent.size}"
        )
    return float(coeffs.intercept + np.dot(coeffs.lag_weights, recent))


def linear_qr_var(coeffs: QrCoefficients, recent_returns) -> float:
    """VaR forecast: the negated quantile prediction."""
    return -linear_qr_predict(coeffs, recent_returns)


def linear_qr_var_path(coeffs: QrCoefficients, returns, start: int):
    """VaR forecasts for days start..len(returns)-1 using each day's preceding lags."""
    returns = np.asarray(returns, dtype=float)
    lags = coeffs.lag_weights.size
    if start < lags:
        raise DomainError(f"need {lags} observations before the first forecast day")
    rows = np.arange(start, returns.size)
    lag_block = np.column_stack([returns[rows - 1 - j] for j in range(lags)])
    return -(coeffs.intercept + lag_block @ coeffs.lag_weights)
