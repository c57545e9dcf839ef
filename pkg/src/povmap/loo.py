"""Pareto-smoothed importance sampling leave-one-out cross-validation.

Per-observation expected log predictive densities with Pareto shape
diagnostics, and pairwise model comparison on elpd differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

# Observations whose fitted tail shape exceeds this are flagged unreliable.
PARETO_K_WARN = 0.7


@dataclass
class LooResult:
    elpd_loo: float
    se_elpd: float
    pointwise_elpd: np.ndarray
    pareto_k: np.ndarray

    @property
    def n_obs(self) -> int:
        return len(self.pointwise_elpd)

    def high_k_observations(self, threshold: float = PARETO_K_WARN) -> np.ndarray:
        return np.flatnonzero(self.pareto_k > threshold)


@dataclass
class CompareRow:
    model_name: str
    elpd_diff: float
    se_diff: float


def fit_generalized_pareto(exceedances: np.ndarray) -> tuple[float, float]:
    """Shape and scale of a generalized Pareto fit to sorted exceedances.

    Profile posterior over the reparameterized scale (Zhang-Stephens),
    with the usual weak prior pulling the shape toward 1/2:
    ``k <- (n*k + 5) / (n + 10)``.
    """
    x = np.asarray(exceedances, dtype=float)
    n = len(x)
    if n < 5 or x[-1] <= 0:
        return np.inf, np.nan
    prior_bs, prior_k = 3.0, 10.0
    m_grid = 30 + int(np.sqrt(n))

    b = 1.0 - np.sqrt(m_grid / (np.arange(1, m_grid + 1) - 0.5))
    b /= prior_bs * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]

    k_grid = np.mean(np.log1p(-b[:, None] * x), axis=1)
    log_lik = n * (np.log(-b / k_grid) - k_grid - 1.0)
    with np.errstate(over="ignore"):
        weights = 1.0 / np.exp(log_lik - log_lik[:, None]).sum(axis=1)
    usable = weights >= 10.0 * np.finfo(float).eps
    if not np.all(usable):
        weights = weights[usable]
        b = b[usable]
    weights /= weights.sum()

    b_post = float(b @ weights)
    k_post = float(np.mean(np.log1p(-b_post * x)))
    sigma = -k_post / b_post
    k_post = (n * k_post + prior_k * 0.5) / (n + prior_k)
    return k_post, sigma


def _gpd_quantile(probs: np.ndarray, k: float, sigma: float) -> np.ndarray:
    if abs(k) < np.finfo(float).eps:
        return sigma * (-np.log1p(-probs))
    return sigma * np.expm1(-k * np.log1p(-probs)) / k


def psis_smooth(log_ratios: np.ndarray) -> tuple[np.ndarray, float]:
    """Pareto-smooth one observation's importance ratios.

    The largest ``M = ceil(min(0.2 R, 3 sqrt(R)))`` ratios are replaced by
    expected order statistics of a generalized Pareto distribution fitted
    to their exceedances, truncated at the raw maximum.  Returns the
    normalized weights (a probability vector) and the fitted tail shape.
    Constant ratios are left untouched with a shape of 0.
    """
    lr = np.asarray(log_ratios, dtype=float)
    n = len(lr)
    if n < 50:
        raise ValueError("PSIS needs at least 50 draws per observation")
    shifted = lr - lr.max()

    if np.ptp(shifted) == 0.0:
        return np.full(n, 1.0 / n), 0.0

    m_tail = int(np.ceil(min(0.2 * n, 3.0 * np.sqrt(n))))
    order = np.argsort(shifted)
    cutoff = shifted[order[-m_tail - 1]]
    tail_ids = shifted > max(cutoff, np.log(np.finfo(float).tiny))
    x_tail = shifted[tail_ids]

    smoothed = shifted.copy()
    k_hat = 0.0
    if len(x_tail) >= 5 and np.ptp(x_tail) > 0.0:
        tail_order = np.argsort(x_tail)
        exceedances = np.exp(x_tail[tail_order]) - np.exp(cutoff)
        k_hat, sigma = fit_generalized_pareto(exceedances)
        if np.isfinite(k_hat):
            n_tail = len(x_tail)
            quantiles = _gpd_quantile((np.arange(n_tail) + 0.5) / n_tail, k_hat, sigma)
            replacement = np.log(quantiles + np.exp(cutoff))
            smoothed_tail = np.empty(n_tail)
            smoothed_tail[tail_order] = replacement
            smoothed[tail_ids] = np.minimum(smoothed_tail, 0.0)  # cap at raw max

    log_weights = smoothed - logsumexp(smoothed)
    return np.exp(log_weights), float(k_hat)


def elpd_loo(pointwise_loglik: np.ndarray) -> LooResult:
    """PSIS-LOO elpd from an (R draws, m observations) log-likelihood matrix."""
    ll = np.asarray(pointwise_loglik, dtype=float)
    if ll.ndim != 2:
        raise ValueError("pointwise log likelihood must be (draws, observations)")
    if not np.all(np.isfinite(ll)):
        raise ValueError("non-finite log-likelihood entries")
    r, m = ll.shape
    pointwise = np.empty(m)
    pareto_k = np.empty(m)
    for i in range(m):
        weights, k_hat = psis_smooth(-ll[:, i])
        pareto_k[i] = k_hat
        with np.errstate(divide="ignore"):
            pointwise[i] = logsumexp(ll[:, i] + np.log(weights))
    se = float(np.sqrt(m * np.var(pointwise, ddof=1))) if m > 1 else 0.0
    return LooResult(float(pointwise.sum()), se, pointwise, pareto_k)


def in_sample_lppd(pointwise_loglik: np.ndarray) -> float:
    """Log pointwise predictive density of the training data."""
    ll = np.asarray(pointwise_loglik, dtype=float)
    return float(np.sum(logsumexp(ll, axis=0) - np.log(len(ll))))


def compare(loo_results: dict[str, LooResult]) -> list[CompareRow]:
    """Rank models by elpd; differences and their SEs are against the best.

    The best model's row carries ``elpd_diff = se_diff = 0``; other rows
    have ``elpd_diff <= 0`` and an SE from the pointwise elpd differences.
    """
    if len(loo_results) < 2:
        raise ValueError("need at least two models to compare")
    sizes = {res.n_obs for res in loo_results.values()}
    if len(sizes) != 1:
        raise ValueError("models were evaluated on different observation sets")
    m = sizes.pop()

    ranked = sorted(loo_results.items(), key=lambda kv: (-kv[1].elpd_loo, kv[0]))
    best_name, best = ranked[0]
    rows = [CompareRow(best_name, 0.0, 0.0)]
    for name, res in ranked[1:]:
        diff = res.pointwise_elpd - best.pointwise_elpd
        se = float(np.sqrt(m * np.var(diff, ddof=1))) if m > 1 else 0.0
        rows.append(CompareRow(name, float(diff.sum()), se))
    return rows
