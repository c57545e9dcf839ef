"""Convergence and efficiency diagnostics for MCMC chains.

Split potential scale reduction, autocorrelation-based effective sample
size with Geyer's initial-positive-sequence truncation, and Monte Carlo
standard errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Warning gate used by the fit pipeline.
RHAT_WARN = 1.05

# Antithetic chains can beat one-per-draw efficiency; cap the reported
# ESS at twice the number of draws.
ESS_CAP_FACTOR = 2.0


@dataclass
class DiagnosticsReport:
    parameter_names: list[str]
    rhat: np.ndarray
    ess: np.ndarray
    mcse: np.ndarray

    def worst_rhat(self) -> float:
        finite = self.rhat[np.isfinite(self.rhat)]
        return float(finite.max()) if finite.size else np.inf


def _split_chains(chains: np.ndarray) -> np.ndarray:
    c, n = chains.shape
    half = n // 2
    return np.vstack([chains[:, :half], chains[:, half: 2 * half]])


def rhat(chains_of_values) -> float:
    """Split-chain potential scale reduction factor.

    Each chain is halved; the statistic compares between- and within-chain
    variances of the split halves.  Returns ``inf`` when the within-chain
    variance is zero (degenerate draws).
    """
    chains = np.atleast_2d(np.asarray(chains_of_values, dtype=float))
    if chains.shape[0] < 2 or chains.shape[1] < 4:
        raise ValueError("need at least 2 chains of at least 4 draws")
    split = _split_chains(chains)
    n = split.shape[1]
    chain_means = split.mean(axis=1)
    within = split.var(axis=1, ddof=1).mean()
    between = n * chain_means.var(ddof=1)
    if within == 0.0:
        return np.inf
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance at all lags via FFT, matching the 1/n convention."""
    n = len(x)
    x = x - x.mean()
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    freq = np.fft.rfft(x, size)
    acov = np.fft.irfft(freq * np.conj(freq), size)[:n].real
    return acov / n


def ess(chains_of_values) -> float:
    """Effective sample size from pairwise-summed autocorrelations.

    Combines chains the way Stan does: lag correlations are computed
    against the pooled variance (within plus between), summed in Geyer
    pairs until the first negative pair, with the initial monotone
    adjustment.  Returns ``nan`` for degenerate (constant) draws.
    """
    chains = np.atleast_2d(np.asarray(chains_of_values, dtype=float))
    c, n = chains.shape
    if c < 2 or n < 4:
        raise ValueError("need at least 2 chains of at least 4 draws")
    acov = np.array([_autocovariance(chains[i]) for i in range(c)])
    mean_var = acov[:, 0].mean() * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if c > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)
    if var_plus == 0.0 or mean_var == 0.0:
        return np.nan

    rho = np.zeros(n)
    rho[0] = 1.0
    rho[1] = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho_even, rho_odd = 1.0, rho[1]
    t = 1
    while t < n - 2 and (rho_even + rho_odd) >= 0.0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        rho[t + 1] = rho_even
        if rho_even + rho_odd >= 0.0:
            rho[t + 2] = rho_odd
        t += 2
    max_t = t

    # initial monotone adjustment on the pair sums
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2

    tau = -1.0 + 2.0 * rho[:max_t].sum() + rho[max_t + 1: max_t + 2].sum()
    tau = max(tau, 1e-12)
    total = c * n
    return float(min(total / tau, ESS_CAP_FACTOR * total))


def mcse(chains_of_values) -> float:
    """Monte Carlo standard error of the mean: sd / sqrt(ess)."""
    chains = np.atleast_2d(np.asarray(chains_of_values, dtype=float))
    n_eff = ess(chains)
    if not np.isfinite(n_eff):
        return np.nan
    return float(chains.ravel().std(ddof=1) / np.sqrt(n_eff))


def diagnose(values: np.ndarray, parameter_names=None) -> DiagnosticsReport:
    """Per-parameter diagnostics for draws shaped (chains, draws, params)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[:, :, None]
    c, n, d = values.shape
    if parameter_names is None:
        parameter_names = [f"p{j}" for j in range(d)]
    rhats = np.empty(d)
    esses = np.empty(d)
    mcses = np.empty(d)
    for j in range(d):
        chains = values[:, :, j]
        rhats[j] = rhat(chains)
        esses[j] = ess(chains)
        sd = chains.ravel().std(ddof=1)
        mcses[j] = sd / np.sqrt(esses[j]) if np.isfinite(esses[j]) else np.nan
    return DiagnosticsReport(list(parameter_names), rhats, esses, mcses)
