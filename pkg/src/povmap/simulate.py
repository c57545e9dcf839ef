"""Synthetic stratified two-stage survey generator with known ground truth.

Builds person-level datasets that mimic the production survey design:
areas hold a frame of PSUs, PSUs are drawn with probability proportional
to size (with replacement), households are subsampled within drawn PSUs,
and every household member shares the household poverty status.  Weights
are exact inverse inclusion probabilities of this design, so direct
estimators are design-unbiased for the recorded truth.

Intra-PSU correlation is induced by a symmetric two-point logit shift:
each frame PSU leans ``+delta`` or ``-delta`` on the logit scale, with
the area-level base solved so the household-level marginal equals the
area's true rate exactly and the between-PSU share of the Bernoulli
variance equals ``intra_psu_corr``.

Poor persons' dimensional scores use a mean-calibrated logit-normal: the
score is ``expit(b + eps)`` with ``eps ~ N(0, score_noise_sd^2)`` and
``b`` solved by Gauss-Hermite quadrature so the expected score equals
the area's true dimensional mean exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .models import build_correlation
from .records import AreaRecord, PersonRecord

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(41)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


@dataclass(frozen=True)
class SimConfig:
    m_areas: int = 26
    K: int = 3
    true_gamma: tuple[float, ...] = (0.3, -0.5, 0.4)
    true_beta: tuple[float, ...] = (-0.8, 0.3, -0.2)
    true_sigma_v: float = 0.5
    true_sigma: float = 0.4
    true_rho: tuple[float, ...] = (0.5, 0.5, 0.5)
    households_per_area: tuple[int, int] = (2, 50)
    household_size_dist: tuple[float, ...] = (0.2, 0.3, 0.2, 0.15, 0.1, 0.03, 0.015, 0.005)
    psus_per_area: int = 5
    intra_psu_corr: float = 0.15
    covariate_dist: tuple[tuple[float, float], ...] = ((0.0, 1.0), (0.0, 1.0))
    frame_psus: int = 40
    frame_psu_households: tuple[int, int] = (20, 80)
    score_noise_sd: float = 0.8
    n_districts: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.m_areas < 1 or self.psus_per_area < 1 or self.frame_psus < 1:
            raise ValueError("counts must be positive")
        if len(self.true_gamma) != len(self.covariate_dist) + 1:
            raise ValueError("true_gamma must cover the intercept plus each covariate")
        if len(self.true_beta) != len(self.covariate_dist) + 1:
            raise ValueError("true_beta must cover the intercept plus each covariate")
        if self.K > 1:
            if len(self.true_rho) != self.K * (self.K - 1) // 2:
                raise ValueError("true_rho must have K(K-1)/2 entries")
            _, is_pd = build_correlation(np.asarray(self.true_rho, dtype=float))
            if not is_pd:
                raise ValueError(
                    "infeasible config: correlation matrix is not positive definite"
                )
        if not 0.0 <= self.intra_psu_corr < 1.0:
            raise ValueError("intra_psu_corr must lie in [0, 1)")
        if abs(sum(self.household_size_dist) - 1.0) > 1e-9:
            raise ValueError("household_size_dist must sum to 1")


@dataclass
class SimOutput:
    persons: list[PersonRecord]
    areas: list[AreaRecord]
    truth: dict

    @property
    def K(self) -> int:
        return len(self.persons[0].scores)


def _solve_tilt(rate: float, icc: float) -> tuple[float, float]:
    """Base and shift of the two-point PSU tilt for a given marginal and ICC.

    The leaning cluster rates are ``rate +- tau`` with
    ``tau = sqrt(icc * rate * (1-rate))``, so the logit base and shift come
    in closed form from the logits of those two rates.  Rates too extreme
    to support the requested between-cluster variance share get the
    largest feasible shift instead (a two-point mixture cannot exceed an
    ICC of ``min(rate, 1-rate) / max(rate, 1-rate)``).
    """
    if icc == 0.0:
        return float(logit(rate)), 0.0
    tau = float(np.sqrt(icc * rate * (1.0 - rate)))
    tau = min(tau, 0.95 * min(rate, 1.0 - rate))
    hi, lo = float(logit(rate + tau)), float(logit(rate - tau))
    return 0.5 * (hi + lo), 0.5 * (hi - lo)


def _calibrated_score_loc(theta: float, noise_sd: float) -> float:
    """Location b with E[expit(b + noise_sd * Z)] = theta, Z standard normal."""
    if noise_sd == 0.0:
        return float(logit(theta))
    lo, hi = -60.0, 60.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if float(_GH_WEIGHTS @ expit(mid + noise_sd * _GH_NODES)) < theta:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate(config: SimConfig) -> SimOutput:
    """One synthetic dataset plus its ground-truth record."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=config.seed)))
    m, K = config.m_areas, config.K

    # area covariates and true rates
    cov_names = [f"x{j + 1}" for j in range(len(config.covariate_dist))]
    x = np.column_stack(
        [rng.normal(mu, sd, m) for mu, sd in config.covariate_dist]
    ) if config.covariate_dist else np.empty((m, 0))
    X = np.column_stack([np.ones(m), x])
    gamma = np.asarray(config.true_gamma, dtype=float)
    link_noise = rng.normal(0.0, config.true_sigma_v, m) if config.true_sigma_v > 0 else np.zeros(m)
    pi = expit(X @ gamma + link_noise)

    # true dimensional scores from the multivariate linking model
    beta = np.asarray(config.true_beta, dtype=float)
    if K > 1:
        R, is_pd = build_correlation(np.asarray(config.true_rho, dtype=float))
        if not is_pd:
            raise ValueError("infeasible config: correlation matrix is not positive definite")
    else:
        R = np.eye(1)
    A = config.true_sigma**2 * R
    lam = (X @ beta)[:, None] + rng.multivariate_normal(np.zeros(K), A, size=m, method="cholesky")
    theta = expit(lam)
    eta = theta / theta.sum(axis=1, keepdims=True)

    size_values = np.arange(1, len(config.household_size_dist) + 1)
    mean_size = float(size_values @ np.asarray(config.household_size_dist))

    persons: list[PersonRecord] = []
    areas: list[AreaRecord] = []
    populations = np.empty(m)
    block = int(np.ceil(m / config.n_districts))

    for i in range(m):
        area_id = f"area{i + 1:02d}"
        base, delta = _solve_tilt(float(pi[i]), config.intra_psu_corr)
        score_locs = [
            _calibrated_score_loc(float(theta[i, k]), config.score_noise_sd) for k in range(K)
        ]

        frame_sizes = rng.integers(
            config.frame_psu_households[0], config.frame_psu_households[1] + 1, config.frame_psus
        ).astype(float)
        frame_total = frame_sizes.sum()
        frame_tilt = rng.choice([-1.0, 1.0], size=config.frame_psus)
        populations[i] = frame_total * mean_size

        n_households = int(
            rng.integers(config.households_per_area[0], config.households_per_area[1] + 1)
        )
        n_draws = min(config.psus_per_area, n_households)
        takes = np.full(n_draws, n_households // n_draws)
        takes[: n_households % n_draws] += 1
        drawn = rng.choice(config.frame_psus, size=n_draws, p=frame_sizes / frame_total)

        for d, (psu_idx, take) in enumerate(zip(drawn, takes)):
            take = int(min(take, frame_sizes[psu_idx]))
            psu_id = f"{area_id}-psu{d + 1}"
            p_cluster = float(expit(base + frame_tilt[psu_idx] * delta))
            weight = frame_total / (n_draws * take)
            for h in range(take):
                hh_id = f"{psu_id}-hh{h + 1}"
                poor = int(rng.random() < p_cluster)
                size = int(rng.choice(size_values, p=config.household_size_dist))
                for j in range(size):
                    if poor:
                        noise = rng.normal(0.0, config.score_noise_sd, K)
                        scores = tuple(float(expit(score_locs[k] + noise[k])) for k in range(K))
                    else:
                        scores = tuple(0.0 for _ in range(K))
                    persons.append(
                        PersonRecord(
                            area_id=area_id,
                            psu_id=psu_id,
                            household_id=hh_id,
                            person_id=f"{hh_id}-p{j + 1}",
                            weight=float(weight),
                            poor=poor,
                            scores=scores,
                        )
                    )

        areas.append(
            AreaRecord(
                area_id=area_id,
                district_id=f"district{i // block + 1}",
                population=float(populations[i]),
                covariates=dict(zip(cov_names, x[i])),
            )
        )

    truth = {
        "area_ids": [a.area_id for a in areas],
        "gamma": gamma.tolist(),
        "beta": beta.tolist(),
        "sigma_v": config.true_sigma_v,
        "sigma": config.true_sigma,
        "rho": list(config.true_rho),
        "pi": pi.tolist(),
        "theta": theta.tolist(),
        "eta": eta.tolist(),
        "population": populations.tolist(),
        "overall_poverty": float(populations @ pi / populations.sum()),
    }
    return SimOutput(persons, areas, truth)
