"""Posterior products: summary tables, contribution shares, sampling-sd
posteriors, district aggregates with benchmarking ratios, and GeoJSON
annotation for choropleth maps."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import diagnostics
from .hmc import PosteriorDraws

DEFAULT_QUANTILES = (0.025, 0.15, 0.16, 0.5, 0.84, 0.85, 0.975)

# Contribution-share property names used on map output for the paper-style
# three dimensions; other K fall back to generic labels.
DIMENSION_LABELS = {3: ("MD", "SD", "HC")}


@dataclass
class AreaEstimate:
    area_id: str
    mean: float
    sd: float
    quantiles: dict[float, float]
    n_eff: float
    rhat: float


@dataclass
class ContributionEstimate:
    area_id: str
    shares: np.ndarray           # (K,) means
    share_se: np.ndarray         # (K,)
    share_intervals: np.ndarray  # (K, 2) 2.5% and 97.5%


@dataclass
class DistrictEstimate:
    district_id: str
    estimate: float
    se: float
    intervals: dict[float, float]
    bm_ratio: float
    direct: float


def _summary_from_chains(chains: np.ndarray, probs) -> tuple[float, float, dict, float, float]:
    flat = chains.ravel()
    quantiles = {p: float(np.quantile(flat, p)) for p in probs}  # type-7 interpolation
    try:
        n_eff = diagnostics.ess(chains)
        r_hat = diagnostics.rhat(chains)
    except ValueError:  # too few chains or draws for the diagnostics
        n_eff, r_hat = np.nan, np.nan
    return (float(flat.mean()), float(flat.std(ddof=1)), quantiles, n_eff, r_hat)


def summarize(
    draws: PosteriorDraws,
    transform=None,
    names: list[str] | None = None,
    quantiles=DEFAULT_QUANTILES,
) -> list[AreaEstimate]:
    """Per-parameter posterior summaries, computed after transforming draws.

    The transform is applied draw by draw (never to the mean), so
    summaries of nonlinear transforms are exact posterior summaries.
    """
    if names is None:
        names = draws.parameter_names
        indices = range(draws.dim)
    else:
        indices = [draws.parameter_names.index(n) for n in names]
    out = []
    for name, j in zip(names, indices):
        chains = draws.column(j)
        if transform is not None:
            chains = transform(chains)
        mean, sd, qs, n_eff, r = _summary_from_chains(chains, quantiles)
        out.append(AreaEstimate(name, mean, sd, qs, n_eff, r))
    return out


def summarize_chains(
    chains: np.ndarray, area_id: str = "", quantiles=DEFAULT_QUANTILES
) -> AreaEstimate:
    """Summary of one derived quantity given as a (chains, draws) array."""
    mean, sd, qs, n_eff, r = _summary_from_chains(np.atleast_2d(chains), quantiles)
    return AreaEstimate(area_id, mean, sd, qs, n_eff, r)


def contribution_draws(theta_draws: np.ndarray) -> np.ndarray:
    """Per-draw contribution shares theta_k / sum_k theta_k.

    ``theta_draws`` is (draws, areas, K) with strictly positive entries;
    shares are scale-invariant per draw and sum to one.
    """
    theta = np.asarray(theta_draws, dtype=float)
    if theta.ndim != 3:
        raise ValueError("theta draws must be (draws, areas, K)")
    if np.any(theta <= 0.0) or not np.all(np.isfinite(theta)):
        raise ValueError("invalid theta draw: entries must be finite and positive")
    return theta / theta.sum(axis=2, keepdims=True)


def contributions(theta_draws: np.ndarray, area_ids=None) -> list[ContributionEstimate]:
    """Posterior contribution shares per area with 95% intervals."""
    eta = contribution_draws(theta_draws)
    n_draws, m, k = eta.shape
    if area_ids is None:
        area_ids = [str(i) for i in range(m)]
    out = []
    for i in range(m):
        shares = eta[:, i, :]
        out.append(
            ContributionEstimate(
                area_id=area_ids[i],
                shares=shares.mean(axis=0),
                share_se=shares.std(axis=0, ddof=1),
                share_intervals=np.column_stack(
                    [np.quantile(shares, 0.025, axis=0), np.quantile(shares, 0.975, axis=0)]
                ),
            )
        )
    return out


def sampling_sd_posterior(fit, n_adjusted, deff=None, quantiles=DEFAULT_QUANTILES) -> list[AreaEstimate]:
    """Posterior of the sampling standard deviation sqrt(rate*(1-rate)*DEFF/n_adj).

    Only meaningful for the random-sampling-variance family; other fits
    are rejected.
    """
    if fit.spec.family != "NL_RS":
        raise ValueError(f"sampling-sd posterior requires an NL_RS fit, got {fit.spec.family}")
    n_adjusted = np.asarray(n_adjusted, dtype=float)
    if deff is None:
        deff = fit.data.deff
    area_ids = fit.data.area_ids or [str(i) for i in range(fit.data.m)]
    rate = expit(fit.draws.draws[:, :, fit.model.rate_slice])
    out = []
    for i, aid in enumerate(area_ids):
        sd_chains = np.sqrt(rate[:, :, i] * (1.0 - rate[:, :, i]) * deff / n_adjusted[i])
        out.append(summarize_chains(sd_chains, aid, quantiles))
    return out


def district_aggregate(
    area_draws: np.ndarray,
    populations,
    district_map: dict[str, str],
    district_direct: dict[str, float],
    area_ids=None,
    quantiles=(0.025, 0.16, 0.84, 0.975),
) -> list[DistrictEstimate]:
    """Population-weighted district rates per draw, with benchmarking ratios.

    ``area_draws`` is (chains, draws, areas) or (draws, areas) of area
    rates; the benchmarking ratio is the posterior mean divided by the
    district's direct estimate (report-only, draws are not adjusted).
    """
    draws = np.asarray(area_draws, dtype=float)
    if draws.ndim == 2:
        draws = draws[None, :, :]
    m = draws.shape[2]
    if area_ids is None:
        area_ids = [str(i) for i in range(m)]
    populations = {aid: float(populations[aid]) for aid in area_ids}
    for aid in area_ids:
        if populations[aid] <= 0:
            raise ValueError(f"area {aid}: missing or nonpositive population")
        if aid not in district_map:
            raise ValueError(f"area {aid}: no district mapping")

    out = []
    for district in sorted(set(district_map[a] for a in area_ids)):
        member_idx = [i for i, a in enumerate(area_ids) if district_map[a] == district]
        weights = np.array([populations[area_ids[i]] for i in member_idx])
        weights = weights / weights.sum()
        district_chains = np.tensordot(draws[:, :, member_idx], weights, axes=(2, 0))
        mean = float(district_chains.mean())
        direct = float(district_direct[district])
        out.append(
            DistrictEstimate(
                district_id=district,
                estimate=mean,
                se=float(district_chains.ravel().std(ddof=1)),
                intervals={p: float(np.quantile(district_chains, p)) for p in quantiles},
                bm_ratio=mean / direct,
                direct=direct,
            )
        )
    return out


def dimension_labels(k: int) -> list[str]:
    return list(DIMENSION_LABELS.get(k, tuple(f"DIM{j + 1}" for j in range(k))))


def emit_geojson(
    estimates: list[AreaEstimate],
    feature_collection: dict,
    contribution_estimates: list[ContributionEstimate] | None = None,
) -> dict:
    """Annotate a GeoJSON feature collection with estimates per area.

    Features are matched on their ``area_id`` property (falling back to the
    feature ``id``); unmatched features pass through with null-valued
    properties.  Geometry is never touched.
    """
    if (
        not isinstance(feature_collection, dict)
        or feature_collection.get("type") != "FeatureCollection"
        or not isinstance(feature_collection.get("features"), list)
    ):
        raise ValueError("malformed feature collection")

    by_area = {e.area_id: e for e in estimates}
    contrib_by_area = {c.area_id: c for c in (contribution_estimates or [])}
    k = len(next(iter(contrib_by_area.values())).shares) if contrib_by_area else 0
    labels = dimension_labels(k)

    out = copy.deepcopy(feature_collection)
    for feature in out["features"]:
        if not isinstance(feature, dict) or "geometry" not in feature:
            raise ValueError("malformed feature collection")
        props = feature.setdefault("properties", {}) or {}
        area_id = props.get("area_id", feature.get("id"))
        est = by_area.get(area_id)
        props.update(
            {
                "estimate": None if est is None else est.mean,
                "se": None if est is None else est.sd,
                "ci_low": None if est is None else est.quantiles.get(0.025),
                "ci_high": None if est is None else est.quantiles.get(0.975),
            }
        )
        contrib = contrib_by_area.get(area_id)
        for j, label in enumerate(labels):
            props[f"{label}_C"] = None if contrib is None else float(contrib.shares[j])
        feature["properties"] = props
    return out
