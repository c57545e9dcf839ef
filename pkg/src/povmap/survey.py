"""Design-based estimation from person-level survey data.

Direct proportions with ultimate-cluster variances, adjusted sample
sizes, design effects, smoothed sampling variances, dimensional direct
estimates, and smoothed sampling covariance matrices.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import NamedTuple

import numpy as np

from .records import AreaDesignSummary, DesignEffects, PersonRecord, validate_persons

# Relative eigenvalue floor used when repairing an indefinite smoothed
# covariance matrix.
PD_EIGENVALUE_FLOOR = 1e-8


class DirectProportion(NamedTuple):
    z_direct: float
    z_direct_se: float
    single_psu: bool


def _ultimate_cluster_variance(values, weights, psu_ids):
    """Variance of the weighted ratio mean under with-replacement PSU sampling.

    Treats PSU totals as iid draws: with estimate ``R = sum(w*y)/sum(w)``
    and PSU totals ``(y_c, w_c)``,

        v(R) = n/(n-1) * sum_c ((y_c - R*w_c) / W)^2

    Returns ``(estimate, variance, n_psus)``; variance is 0.0 for a
    single PSU (degenerate, flagged by callers).
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    w_total = weights.sum()
    estimate = float(np.dot(weights, values) / w_total)

    order = OrderedDict()
    for pid in psu_ids:
        if pid not in order:
            order[pid] = len(order)
    idx = np.array([order[pid] for pid in psu_ids])
    n_psu = len(order)
    if n_psu < 2:
        return estimate, 0.0, n_psu

    num_totals = np.bincount(idx, weights=weights * values, minlength=n_psu)
    w_totals = np.bincount(idx, weights=weights, minlength=n_psu)
    resid = (num_totals - estimate * w_totals) / w_total
    variance = n_psu / (n_psu - 1) * float(np.dot(resid, resid))
    return estimate, variance, n_psu


def weighted_proportion(persons: list[PersonRecord]) -> DirectProportion:
    """Survey-weighted poverty proportion of any person set with its SE.

    The SE comes from the with-replacement ultimate-cluster estimator on
    PSU totals of the weighted ratio; a single PSU gives SE 0 and a
    degeneracy flag.  Used for pooled (district, province) estimates.
    """
    if not persons:
        raise ValueError("empty sample")
    z, var, n_psu = _ultimate_cluster_variance(
        [p.poor for p in persons],
        [p.weight for p in persons],
        [p.psu_id for p in persons],
    )
    return DirectProportion(z, float(np.sqrt(var)), n_psu < 2)


def direct_proportion(persons: list[PersonRecord]) -> DirectProportion:
    """Survey-weighted poverty proportion for one area with its design SE."""
    if not persons:
        raise ValueError("empty area sample")
    area_ids = {p.area_id for p in persons}
    if len(area_ids) != 1:
        raise ValueError(f"persons span multiple areas: {sorted(area_ids)}")
    return weighted_proportion(persons)


def adjusted_sample_size(household_sizes) -> float:
    """Adjusted person-level sample size (sum m)^2 / sum m^2.

    Corrects the household count for the person-level variance of a
    size-weighted mean of household statuses; equals the household count
    exactly when all sizes are equal, and is smaller otherwise.
    """
    m = np.asarray(list(household_sizes), dtype=float)
    if m.size == 0:
        raise ValueError("no households")
    if np.any(m < 1):
        raise ValueError("household sizes must be >= 1")
    return float(m.sum() ** 2 / np.dot(m, m))


def _household_sizes(persons: list[PersonRecord]) -> list[int]:
    counts: dict[tuple[str, str], int] = {}
    for p in persons:
        key = (p.area_id, p.household_id)
        counts[key] = counts.get(key, 0) + 1
    return list(counts.values())


def _select_variable(persons: list[PersonRecord], variable: str):
    """Resolve a variable selector to (sub-population, values).

    ``"poor"`` selects the binary status over the full sample; ``"score_k"``
    (1-based) and ``"score_k+score_l"`` select dimensional scores and their
    pairwise sums over poor respondents only.
    """
    if variable == "poor":
        return persons, np.array([float(p.poor) for p in persons])
    parts = variable.split("+")
    idx = []
    for part in parts:
        name = part.strip()
        if not name.startswith("score_"):
            raise ValueError(f"unknown variable selector: {variable!r}")
        idx.append(int(name[len("score_"):]) - 1)
    poor = [p for p in persons if p.poor == 1]
    values = np.array([sum(p.scores[i] for i in idx) for p in poor])
    return poor, values


def design_effect(persons: list[PersonRecord], variable: str = "poor") -> float:
    """Design effect of the overall weighted mean, from the entire dataset.

    DEFF = (ultimate-cluster variance of the weighted mean) divided by the
    variance under simple random sampling of the adjusted person count:
    ``p(1-p)/n_adj`` for the binary status, ``s^2/n_adj`` for scores with
    ``s^2`` the pooled (unweighted) variance over poor respondents.
    """
    subset, values = _select_variable(persons, variable)
    if variable != "poor" and len(subset) < 2:
        raise ValueError("fewer than 2 poor respondents")
    est, var_design, n_psu = _ultimate_cluster_variance(
        values, [p.weight for p in subset], [p.psu_id for p in subset]
    )
    if n_psu < 2:
        raise ValueError("design effect requires at least two PSUs")
    n_adj = adjusted_sample_size(_household_sizes(subset))
    if variable == "poor":
        var_unit = est * (1.0 - est)
    else:
        var_unit = float(np.var(values, ddof=1))
    if var_unit <= 0:
        raise ValueError(f"degenerate variable {variable!r}: zero SRS variance")
    return var_design / (var_unit / n_adj)


def smoothed_variance(n_adjusted: float, deff_poverty: float, pooled_p: float) -> float:
    """Smoothed sampling variance p(1-p) * DEFF / n_adjusted.

    Uses the pooled proportion for every area, so the product with the
    adjusted size is constant across areas.
    """
    if not (n_adjusted > 0 and deff_poverty > 0):
        raise ValueError("n_adjusted and deff must be positive")
    if not 0.0 < pooled_p < 1.0:
        raise ValueError("pooled proportion must lie strictly in (0, 1)")
    return pooled_p * (1.0 - pooled_p) * deff_poverty / n_adjusted


def dimensional_direct(persons: list[PersonRecord]) -> np.ndarray | None:
    """Survey-weighted mean score vector over one area's poor respondents.

    Returns ``None`` when the area has no poor respondents (the area is
    then handled by the linking model alone).
    """
    poor = [p for p in persons if p.poor == 1]
    if not poor:
        return None
    weights = np.array([p.weight for p in poor])
    scores = np.array([p.scores for p in poor], dtype=float)
    return weights @ scores / weights.sum()


def _pooled_variance(values: np.ndarray) -> float:
    # Unweighted pooled variance over poor respondents, 1/(P-1) denominator.
    return float(np.var(values, ddof=1))


def compute_design_effects(persons: list[PersonRecord]) -> DesignEffects:
    """Pooled quantities computed once from the full dataset and reused per area."""
    k = validate_persons(persons)
    poor = [p for p in persons if p.poor == 1]
    if len(poor) < 2:
        raise ValueError("insufficient data for pooling: fewer than 2 poor respondents")

    weights = np.array([p.weight for p in persons])
    status = np.array([float(p.poor) for p in persons])
    pooled_p = float(np.dot(weights, status) / weights.sum())

    scores = np.array([p.scores for p in poor], dtype=float)
    pooled_s = np.array([_pooled_variance(scores[:, j]) for j in range(k)])
    deff_dims = np.array([design_effect(persons, f"score_{j + 1}") for j in range(k)])

    pooled_s_pairs = np.zeros((k, k))
    deff_pairs = np.zeros((k, k))
    for a in range(k):
        pooled_s_pairs[a, a] = _pooled_variance(2.0 * scores[:, a])
        deff_pairs[a, a] = deff_dims[a]
        for b in range(a + 1, k):
            pooled_s_pairs[a, b] = pooled_s_pairs[b, a] = _pooled_variance(
                scores[:, a] + scores[:, b]
            )
            deff = design_effect(persons, f"score_{a + 1}+score_{b + 1}")
            deff_pairs[a, b] = deff_pairs[b, a] = deff

    return DesignEffects(
        deff_poverty=design_effect(persons, "poor"),
        pooled_p=pooled_p,
        deff_dims=deff_dims,
        pooled_s=pooled_s,
        pooled_s_pairs=pooled_s_pairs,
        deff_pairs=deff_pairs,
    )


def nearest_positive_definite(matrix: np.ndarray, rel_floor: float = PD_EIGENVALUE_FLOOR) -> np.ndarray:
    """Clip eigenvalues below ``rel_floor * max eigenvalue`` and re-symmetrize."""
    sym = 0.5 * (matrix + matrix.T)
    eigval, eigvec = np.linalg.eigh(sym)
    floor = rel_floor * eigval.max()
    if eigval.min() >= floor:
        return sym
    repaired = (eigvec * np.maximum(eigval, floor)) @ eigvec.T
    return 0.5 * (repaired + repaired.T)


def smoothed_covariance(
    all_poor: list[PersonRecord],
    n_adjusted: float,
    deff_dims: np.ndarray,
    deff_pairs: np.ndarray | None = None,
    pooled_s: np.ndarray | None = None,
    pooled_s_pairs: np.ndarray | None = None,
) -> np.ndarray:
    """Smoothed sampling covariance of an area's dimensional direct estimates.

    Diagonal entries are ``s_kk * DEFF_k / n_adjusted`` with ``s_kk`` the
    pooled variance over all poor respondents; covariances come from the
    identity ``cov(a, b) = (var(a+b) - var(a) - var(b)) / 2`` with the
    summed variable smoothed the same way.  The result is symmetrized and
    projected to the nearest positive-definite matrix when needed.

    Pooled variances and summed-variable design effects are recomputed
    from ``all_poor`` unless supplied (pass the ``DesignEffects`` fields
    to avoid recomputation across areas).
    """
    if len(all_poor) < 2:
        raise ValueError("insufficient data for pooling: fewer than 2 poor respondents")
    if not n_adjusted > 0:
        raise ValueError("n_adjusted must be positive")
    deff_dims = np.asarray(deff_dims, dtype=float)
    k = len(deff_dims)
    scores = np.array([p.scores for p in all_poor], dtype=float)

    if pooled_s is None:
        pooled_s = np.array([_pooled_variance(scores[:, j]) for j in range(k)])
    var_diag = pooled_s * deff_dims / n_adjusted

    sigma = np.diag(var_diag.copy())
    for a in range(k):
        for b in range(a + 1, k):
            if pooled_s_pairs is not None and deff_pairs is not None:
                s_sum = pooled_s_pairs[a, b]
                deff_sum = deff_pairs[a, b]
            else:
                s_sum = _pooled_variance(scores[:, a] + scores[:, b])
                if deff_pairs is not None:
                    deff_sum = deff_pairs[a, b]
                else:
                    deff_sum = design_effect(all_poor, f"score_{a + 1}+score_{b + 1}")
            var_sum = s_sum * deff_sum / n_adjusted
            cov = 0.5 * (var_sum - var_diag[a] - var_diag[b])
            sigma[a, b] = sigma[b, a] = cov

    return nearest_positive_definite(sigma)


def area_design_summary(
    persons: list[PersonRecord], area_id: str, deff: DesignEffects
) -> AreaDesignSummary:
    """Assemble the full per-area design summary from one area's sample."""
    area_persons = [p for p in persons if p.area_id == area_id]
    if not area_persons:
        raise ValueError("empty area sample")
    sizes = _household_sizes(area_persons)
    n_adj = adjusted_sample_size(sizes)
    direct = direct_proportion(area_persons)
    y = dimensional_direct(area_persons)
    sigma = None
    if y is not None:
        all_poor = [p for p in persons if p.poor == 1]
        sigma = smoothed_covariance(
            all_poor,
            n_adj,
            deff.deff_dims,
            deff_pairs=deff.deff_pairs,
            pooled_s=deff.pooled_s,
            pooled_s_pairs=deff.pooled_s_pairs,
        )
    return AreaDesignSummary(
        area_id=area_id,
        n_households=len(sizes),
        n_adjusted=n_adj,
        z_direct=direct.z_direct,
        z_direct_se=direct.z_direct_se,
        D_smoothed=smoothed_variance(n_adj, deff.deff_poverty, deff.pooled_p),
        single_psu=direct.single_psu,
        y_direct=y,
        sigma_hat=sigma,
    )


def design_summaries(persons: list[PersonRecord]) -> tuple[list[AreaDesignSummary], DesignEffects]:
    """Per-area design summaries for the whole dataset, in first-seen area order."""
    deff = compute_design_effects(persons)
    seen: list[str] = []
    for p in persons:
        if p.area_id not in seen:
            seen.append(p.area_id)
    return [area_design_summary(persons, a, deff) for a in seen], deff
