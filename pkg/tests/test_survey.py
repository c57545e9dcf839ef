"""Design-based estimation tests.

Expected values are frozen from independent oracles: exact enumeration
of the Bernoulli superpopulation, hand evaluation of the
ultimate-cluster variance formula, and spreadsheet-style evaluation of
the pooled-variance smoothing identities.
"""

import itertools

import numpy as np
import pytest

from povmap.records import DesignEffects, PersonRecord
from povmap.survey import (
    adjusted_sample_size,
    area_design_summary,
    compute_design_effects,
    design_effect,
    design_summaries,
    dimensional_direct,
    direct_proportion,
    nearest_positive_definite,
    smoothed_covariance,
    smoothed_variance,
)


def person(area="a1", psu="p1", hh="h1", pid="x", weight=1.0, poor=0, scores=()):
    return PersonRecord(area, psu, hh, pid, weight, poor, tuple(scores))


# ---------------------------------------------------------------------------
# direct_proportion
# ---------------------------------------------------------------------------


def test_direct_proportion_all_poor_any_weights():
    persons = [
        person(psu=f"p{i}", hh=f"h{i}", pid=str(i), weight=w, poor=1)
        for i, w in enumerate([0.5, 2.0, 3.7])
    ]
    est = direct_proportion(persons)
    assert est.z_direct == 1.0
    assert est.z_direct_se == 0.0


def test_direct_proportion_symmetric_pair():
    persons = [
        person(psu="p1", hh="h1", pid="1", poor=0),
        person(psu="p2", hh="h2", pid="2", poor=1),
    ]
    assert direct_proportion(persons).z_direct == 0.5


def test_direct_proportion_hand_computed_cluster_se():
    # 3 PSUs, weights {2,1,1}, statuses {1,1,0}: z = 3/4.  Ultimate-cluster
    # variance evaluated by hand: residuals (y_c - z*w_c)/W are
    # (2-1.5)/4, (1-0.75)/4, (0-0.75)/4; v = 3/2 * sum of squares.
    persons = [
        person(psu="p1", hh="h1", pid="1", weight=2.0, poor=1),
        person(psu="p2", hh="h2", pid="2", weight=1.0, poor=1),
        person(psu="p3", hh="h3", pid="3", weight=1.0, poor=0),
    ]
    est = direct_proportion(persons)
    assert est.z_direct == 0.75
    se_hand = np.sqrt(1.5 * ((0.5 / 4) ** 2 + (0.25 / 4) ** 2 + (0.75 / 4) ** 2))
    assert est.z_direct_se == pytest.approx(se_hand, abs=1e-15)
    assert not est.single_psu


def test_direct_proportion_single_psu_degenerate():
    persons = [
        person(psu="p1", hh="h1", pid="1", poor=1),
        person(psu="p1", hh="h2", pid="2", poor=0),
    ]
    est = direct_proportion(persons)
    assert est.z_direct == 0.5
    assert est.z_direct_se == 0.0
    assert est.single_psu


def test_direct_proportion_empty_area():
    with pytest.raises(ValueError, match="empty area sample"):
        direct_proportion([])


def test_direct_proportion_weight_rescaling_invariance():
    rng = np.random.default_rng(7)
    persons = [
        person(psu=f"p{i % 4}", hh=f"h{i}", pid=str(i), weight=w, poor=int(s))
        for i, (w, s) in enumerate(zip(rng.uniform(0.5, 3.0, 30), rng.integers(0, 2, 30)))
    ]
    scaled = [
        PersonRecord(p.area_id, p.psu_id, p.household_id, p.person_id, 17.3 * p.weight, p.poor, p.scores)
        for p in persons
    ]
    a, b = direct_proportion(persons), direct_proportion(scaled)
    assert a.z_direct == pytest.approx(b.z_direct, abs=1e-14)
    assert a.z_direct_se == pytest.approx(b.z_direct_se, abs=1e-14)


# ---------------------------------------------------------------------------
# adjusted_sample_size
# ---------------------------------------------------------------------------


def test_adjusted_size_equal_households():
    assert adjusted_sample_size([3, 3, 3]) == pytest.approx(3.0, abs=1e-15)


def test_adjusted_size_single_household():
    assert adjusted_sample_size([1]) == 1.0


def test_adjusted_size_hand_value():
    assert adjusted_sample_size([2, 2, 3]) == pytest.approx(49 / 17, abs=1e-15)


def _enumeration_adjusted_size(sizes, pi=0.3):
    """Oracle: exact variance of the size-weighted mean under iid
    Bernoulli(pi) household statuses, by enumerating all status vectors;
    the adjusted size is pi*(1-pi) over that variance."""
    sizes = np.asarray(sizes, dtype=float)
    total = sizes.sum()
    mean_sq = 0.0
    mean = 0.0
    for statuses in itertools.product([0.0, 1.0], repeat=len(sizes)):
        z = np.array(statuses)
        prob = np.prod(np.where(z == 1.0, pi, 1 - pi))
        value = float(sizes @ z / total)
        mean += prob * value
        mean_sq += prob * value**2
    variance = mean_sq - mean**2
    return pi * (1 - pi) / variance


@pytest.mark.parametrize("sizes", [[1, 2], [2, 2, 3], [1, 1, 5, 8], [4, 4, 4, 4], [1, 2, 3, 4, 5]])
def test_adjusted_size_matches_enumeration_oracle(sizes):
    assert adjusted_sample_size(sizes) == pytest.approx(_enumeration_adjusted_size(sizes), rel=1e-12)


def test_adjusted_size_never_exceeds_count():
    rng = np.random.default_rng(11)
    for _ in range(2000):
        n = int(rng.integers(1, 12))
        sizes = rng.integers(1, 9, size=n)
        n_adj = adjusted_sample_size(sizes)
        assert n_adj <= n + 1e-12
        if len(set(sizes.tolist())) == 1:
            assert n_adj == pytest.approx(n, abs=1e-12)
        elif len(set(sizes.tolist())) > 1:
            assert n_adj < n


def test_adjusted_size_empty():
    with pytest.raises(ValueError, match="no households"):
        adjusted_sample_size([])


# ---------------------------------------------------------------------------
# design_effect
# ---------------------------------------------------------------------------


def test_design_effect_srs_like_is_near_one():
    # Every person its own PSU and household with equal weights: the
    # cluster variance reduces to s^2/n, so DEFF = n/(n-1) exactly for a
    # binary variable.
    rng = np.random.default_rng(3)
    n = 400
    persons = [
        person(psu=f"p{i}", hh=f"h{i}", pid=str(i), poor=int(s))
        for i, s in enumerate(rng.integers(0, 2, n))
    ]
    assert design_effect(persons, "poor") == pytest.approx(n / (n - 1), rel=1e-12)


def test_design_effect_duplicated_clusters_doubles():
    # Perfect intra-cluster correlation with 2 persons per PSU doubles the
    # design variance; closed form is 2*C/(C-1) for C clusters.
    rng = np.random.default_rng(4)
    c = 150
    persons = []
    for i, s in enumerate(rng.integers(0, 2, c)):
        for j in range(2):
            persons.append(person(psu=f"p{i}", hh=f"h{i}_{j}", pid=f"{i}_{j}", poor=int(s)))
    deff = design_effect(persons, "poor")
    assert deff == pytest.approx(2 * c / (c - 1), rel=1e-12)
    assert deff == pytest.approx(2.0, rel=0.05)


def test_design_effect_paper_smoothing_identity():
    # Published area table: sqrt(D_i) and n_adj columns multiply to a
    # near-constant c = p(1-p)*DEFF around 0.610, implying DEFF near 2.48
    # at a pooled proportion of 0.56.
    n_adj = np.array([1.0, 2.0, 10.188, 16.4, 20.544, 39.607, 62.146])
    sqrt_d = np.array([0.783, 0.554, 0.245, 0.193, 0.173, 0.124, 0.099])
    products = sqrt_d**2 * n_adj
    assert np.all(np.abs(products - 0.610) < 0.005)
    implied_deff = products.mean() / (0.56 * 0.44)
    assert implied_deff == pytest.approx(2.48, abs=0.03)


def test_design_effect_degenerate_variable():
    persons = [person(psu=f"p{i}", hh=f"h{i}", pid=str(i), poor=1) for i in range(10)]
    with pytest.raises(ValueError, match="degenerate variable"):
        design_effect(persons, "poor")


def test_design_effect_dimension_uses_poor_only():
    # Non-poor records must not influence a dimensional design effect.
    rng = np.random.default_rng(5)
    poor = [
        person(psu=f"p{i % 6}", hh=f"h{i}", pid=str(i), poor=1, scores=(s,))
        for i, s in enumerate(rng.uniform(0.1, 0.9, 40))
    ]
    extra = [
        person(psu=f"q{i % 3}", hh=f"g{i}", pid=f"n{i}", poor=0, scores=(0.0,))
        for i in range(25)
    ]
    assert design_effect(poor, "score_1") == pytest.approx(
        design_effect(poor + extra, "score_1"), rel=1e-12
    )


# ---------------------------------------------------------------------------
# smoothed_variance
# ---------------------------------------------------------------------------


def test_smoothed_variance_paper_first_row():
    # n_adj = 1 with c = p(1-p)*DEFF = 0.613 gives sqrt(D) = 0.783.
    pooled_p = 0.56
    deff = 0.613 / (pooled_p * (1 - pooled_p))
    d = smoothed_variance(1.0, deff, pooled_p)
    assert np.sqrt(d) == pytest.approx(0.783, abs=0.0005)


def test_smoothed_variance_paper_kandaketiya_row():
    pooled_p = 0.56
    deff = 0.611 / (pooled_p * (1 - pooled_p))
    d = smoothed_variance(10.188, deff, pooled_p)
    assert np.sqrt(d) == pytest.approx(0.245, abs=0.0005)


def test_smoothed_variance_monotone_limit():
    values = [smoothed_variance(n, 2.5, 0.5) for n in [1, 10, 100, 10000]]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-4


def test_smoothed_variance_product_constant():
    deff, p = 2.452, 0.56
    n_adj = np.array([1.0, 2.0, 10.188, 16.4, 20.544, 39.607, 62.146])
    products = np.array([smoothed_variance(n, deff, p) * n for n in n_adj])
    assert np.all(np.abs(products - products[0]) < 1e-12)


def test_smoothed_variance_rejects_boundary_p():
    with pytest.raises(ValueError):
        smoothed_variance(1.0, 2.0, 0.0)
    with pytest.raises(ValueError):
        smoothed_variance(1.0, 2.0, 1.0)


# ---------------------------------------------------------------------------
# dimensional_direct
# ---------------------------------------------------------------------------


def test_dimensional_direct_single_record():
    p = person(poor=1, scores=(0.2, 0.5, 0.3))
    np.testing.assert_allclose(dimensional_direct([p]), [0.2, 0.5, 0.3])


def test_dimensional_direct_equal_weight_symmetry():
    persons = [
        person(hh="h1", pid="1", poor=1, scores=(0.2, 0.4, 0.4)),
        person(hh="h2", pid="2", poor=1, scores=(0.4, 0.2, 0.2)),
    ]
    np.testing.assert_allclose(dimensional_direct(persons), [0.3, 0.3, 0.3])


def test_dimensional_direct_hand_weighted_mean():
    persons = [
        person(hh="h1", pid="1", weight=1.0, poor=1, scores=(0.8, 0.4, 0.4)),
        person(hh="h2", pid="2", weight=3.0, poor=1, scores=(0.4, 0.4, 0.8)),
    ]
    np.testing.assert_allclose(dimensional_direct(persons), [0.5, 0.4, 0.7], atol=1e-15)


def test_dimensional_direct_no_poor_returns_none():
    assert dimensional_direct([person(poor=0, scores=(0.0,))]) is None


def test_dimensional_direct_range_property():
    rng = np.random.default_rng(6)
    persons = [
        person(hh=f"h{i}", pid=str(i), weight=w, poor=1, scores=tuple(s))
        for i, (w, s) in enumerate(zip(rng.uniform(0.2, 5, 50), rng.uniform(0, 1, (50, 3))))
    ]
    y = dimensional_direct(persons)
    scores = np.array([p.scores for p in persons])
    assert np.all(y >= scores.min(axis=0) - 1e-12)
    assert np.all(y <= scores.max(axis=0) + 1e-12)


# ---------------------------------------------------------------------------
# smoothed_covariance
# ---------------------------------------------------------------------------


def _poor_grid(scores, psus=None, weights=None):
    psus = psus or [f"p{i}" for i in range(len(scores))]
    weights = weights or [1.0] * len(scores)
    return [
        person(psu=psus[i], hh=f"h{i}", pid=str(i), weight=weights[i], poor=1, scores=tuple(s))
        for i, s in enumerate(scores)
    ]


def test_smoothed_covariance_k1_scalar():
    poor = _poor_grid([(0.2,), (0.4,), (0.7,), (0.9,)])
    deff = np.array([design_effect(poor, "score_1")])
    sigma = smoothed_covariance(poor, 3.0, deff)
    expected = np.var([0.2, 0.4, 0.7, 0.9], ddof=1) * deff[0] / 3.0
    assert sigma.shape == (1, 1)
    assert sigma[0, 0] == pytest.approx(expected, rel=1e-12)


def test_smoothed_covariance_duplicated_dimension():
    scores = [(0.2, 0.2), (0.4, 0.4), (0.7, 0.7), (0.9, 0.9)]
    poor = _poor_grid(scores)
    deff = np.array([design_effect(poor, "score_1"), design_effect(poor, "score_2")])
    sigma = smoothed_covariance(poor, 2.0, deff)
    # tolerance allows for the relative positive-definiteness floor
    assert sigma[0, 1] == pytest.approx(sigma[0, 0], rel=1e-7)


def test_smoothed_covariance_hand_evaluation():
    # Spreadsheet-style oracle: four equal-weight poor persons in their own
    # PSUs.  With every person its own PSU/household, each summed-variable
    # design effect reduces to n/(n-1), so the smoothed entries can be
    # written down directly from pooled variances.
    scores = [(0.1, 0.6), (0.3, 0.2), (0.5, 0.9), (0.8, 0.4)]
    poor = _poor_grid(scores)
    n_adj = 2.5

    s1 = np.var([0.1, 0.3, 0.5, 0.8], ddof=1)
    s2 = np.var([0.6, 0.2, 0.9, 0.4], ddof=1)
    s12 = np.var([0.7, 0.5, 1.4, 1.2], ddof=1)
    # own-PSU equal weights: cluster variance is s^2/n against an SRS
    # variance of s^2/n, so every score design effect is exactly 1
    var1 = s1 / n_adj
    var2 = s2 / n_adj
    var_sum = s12 / n_adj
    expected = np.array(
        [
            [var1, 0.5 * (var_sum - var1 - var2)],
            [0.5 * (var_sum - var1 - var2), var2],
        ]
    )

    deff = np.array([design_effect(poor, "score_1"), design_effect(poor, "score_2")])
    sigma = smoothed_covariance(poor, n_adj, deff)
    np.testing.assert_allclose(sigma, expected, rtol=1e-12)


def test_smoothed_covariance_symmetry_and_pd():
    rng = np.random.default_rng(9)
    poor = _poor_grid(
        rng.uniform(0, 1, (30, 4)).tolist(),
        psus=[f"p{i % 5}" for i in range(30)],
        weights=rng.uniform(0.5, 2.0, 30).tolist(),
    )
    deff = np.array([design_effect(poor, f"score_{j+1}") for j in range(4)])
    sigma = smoothed_covariance(poor, 4.0, deff)
    np.testing.assert_array_equal(sigma, sigma.T)
    assert np.linalg.eigvalsh(sigma).min() >= 0


def test_smoothed_covariance_requires_two_poor():
    with pytest.raises(ValueError, match="insufficient data for pooling"):
        smoothed_covariance(_poor_grid([(0.4, 0.2)]), 1.0, np.array([1.0, 1.0]))


def test_nearest_positive_definite_repairs_indefinite():
    bad = np.array([[1.0, 0.9, 0.05], [0.9, 1.0, 0.9], [0.05, 0.9, 1.0]])
    assert np.linalg.eigvalsh(bad).min() < 0
    fixed = nearest_positive_definite(bad)
    assert np.linalg.eigvalsh(fixed).min() >= 0
    np.testing.assert_array_equal(fixed, fixed.T)


# ---------------------------------------------------------------------------
# pooled quantities and per-area assembly
# ---------------------------------------------------------------------------


def _small_survey(seed=12, m_areas=3, with_empty_area=False):
    rng = np.random.default_rng(seed)
    persons = []
    for a in range(m_areas):
        for c in range(3):
            psu_poor_shift = rng.normal(0, 0.5)
            for h in range(4):
                poor = int(rng.random() < 0.5 + 0.2 * np.tanh(psu_poor_shift))
                if with_empty_area and a == 0:
                    poor = 0
                size = int(rng.integers(1, 4))
                hh = f"a{a}c{c}h{h}"
                for j in range(size):
                    scores = tuple(rng.uniform(0.05, 0.95, 3)) if poor else (0.0, 0.0, 0.0)
                    persons.append(
                        PersonRecord(
                            f"area{a}", f"a{a}p{c}", hh, f"{hh}j{j}",
                            float(rng.uniform(0.5, 2.0)), poor, scores,
                        )
                    )
    return persons


def test_design_summaries_product_identity():
    persons = _small_survey()
    summaries, deff = design_summaries(persons)
    products = [s.D_smoothed * s.n_adjusted for s in summaries]
    assert max(products) - min(products) < 1e-12
    for s in summaries:
        assert s.n_adjusted <= s.n_households + 1e-12


def test_design_summaries_zero_poor_area_has_absent_dimensions():
    persons = _small_survey(with_empty_area=True)
    summaries, _ = design_summaries(persons)
    first = summaries[0]
    assert first.z_direct == 0.0
    assert first.y_direct is None
    assert first.sigma_hat is None
    assert summaries[1].y_direct is not None
    assert summaries[1].sigma_hat is not None


def test_compute_design_effects_fields():
    persons = _small_survey()
    deff = compute_design_effects(persons)
    assert deff.deff_poverty > 0
    assert deff.deff_dims.shape == (3,)
    assert np.all(deff.deff_dims > 0)
    assert 0 < deff.pooled_p < 1
    np.testing.assert_allclose(np.diag(deff.deff_pairs), deff.deff_dims)
    np.testing.assert_array_equal(deff.pooled_s_pairs, deff.pooled_s_pairs.T)
    # var(2x) = 4 var(x) ties the diagonal of the pair table to pooled_s
    np.testing.assert_allclose(np.diag(deff.pooled_s_pairs), 4 * deff.pooled_s, rtol=1e-12)


def test_area_summary_respects_household_sizes():
    persons = [
        person(psu="p1", hh="h1", pid="1", poor=1, scores=(0.5,)),
        person(psu="p1", hh="h1", pid="2", poor=1, scores=(0.7,)),
        person(psu="p2", hh="h2", pid="3", poor=0, scores=(0.0,)),
        person(psu="p2", hh="h3", pid="4", poor=1, scores=(0.2,)),
    ]
    deff = DesignEffects(
        deff_poverty=2.0,
        pooled_p=0.5,
        deff_dims=np.array([1.5]),
        pooled_s=np.array([0.04]),
        pooled_s_pairs=np.array([[0.16]]),
        deff_pairs=np.array([[1.5]]),
    )
    summary = area_design_summary(persons, "a1", deff)
    assert summary.n_households == 3
    assert summary.n_adjusted == pytest.approx(16 / 6, rel=1e-12)
    assert summary.z_direct == pytest.approx(3 / 4)
