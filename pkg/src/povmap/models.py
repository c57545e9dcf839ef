"""Hierarchical model families as differentiable unnormalized log posteriors.

Five families over unconstrained parameter vectors:

* ``FH``        -- normal sampling model, normal linking model on the raw rate.
* ``NL``        -- normal sampling model, normal linking model on the logit rate.
* ``NL_RS``     -- as NL with the sampling variance a function of the rate,
                   ``rate*(1-rate)*DEFF/n_adj``.
* ``NL_PLUGIN`` -- as NL with the variance fixed at a plug-in rate estimate.
* ``MV_LOGIT``  -- multivariate normal sampling model on dimensional score
                   means with a logit-scale multivariate linking model and a
                   single-variance correlation parameterization of the model
                   covariance.

Parameter layouts (all coordinates unconstrained):

* univariate families: ``[coeffs (p), log sd, signal per area (m)]`` where the
  per-area signal is the raw rate for FH and its logit otherwise.
* MV_LOGIT: ``[coeffs (p), log sd, logit correlations (K(K-1)/2), logit theta
  (m*K, row-major per area)]``; correlations are omitted when fixed.

Values include the priors (normal coefficients, half-Cauchy scales, uniform
correlations) and the log Jacobians of the log/logit transforms, so HMC on the
unconstrained vector targets the intended posterior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .records import AreaDesignSummary, DesignEffects

LOG_2PI = float(np.log(2.0 * np.pi))

FAMILIES = ("FH", "NL", "NL_RS", "NL_PLUGIN", "MV_LOGIT")

# Floor that keeps rate*(1-rate) away from exact underflow in saturated
# trajectories; irrelevant on the posterior's effective support.
_PQ_FLOOR = 1e-300

# Support bound for the logit rate under the rate-dependent variance
# family.  With a direct estimate of exactly 0 or 1 the unrestricted
# posterior is improper: letting the rate saturate collapses the
# sampling variance onto the observation and the log density grows
# linearly in |logit rate|, while the linking scale absorbs the penalty
# at only logarithmic cost.  Restricting the rate to
# expit(+-NL_RS_LOGIT_BOUND) leaves the data-supported bulk untouched
# and makes the posterior proper.
NL_RS_LOGIT_BOUND = 35.0


@dataclass
class LogDensityResult:
    value: float
    gradient: np.ndarray


@dataclass
class UnivariateData:
    """Area-level inputs for the four proportion families."""

    z: np.ndarray                    # (m,) direct estimates
    X: np.ndarray                    # (m, p) design matrix, intercept first
    D: np.ndarray | None = None      # (m,) fixed sampling variances (FH/NL)
    n_adjusted: np.ndarray | None = None   # (m,) adjusted sizes (NL_RS/NL_PLUGIN)
    deff: float | None = None        # overall design effect (NL_RS/NL_PLUGIN)
    plugin: np.ndarray | None = None  # (m,) plug-in rates (NL_PLUGIN)
    area_ids: list[str] | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.X = np.ascontiguousarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != len(self.z):
            raise ValueError("design matrix must be (m, p)")
        if np.linalg.matrix_rank(self.X) < self.X.shape[1]:
            raise ValueError("design matrix must have full column rank")
        for name in ("D", "n_adjusted", "plugin"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=float))
        self._Xt = np.ascontiguousarray(self.X.T)

    @property
    def m(self) -> int:
        return len(self.z)


@dataclass
class MultivariateData:
    """Area-level inputs for the multivariate score model.

    ``y[i]`` and ``sigma[i]`` are ``None`` for areas without poor
    respondents; those areas contribute only the linking level.  ``X`` may
    be ``(m, p)``, in which case each area's linking mean is the shared
    combination ``x_i' beta`` repeated across dimensions, or ``(m, K, p)``
    for dimension-specific covariates.
    """

    y: list[np.ndarray | None]
    sigma: list[np.ndarray | None]
    X: np.ndarray
    K: int
    area_ids: list[str] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 2:
            self.X = np.repeat(self.X[:, None, :], self.K, axis=1)
        if self.X.ndim != 3 or self.X.shape[1] != self.K:
            raise ValueError("covariates must be (m, p) or (m, K, p)")
        self.y = [None if v is None else np.asarray(v, dtype=float) for v in self.y]
        self.sigma = [None if s is None else np.asarray(s, dtype=float) for s in self.sigma]
        for i, s in enumerate(self.sigma):
            if (s is None) != (self.y[i] is None):
                raise ValueError(f"area {i}: score mean and covariance must be present together")
            if s is not None:
                try:
                    np.linalg.cholesky(s)
                except np.linalg.LinAlgError:
                    raise ValueError(f"area {i}: sampling covariance is not positive definite")

    @property
    def m(self) -> int:
        return len(self.y)


@dataclass
class ModelSpec:
    """Which family to fit, its covariates, and prior hyperparameters."""

    family: str
    covariates: np.ndarray
    K: int = 1
    prior_scale_coeff: float = 5.0
    prior_scale_sd: float = 5.0
    deff: DesignEffects | None = None
    plugin_estimates: np.ndarray | None = None
    rho_fixed: np.ndarray | None = None
    covariate_names: list[str] | None = None
    name: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        self.covariates = np.asarray(self.covariates, dtype=float)


# ---------------------------------------------------------------------------
# prior and transform building blocks
# ---------------------------------------------------------------------------


def normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def log_half_cauchy(sigma: float, scale: float) -> float:
    """Log density of a half-Cauchy(0, scale) variable at sigma > 0."""
    return float(np.log(2.0 / (np.pi * scale)) - np.log1p((sigma / scale) ** 2))


def _coeff_prior(coeffs: np.ndarray, scale: float) -> tuple[float, np.ndarray]:
    var = scale * scale
    value = -0.5 * len(coeffs) * (LOG_2PI + math.log(var)) - 0.5 * float(coeffs @ coeffs) / var
    return value, -coeffs / var


def _scale_prior(log_sd: float, scale: float) -> tuple[float, float]:
    # Half-Cauchy on the sd plus the log Jacobian of sd = exp(log_sd).
    sd = math.exp(log_sd)
    ratio_sq = (sd / scale) ** 2
    value = math.log(2.0 / (math.pi * scale)) - math.log1p(ratio_sq) + log_sd
    grad = -2.0 * ratio_sq / (1.0 + ratio_sq) + 1.0
    return value, grad


def _check_finite(params: np.ndarray):
    if not np.all(np.isfinite(params)):
        raise ValueError("invalid parameter point: non-finite coordinates")


# Beyond this the scale coordinate overflows exp; such states carry no
# posterior mass and are reported as -inf (a divergence to the sampler).
_LOG_SD_BOUND = 350.0


def _guard(result: LogDensityResult) -> LogDensityResult:
    if not (np.isfinite(result.value) and np.all(np.isfinite(result.gradient))):
        return LogDensityResult(-np.inf, np.zeros_like(result.gradient))
    return result


def _split_univariate(params, data):
    p = data.X.shape[1]
    coeffs = params[:p]
    log_sd = params[p]
    signal = params[p + 1:]
    if len(signal) != data.m:
        raise ValueError(f"expected {p + 1 + data.m} parameters, got {len(params)}")
    return coeffs, log_sd, signal


def _univariate_logpost(params, data, coeff_scale, sd_scale, level1):
    """Shared level-2 + prior scaffolding; `level1` maps the sampled signal
    to the sampling-model value and its gradient."""
    params = np.asarray(params, dtype=float)
    _check_finite(params)
    coeffs, log_sd, signal = _split_univariate(params, data)
    if abs(log_sd) > _LOG_SD_BOUND:
        return LogDensityResult(-np.inf, np.zeros_like(params))

    with np.errstate(over="ignore", divide="ignore", invalid="ignore", under="ignore"):
        inv_var = math.exp(-2.0 * log_sd)

        resid = signal - data.X @ coeffs
        quad = float(resid @ resid) * inv_var
        value = -0.5 * data.m * LOG_2PI - data.m * log_sd - 0.5 * quad
        scaled = resid * inv_var
        grad_coeffs = data._Xt @ scaled
        grad_log_sd = quad - data.m

        l1_value, l1_grad_signal = level1(signal)
        value += l1_value
        grad_signal = l1_grad_signal - scaled

        pv, pg = _coeff_prior(coeffs, coeff_scale)
        value += pv
        grad_coeffs += pg
        sv, sg = _scale_prior(log_sd, sd_scale)
        value += sv
        grad_log_sd += sg

        grad = np.empty_like(params)
        p = len(coeffs)
        grad[:p] = grad_coeffs
        grad[p] = grad_log_sd
        grad[p + 1:] = grad_signal
    return _guard(LogDensityResult(value, grad))


# ---------------------------------------------------------------------------
# the four proportion families
# ---------------------------------------------------------------------------


def logpost_fh(params, data: UnivariateData, coeff_scale=5.0, sd_scale=5.0) -> LogDensityResult:
    """Fay-Herriot: normal sampling model and normal linking model on the raw rate."""

    def level1(rate):
        value = float(np.sum(normal_logpdf(data.z, rate, data.D)))
        return value, (data.z - rate) / data.D

    return _univariate_logpost(params, data, coeff_scale, sd_scale, level1)


def logpost_nl(params, data: UnivariateData, coeff_scale=5.0, sd_scale=5.0) -> LogDensityResult:
    """Normal-logistic: linking model on the logit rate, fixed sampling variances."""

    def level1(signal):
        rate = expit(signal)
        value = float(np.sum(normal_logpdf(data.z, rate, data.D)))
        return value, (data.z - rate) / data.D * rate * (1.0 - rate)

    return _univariate_logpost(params, data, coeff_scale, sd_scale, level1)


def nl_rs_sampling_variance(rate, n_adjusted, deff):
    """Rate-dependent sampling variance rate*(1-rate)*DEFF/n_adjusted."""
    return rate * (1.0 - rate) * deff / n_adjusted


def logpost_nl_rs(params, data: UnivariateData, coeff_scale=5.0, sd_scale=5.0) -> LogDensityResult:
    """Normal-logistic with the sampling variance tied to the rate itself.

    The level-1 normalization depends on the rate, so the gradient carries
    the derivative of the variance as well as of the mean.  Logit rates
    beyond ``NL_RS_LOGIT_BOUND`` evaluate to -inf (see the bound's note on
    propriety with boundary direct estimates); the sampler treats such
    proposals as divergences.
    """
    params = np.asarray(params, dtype=float)
    _check_finite(params)
    p = data.X.shape[1]
    if np.max(np.abs(params[p + 1:])) > NL_RS_LOGIT_BOUND:
        return LogDensityResult(-np.inf, np.zeros_like(params))
    c = data.deff / data.n_adjusted
    log_c_sum = float(np.log(c).sum())

    def level1(signal):
        rate = expit(signal)
        pq = np.maximum(rate * (1.0 - rate), _PQ_FLOOR)
        var = c * pq
        resid = data.z - rate
        scaled = resid / var
        value = (
            -0.5 * (data.m * LOG_2PI + log_c_sum)
            - 0.5 * float(np.log(pq).sum())
            - 0.5 * float(resid @ scaled)
        )
        # dvar/drate = c*(1-2*rate); the chain through rate = expit
        # contributes drate/dsignal = pq
        one_minus_2r = 1.0 - 2.0 * rate
        grad_signal = pq * scaled + 0.5 * one_minus_2r * (resid * scaled - 1.0)
        return value, grad_signal

    return _univariate_logpost(params, data, coeff_scale, sd_scale, level1)


def logpost_nl_plugin(params, data: UnivariateData, coeff_scale=5.0, sd_scale=5.0) -> LogDensityResult:
    """Normal-logistic with variances fixed at a plug-in rate estimate."""
    if data.plugin is None:
        raise ValueError("plug-in rate estimates required")
    if np.any(data.plugin <= 0.0) or np.any(data.plugin >= 1.0):
        raise ValueError("plug-in estimates must lie strictly in (0, 1)")
    d_fixed = nl_rs_sampling_variance(data.plugin, data.n_adjusted, data.deff)

    def level1(signal):
        rate = expit(signal)
        value = float(np.sum(normal_logpdf(data.z, rate, d_fixed)))
        return value, (data.z - rate) / d_fixed * rate * (1.0 - rate)

    return _univariate_logpost(params, data, coeff_scale, sd_scale, level1)


# ---------------------------------------------------------------------------
# multivariate logistic model
# ---------------------------------------------------------------------------


def build_correlation(rho: np.ndarray) -> tuple[np.ndarray, bool]:
    """Correlation matrix from the upper-triangle vector, with a PD flag.

    The flag comes from an attempted Cholesky factorization; failure is not
    an error (the sampler treats non-PD proposals as divergences).
    """
    rho = np.asarray(rho, dtype=float)
    j = len(rho)
    k = int(round((1 + np.sqrt(1 + 8 * j)) / 2))
    if k * (k - 1) // 2 != j:
        raise ValueError(f"{j} correlations do not fill a triangle")
    R = np.eye(k)
    iu = np.triu_indices(k, 1)
    R[iu] = rho
    R[(iu[1], iu[0])] = rho
    try:
        np.linalg.cholesky(R)
        return R, True
    except np.linalg.LinAlgError:
        return R, False


def _mv_layout(data: MultivariateData, rho_fixed):
    p = data.X.shape[2]
    n_rho = 0 if rho_fixed is not None else data.K * (data.K - 1) // 2
    return p, n_rho, p + 1 + n_rho + data.m * data.K


def logpost_mv_logit(
    params,
    data: MultivariateData,
    coeff_scale=5.0,
    sd_scale=5.0,
    rho_fixed: np.ndarray | None = None,
) -> LogDensityResult:
    """Multivariate normal sampling model with a logit-scale linking model.

    The model covariance is ``sd^2 * R`` with ``R`` a correlation matrix
    whose off-diagonals carry uniform (0, 1) priors sampled on the logit
    scale.  Non-positive-definite ``R`` proposals yield ``-inf`` (handled
    by the sampler as divergences).  Areas with absent score means enter
    the linking level only.
    """
    params = np.asarray(params, dtype=float)
    _check_finite(params)
    m, K = data.m, data.K
    p, n_rho, dim = _mv_layout(data, rho_fixed)
    if len(params) != dim:
        raise ValueError(f"expected {dim} parameters, got {len(params)}")

    coeffs = params[:p]
    log_sd = params[p]
    t_rho = params[p + 1: p + 1 + n_rho]
    lam = params[p + 1 + n_rho:].reshape(m, K)

    grad = np.zeros_like(params)
    grad_lam = np.zeros((m, K))
    if abs(log_sd) > _LOG_SD_BOUND:
        return LogDensityResult(-np.inf, grad)

    if rho_fixed is not None:
        rho = np.asarray(rho_fixed, dtype=float)
    else:
        rho = expit(t_rho)
    R, is_pd = build_correlation(rho) if K > 1 else (np.eye(1), True)
    if not is_pd:
        return LogDensityResult(-np.inf, grad)

    with np.errstate(over="ignore", divide="ignore", invalid="ignore", under="ignore"):
        sd = np.exp(log_sd)
        var = sd**2
        R_inv = np.linalg.inv(R)
        sign, logdet_R = np.linalg.slogdet(R)

        # level 1: present areas only
        theta = expit(lam)
        value = 0.0
        for i, y in enumerate(data.y):
            if y is None:
                continue
            s_inv = data._sigma_inv[i]
            e = y - theta[i]
            value += data._sigma_const[i] - 0.5 * float(e @ s_inv @ e)
            grad_lam[i] += (s_inv @ e) * theta[i] * (1.0 - theta[i])

        # level 2: all areas
        link_mean = np.einsum("ikp,p->ik", data.X, coeffs)
        resid = lam - link_mean
        q = resid @ R_inv.T                      # rows (R^-1 r_i)'
        quad = float(np.sum(q * resid))
        value += m * (-0.5 * K * LOG_2PI - 0.5 * (2.0 * K * log_sd + logdet_R))
        value += -0.5 * quad / var
        grad_lam += -q / var
        grad[:p] = np.einsum("ikp,ik->p", data.X, q) / var
        grad_log_sd = -m * K + quad / var

        if rho_fixed is None and n_rho:
            iu = np.triu_indices(K, 1)
            # d/d rho_kl of the level-2 value, both symmetric entries counted
            outer = q.T @ q
            g_rho = -m * R_inv[iu] + outer[iu] / var
            # chain through rho = expit(t) and add the transform Jacobian
            grad[p + 1: p + 1 + n_rho] = g_rho * rho * (1.0 - rho) + (1.0 - 2.0 * rho)
            value += float(np.sum(np.log(rho) + np.log1p(-rho)))

        pv, pg = _coeff_prior(coeffs, coeff_scale)
        value += pv
        grad[:p] += pg
        sv, sg = _scale_prior(log_sd, sd_scale)
        value += sv
        grad_log_sd += sg

        grad[p] = grad_log_sd
        grad[p + 1 + n_rho:] = grad_lam.ravel()
    return _guard(LogDensityResult(float(value), grad))


def _mv_precompute(data: MultivariateData):
    inv, const = [], []
    for s in data.sigma:
        if s is None:
            inv.append(None)
            const.append(None)
        else:
            sign, logdet = np.linalg.slogdet(s)
            inv.append(np.linalg.inv(s))
            const.append(-0.5 * (len(s) * LOG_2PI + logdet))
    data._sigma_inv = inv
    data._sigma_const = const


# ---------------------------------------------------------------------------
# model wrapper
# ---------------------------------------------------------------------------


_UNIVARIATE_LOGPOSTS = {
    "FH": logpost_fh,
    "NL": logpost_nl,
    "NL_RS": logpost_nl_rs,
    "NL_PLUGIN": logpost_nl_plugin,
}


@dataclass
class Model:
    """A family bound to its data: log posterior, layout, pointwise likelihood."""

    spec: ModelSpec
    data: UnivariateData | MultivariateData
    parameter_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if isinstance(self.data, MultivariateData):
            _mv_precompute(self.data)
        self.parameter_names = _parameter_names(self.spec, self.data)

    @property
    def dim(self) -> int:
        return len(self.parameter_names)

    def logpost(self, params) -> LogDensityResult:
        if self.spec.family == "MV_LOGIT":
            return logpost_mv_logit(
                params,
                self.data,
                coeff_scale=self.spec.prior_scale_coeff,
                sd_scale=self.spec.prior_scale_sd,
                rho_fixed=self.spec.rho_fixed,
            )
        fn = _UNIVARIATE_LOGPOSTS[self.spec.family]
        return fn(
            params,
            self.data,
            coeff_scale=self.spec.prior_scale_coeff,
            sd_scale=self.spec.prior_scale_sd,
        )

    def target(self):
        """(value, gradient) callable for the sampler."""

        def fn(q):
            res = self.logpost(q)
            return res.value, res.gradient

        return fn

    @property
    def rate_slice(self) -> slice:
        """Columns of the parameter vector holding the per-area signal."""
        p = self.data.X.shape[1] if isinstance(self.data, UnivariateData) else self.data.X.shape[2]
        n_rho = 0
        if self.spec.family == "MV_LOGIT" and self.spec.rho_fixed is None:
            n_rho = self.data.K * (self.data.K - 1) // 2
        return slice(p + 1 + n_rho, self.dim)

    def pointwise_loglik(self, draws: np.ndarray) -> np.ndarray:
        return pointwise_loglik(draws, self.data, self.spec.family, spec=self.spec)


def build_model(spec: ModelSpec, summaries: list[AreaDesignSummary]) -> Model:
    """Assemble a Model from design summaries according to the spec."""
    X = spec.covariates
    if spec.family == "MV_LOGIT":
        data = MultivariateData(
            y=[s.y_direct for s in summaries],
            sigma=[s.sigma_hat for s in summaries],
            X=X,
            K=spec.K,
            area_ids=[s.area_id for s in summaries],
        )
        return Model(spec, data)
    z = np.array([s.z_direct for s in summaries])
    area_ids = [s.area_id for s in summaries]
    if spec.family in ("FH", "NL"):
        data = UnivariateData(z=z, X=X, D=[s.D_smoothed for s in summaries], area_ids=area_ids)
    else:
        if spec.deff is None:
            raise ValueError(f"{spec.family} requires pooled design effects")
        data = UnivariateData(
            z=z,
            X=X,
            n_adjusted=[s.n_adjusted for s in summaries],
            deff=spec.deff.deff_poverty,
            plugin=spec.plugin_estimates,
            area_ids=area_ids,
        )
    return Model(spec, data)


def _parameter_names(spec: ModelSpec, data) -> list[str]:
    p = data.X.shape[1] if isinstance(data, UnivariateData) else data.X.shape[2]
    if spec.covariate_names and len(spec.covariate_names) == p:
        coeff = list(spec.covariate_names)
    else:
        coeff = ["Intercept"] + [f"x{j}" for j in range(1, p)]
    ids = data.area_ids or [str(i) for i in range(data.m)]
    if spec.family == "MV_LOGIT":
        names = coeff + ["log_sigma"]
        if spec.rho_fixed is None:
            names += [f"rho[{a+1},{b+1}]" for a in range(spec.K) for b in range(a + 1, spec.K)]
        names += [f"lambda[{aid},{k+1}]" for aid in ids for k in range(spec.K)]
        return names
    signal = "pi" if spec.family == "FH" else "phi"
    return coeff + ["log_sigma_v"] + [f"{signal}[{aid}]" for aid in ids]


# ---------------------------------------------------------------------------
# pointwise log likelihood for LOO
# ---------------------------------------------------------------------------


def pointwise_loglik(draws: np.ndarray, data, family: str, spec: ModelSpec | None = None) -> np.ndarray:
    """Level-1 log density per draw and observation, (R, m_present).

    For MV_LOGIT an observation is an area's whole score vector; areas
    without scores are excluded.
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    if family not in FAMILIES:
        raise ValueError(f"unknown model family {family!r}")

    if family == "MV_LOGIT":
        if not isinstance(data, MultivariateData):
            raise ValueError("MV_LOGIT requires multivariate data")
        if not hasattr(data, "_sigma_inv"):
            _mv_precompute(data)
        rho_fixed = spec.rho_fixed if spec is not None else None
        p, n_rho, dim = _mv_layout(data, rho_fixed)
        if draws.shape[1] != dim:
            raise ValueError("draw width does not match the MV_LOGIT layout")
        lam = draws[:, p + 1 + n_rho:].reshape(len(draws), data.m, data.K)
        theta = expit(lam)
        cols = []
        for i, y in enumerate(data.y):
            if y is None:
                continue
            e = y[None, :] - theta[:, i, :]
            quad = np.einsum("rk,kl,rl->r", e, data._sigma_inv[i], e)
            cols.append(data._sigma_const[i] - 0.5 * quad)
        return np.column_stack(cols)

    if not isinstance(data, UnivariateData):
        raise ValueError(f"{family} requires univariate data")
    p = data.X.shape[1]
    if draws.shape[1] != p + 1 + data.m:
        raise ValueError(f"draw width does not match the {family} layout")
    signal = draws[:, p + 1:]
    if family == "FH":
        rate = signal
    else:
        rate = expit(signal)
    if family in ("FH", "NL"):
        var = np.broadcast_to(data.D, rate.shape)
    elif family == "NL_RS":
        var = nl_rs_sampling_variance(rate, data.n_adjusted, data.deff)
    else:
        d_fixed = nl_rs_sampling_variance(data.plugin, data.n_adjusted, data.deff)
        var = np.broadcast_to(d_fixed, rate.shape)
    return normal_logpdf(data.z[None, :], rate, var)
