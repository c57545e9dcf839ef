"""Fit orchestration: bind design summaries to a model family, sample it,
and derive the posterior products the reports need."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from . import diagnostics, hmc, models
from .records import AreaDesignSummary, AreaRecord, DesignEffects


@dataclass
class FitResult:
    spec: models.ModelSpec
    model: models.Model
    draws: hmc.PosteriorDraws
    diag: diagnostics.DiagnosticsReport
    pointwise: np.ndarray  # (draws, observations) level-1 log likelihood

    @property
    def data(self):
        return self.model.data

    @property
    def area_ids(self) -> list[str]:
        return self.data.area_ids or [str(i) for i in range(self.data.m)]

    def rate_draws(self) -> np.ndarray:
        """Per-area poverty-rate draws, (chains, kept, m)."""
        if self.spec.family == "MV_LOGIT":
            raise ValueError("rate draws are a univariate-family product")
        signal = self.draws.draws[:, :, self.model.rate_slice]
        return signal if self.spec.family == "FH" else expit(signal)

    def theta_draws(self) -> np.ndarray:
        """Dimensional score-mean draws, (total draws, m, K)."""
        if self.spec.family != "MV_LOGIT":
            raise ValueError("theta draws are an MV_LOGIT product")
        lam = self.draws.stacked()[:, self.model.rate_slice]
        return expit(lam.reshape(-1, self.data.m, self.data.K))


def design_matrix(
    areas: list[AreaRecord], covariates: list[str], area_order: list[str]
) -> np.ndarray:
    """Intercept-first design matrix in the given area order."""
    by_id = {a.area_id: a for a in areas}
    missing = [aid for aid in area_order if aid not in by_id]
    if missing:
        raise ValueError(f"areas missing from the areas table: {missing}")
    rows = []
    for aid in area_order:
        rec = by_id[aid]
        try:
            rows.append([1.0] + [rec.covariates[c] for c in covariates])
        except KeyError as exc:
            raise ValueError(f"area {aid}: missing covariate {exc}") from exc
    return np.asarray(rows)


def make_spec(
    config: dict,
    areas: list[AreaRecord],
    summaries: list[AreaDesignSummary],
    deff: DesignEffects | None,
) -> models.ModelSpec:
    """ModelSpec from a validated model-config dict plus the areas table."""
    covariates = list(config.get("covariates", []))
    X = design_matrix(areas, covariates, [s.area_id for s in summaries])
    return models.ModelSpec(
        family=config["family"],
        covariates=X,
        K=int(config.get("K", 1)),
        prior_scale_coeff=float(config["priors"]["coeff_scale"]),
        prior_scale_sd=float(config["priors"]["sd_scale"]),
        deff=deff,
        covariate_names=["Intercept"] + covariates,
        name=config.get("name") or config["family"],
    )


def fit_model(
    spec: models.ModelSpec,
    summaries: list[AreaDesignSummary],
    config: hmc.SamplerConfig,
) -> FitResult:
    """Sample one family.  The plug-in family runs its two stages: a
    smoothed-variance NL fit first, whose posterior mean rates fix the
    sampling variances of the final fit."""
    if spec.family == "NL_PLUGIN" and spec.plugin_estimates is None:
        stage1 = fit_model(replace(spec, family="NL", name="NL (plug-in stage 1)"), summaries, config)
        plugin = stage1.rate_draws().reshape(-1, stage1.data.m).mean(axis=0)
        spec = replace(spec, plugin_estimates=plugin)

    model = models.build_model(spec, summaries)
    draws = hmc.sample(model.target(), model.dim, config, parameter_names=model.parameter_names)
    diag = diagnostics.diagnose(draws.draws, model.parameter_names)
    pointwise = model.pointwise_loglik(draws.stacked())
    return FitResult(spec, model, draws, diag, pointwise)


SUMMARY_HEADER = [
    "parameter", "mean", "se_mean", "sd", "2.5%", "15%", "85%", "97.5%", "n_eff", "Rhat",
]


def summary_rows(fit: FitResult) -> list[list]:
    """Posterior summary table: coefficients, variance components, rates.

    Mirrors the usual fit-summary layout (mean, se_mean, sd, central
    quantiles, effective sample size, split R-hat) with variance
    components reported on the variance scale.
    """
    from .reports import summarize

    p = fit.spec.covariates.shape[1]
    names = fit.draws.parameter_names
    rows = []

    def add(estimates, rename=None):
        for est in estimates:
            rows.append(
                [
                    rename(est.area_id) if rename else est.area_id,
                    est.mean,
                    est.sd / np.sqrt(est.n_eff) if np.isfinite(est.n_eff) else np.nan,
                    est.sd,
                    est.quantiles[0.025],
                    est.quantiles[0.15],
                    est.quantiles[0.85],
                    est.quantiles[0.975],
                    est.n_eff,
                    est.rhat,
                ]
            )

    add(summarize(fit.draws, names=names[:p]))
    scale_name = names[p]
    var_label = "sigma_sq" if fit.spec.family == "MV_LOGIT" else "sigma_v_sq"
    add(
        summarize(fit.draws, transform=lambda s: np.exp(2.0 * s), names=[scale_name]),
        rename=lambda _: var_label,
    )
    if fit.spec.family == "MV_LOGIT":
        rho_names = [n for n in names if n.startswith("rho[")]
        if rho_names:
            add(summarize(fit.draws, transform=expit, names=rho_names))
        lam_names = [n for n in names if n.startswith("lambda[")]
        add(
            summarize(fit.draws, transform=expit, names=lam_names),
            rename=lambda n: "theta[" + n[len("lambda["):],
        )
    else:
        signal_names = names[p + 1:]
        transform = None if fit.spec.family == "FH" else expit
        add(
            summarize(fit.draws, transform=transform, names=signal_names),
            rename=lambda n: "pi[" + n.split("[", 1)[1],
        )
    return rows
