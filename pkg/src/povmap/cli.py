"""Command-line pipeline: direct estimation, model fitting, comparison,
reporting, and simulation.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numerical
failure.  Every command writes a manifest (command, config hash, input
digests, seed, version, timestamps) into its output directory; data
outputs are byte-identical across reruns with the same seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, dataio, loo, models, pipeline, reports, simulate, survey
from .dataio import DataError, SchemaError
from .diagnostics import RHAT_WARN
from .hmc import SamplerConfig, SamplerError


def _warn(message: str):
    print(f"warning: {message}", file=sys.stderr)


def _ensure_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_persons_and_areas(args):
    persons = dataio.read_persons_csv(args.persons)
    areas = dataio.read_areas_csv(args.areas) if getattr(args, "areas", None) else None
    if areas is not None:
        known = {a.area_id for a in areas}
        missing = sorted({p.area_id for p in persons} - known)
        if missing:
            raise DataError(f"{args.persons}: areas absent from {args.areas}: {missing}")
    return persons, areas


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_direct(args) -> int:
    started = dataio.now_iso()
    persons, _ = _read_persons_and_areas(args)
    out = _ensure_out(args.out)

    summaries, deff = survey.design_summaries(persons)
    k = deff.n_dims
    dataio.write_design_csv(out / "design.csv", summaries, k)
    (out / "design_effects.json").write_text(
        json.dumps(
            {
                "deff_poverty": deff.deff_poverty,
                "pooled_p": deff.pooled_p,
                "deff_dims": deff.deff_dims.tolist(),
                "pooled_s": deff.pooled_s.tolist(),
                "pooled_s_pairs": deff.pooled_s_pairs.tolist(),
                "deff_pairs": deff.deff_pairs.tolist(),
            },
            indent=2,
            sort_keys=True,
        )
    )
    inputs = [args.persons] + ([args.areas] if args.areas else [])
    dataio.write_manifest(out, "direct", {"persons": str(args.persons)}, inputs, started)
    print(f"wrote design summaries for {len(summaries)} areas to {out}")
    return 0


def _sampler_config(args) -> SamplerConfig:
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("POVMAP_THREADS", args.chains))
    try:
        return SamplerConfig(
            chains=args.chains,
            iterations=args.iter,
            warmup=args.warmup,
            seed=args.seed,
            threads=threads,
        )
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc


def cmd_fit(args) -> int:
    started = dataio.now_iso()
    inputs = [args.areas, args.model]
    areas = dataio.read_areas_csv(args.areas)
    config = dataio.load_model_config(args.model)
    if config["family"] not in models.FAMILIES:
        raise SchemaError(
            f"{args.model}: unknown family {config['family']!r}; choose from {models.FAMILIES}"
        )

    deff = None
    if args.persons:
        inputs.append(args.persons)
        persons = dataio.read_persons_csv(args.persons)
        summaries, deff = survey.design_summaries(persons)
    else:
        inputs.append(args.design)
        summaries, _ = dataio.read_design_csv(args.design)
        if config["family"] in ("NL_RS", "NL_PLUGIN"):
            sidecar = Path(args.design_effects or Path(args.design).parent / "design_effects.json")
            if not sidecar.exists():
                raise SchemaError(
                    f"{config['family']} needs pooled design effects; "
                    f"pass --design-effects (looked for {sidecar})"
                )
            inputs.append(sidecar)
            raw = json.loads(sidecar.read_text())
            deff = models.DesignEffects(
                deff_poverty=raw["deff_poverty"],
                pooled_p=raw["pooled_p"],
                deff_dims=np.asarray(raw["deff_dims"]),
                pooled_s=np.asarray(raw["pooled_s"]),
                pooled_s_pairs=np.asarray(raw["pooled_s_pairs"]),
                deff_pairs=np.asarray(raw["deff_pairs"]),
            )

    spec = pipeline.make_spec(config, areas, summaries, deff)
    sampler_config = _sampler_config(args)
    out = _ensure_out(args.out)

    try:
        fit = pipeline.fit_model(spec, summaries, sampler_config)
    except SamplerError as exc:
        (out / "error.json").write_text(
            json.dumps(
                {"error": str(exc), "sampler_config": asdict(sampler_config)},
                indent=2,
                sort_keys=True,
            )
        )
        raise

    dataio.write_draws(out, fit.draws)
    dataio.write_table_csv(out / "summary.csv", pipeline.SUMMARY_HEADER, pipeline.summary_rows(fit))
    obs_ids = [aid for aid, y in zip(fit.area_ids, getattr(fit.data, "y", fit.area_ids)) if y is not None]
    dataio.write_matrix_csv(out / "pointwise_loglik.csv", fit.pointwise, obs_ids)
    (out / "diagnostics.json").write_text(
        json.dumps(
            {
                "rhat": dict(zip(fit.diag.parameter_names, fit.diag.rhat.tolist())),
                "ess": dict(zip(fit.diag.parameter_names, fit.diag.ess.tolist())),
                "mcse": dict(zip(fit.diag.parameter_names, fit.diag.mcse.tolist())),
                "divergences": fit.draws.divergence_count.tolist(),
            },
            indent=2,
            sort_keys=True,
        )
    )
    meta = {
        "family": spec.family,
        "name": spec.name,
        "K": spec.K,
        "area_ids": fit.area_ids,
        "observation_ids": obs_ids,
        "n_adjusted": [s.n_adjusted for s in summaries],
        "deff": None if deff is None else deff.deff_poverty,
        "covariate_names": spec.covariate_names,
    }
    (out / "fit_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    effective = {
        "model": config,
        "sampler": asdict(sampler_config),
        "seed": sampler_config.seed,
    }
    dataio.write_manifest(out, "fit", effective, inputs, started)

    worst = fit.diag.worst_rhat()
    if worst >= RHAT_WARN:
        _warn(f"split R-hat reached {worst:.3f} (threshold {RHAT_WARN}); inspect diagnostics")
    divergences = int(fit.draws.divergence_count.sum())
    if divergences:
        _warn(f"{divergences} divergent transitions after warmup")
    print(f"fit {spec.name}: {fit.draws.n_chains} chains x {fit.draws.n_kept} draws -> {out}")
    return 0


def cmd_compare(args) -> int:
    started = dataio.now_iso()
    if len(args.fit_dirs) < 2:
        raise SchemaError("compare needs at least two fit directories")
    results = {}
    observation_sets = set()
    for fit_dir in args.fit_dirs:
        meta = json.loads((Path(fit_dir) / "fit_meta.json").read_text())
        matrix, columns = dataio.read_matrix_csv(Path(fit_dir) / "pointwise_loglik.csv")
        name = meta["name"]
        if name in results:
            name = f"{name} ({fit_dir})"
        results[name] = (loo.elpd_loo(matrix), columns)
        observation_sets.add(tuple(columns))
    if len(observation_sets) != 1:
        raise DataError("fits were computed on different observation sets")

    rows = loo.compare({name: res for name, (res, _) in results.items()})
    out = _ensure_out(args.out)
    dataio.write_table_csv(
        out / "comparison.csv",
        ["model", "elpd_diff", "se_diff"],
        [[r.model_name, r.elpd_diff, r.se_diff] for r in rows],
    )
    columns = observation_sets.pop()
    for name, (res, _) in results.items():
        safe = name.replace("/", "_").replace(" ", "_")
        dataio.write_table_csv(
            out / f"loo_{safe}.csv",
            ["area_id", "elpd_i", "pareto_k"],
            [[aid, res.pointwise_elpd[i], res.pareto_k[i]] for i, aid in enumerate(columns)],
        )
    dataio.write_manifest(
        out, "compare", {"fit_dirs": [str(d) for d in args.fit_dirs]},
        [Path(d) / "pointwise_loglik.csv" for d in args.fit_dirs], started,
    )
    for row in rows:
        print(f"{row.model_name:>24}  elpd_diff={row.elpd_diff: .3f}  se_diff={row.se_diff:.3f}")
    return 0


def _district_directs(persons, district_map):
    by_district: dict[str, list] = {}
    for p in persons:
        district = district_map.get(p.area_id)
        if district:
            by_district.setdefault(district, []).append(p)
    return {
        district: survey.weighted_proportion(members)
        for district, members in sorted(by_district.items())
    }


def cmd_report(args) -> int:
    started = dataio.now_iso()
    fit_dir = Path(args.fit_dir)
    inputs = [fit_dir / "draws.csv", args.areas]
    meta = json.loads((fit_dir / "fit_meta.json").read_text())
    draws = dataio.read_draws(fit_dir)
    areas = dataio.read_areas_csv(args.areas)
    out = _ensure_out(args.out)

    district_map = {a.area_id: a.district_id for a in areas if a.district_id}
    if args.district_map:
        inputs.append(args.district_map)
        with open(args.district_map, newline="") as fh:
            import csv as _csv

            district_map = {row["area_id"]: row["district_id"] for row in _csv.DictReader(fh)}

    area_ids = meta["area_ids"]
    estimates = None
    contribution_rows = None

    if meta["family"] == "MV_LOGIT":
        k = meta["K"]
        lam_names = [n for n in draws.parameter_names if n.startswith("lambda[")]
        from scipy.special import expit

        lam = draws.stacked()[:, [draws.parameter_names.index(n) for n in lam_names]]
        theta = expit(lam.reshape(-1, len(area_ids), k))
        contribution_rows = reports.contributions(theta, area_ids)
        labels = [lbl.lower() for lbl in reports.dimension_labels(k)]
        header = ["area_id"]
        for lbl in labels:
            header += [lbl, f"{lbl}_se", f"{lbl}_2.5%", f"{lbl}_97.5%"]
        rows = []
        for c in contribution_rows:
            row = [c.area_id]
            for j in range(k):
                row += [c.shares[j], c.share_se[j], c.share_intervals[j, 0], c.share_intervals[j, 1]]
            rows.append(row)
        dataio.write_table_csv(out / "contributions.csv", header, rows)
    else:
        from scipy.special import expit

        signal_names = [n for n in draws.parameter_names if n.startswith(("phi[", "pi["))]
        cols = [draws.parameter_names.index(n) for n in signal_names]
        signal = draws.draws[:, :, cols]
        rate = signal if meta["family"] == "FH" else expit(signal)
        estimates = [
            reports.summarize_chains(rate[:, :, i], aid) for i, aid in enumerate(area_ids)
        ]
        dataio.write_table_csv(
            out / "estimates.csv",
            ["area_id", "mean", "sd", "q2.5", "q16", "q84", "q97.5", "n_eff", "rhat"],
            [
                [
                    e.area_id, e.mean, e.sd,
                    e.quantiles[0.025], e.quantiles[0.16], e.quantiles[0.84], e.quantiles[0.975],
                    e.n_eff, e.rhat,
                ]
                for e in estimates
            ],
        )

        if args.persons:
            inputs.append(args.persons)
            persons = dataio.read_persons_csv(args.persons)
            missing = sorted({aid for aid in area_ids if aid not in district_map})
            if missing:
                raise DataError(f"no district mapping for areas: {missing}")
            directs = _district_directs(persons, district_map)
            populations = {a.area_id: a.population for a in areas}
            district_rows = reports.district_aggregate(
                rate,
                populations,
                district_map,
                {d: est.z_direct for d, est in directs.items()},
                area_ids=area_ids,
            )
            dataio.write_table_csv(
                out / "districts.csv",
                ["district_id", "estimate", "se", "q2.5", "q16", "q84", "q97.5", "bm_ratio", "direct", "direct_se"],
                [
                    [
                        d.district_id, d.estimate, d.se,
                        d.intervals[0.025], d.intervals[0.16], d.intervals[0.84], d.intervals[0.975],
                        d.bm_ratio, d.direct, directs[d.district_id].z_direct_se,
                    ]
                    for d in district_rows
                ],
            )
        else:
            _warn("no --persons given; skipping district benchmarking table")

    if args.geojson:
        inputs.append(args.geojson)
        collection = dataio.read_geojson(args.geojson)
        known = {f.get("properties", {}).get("area_id", f.get("id")) for f in collection.get("features", [])}
        unmatched = sorted(a for a in known if a not in set(area_ids))
        if unmatched:
            _warn(f"geojson features without estimates: {unmatched}")
        annotated = reports.emit_geojson(estimates or [], collection, contribution_rows)
        dataio.write_geojson(out / "map.geojson", annotated)

    dataio.write_manifest(
        out, "report",
        {"fit_dir": str(fit_dir), "areas": str(args.areas), "seed": draws.config.seed},
        inputs, started,
    )
    print(f"report written to {out}")
    return 0


def cmd_simulate(args) -> int:
    started = dataio.now_iso()
    try:
        raw = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{args.config}: invalid JSON: {exc}") from exc
    if args.seed is not None:
        raw["seed"] = args.seed
    raw = {k: (tuple(map(tuple, v)) if k == "covariate_dist" else tuple(v) if isinstance(v, list) else v) for k, v in raw.items()}
    try:
        config = simulate.SimConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{args.config}: {exc}") from exc

    out = _ensure_out(args.out)
    result = simulate.generate(config)
    dataio.write_persons_csv(out / "persons.csv", result.persons)
    dataio.write_areas_csv(out / "areas.csv", result.areas)
    (out / "truth.json").write_text(json.dumps(result.truth, indent=2, sort_keys=True))

    if args.validate:
        # each replication regenerates covariates and truth, so the check
        # averages (estimate - own truth) across replications
        reps = args.validate_reps
        errors = np.empty(reps)
        for r in range(reps):
            rep = simulate.generate(
                simulate.SimConfig(**{**raw, "seed": config.seed + 1000 + r})
            )
            weights = np.array([p.weight for p in rep.persons])
            status = np.array([float(p.poor) for p in rep.persons])
            errors[r] = weights @ status / weights.sum() - rep.truth["overall_poverty"]
        mc_se = errors.std(ddof=1) / np.sqrt(reps)
        z = errors.mean() / mc_se
        validation = {
            "replications": reps,
            "mean_estimation_error": float(errors.mean()),
            "mc_se": float(mc_se),
            "z_score": float(z),
            "unbiased_within_4se": bool(abs(z) < 4.0),
        }
        (out / "validation.json").write_text(json.dumps(validation, indent=2, sort_keys=True))
        print(
            f"validation: mean error {errors.mean():+.4f} (z = {z:.2f} "
            f"over {reps} replications)"
        )

    dataio.write_manifest(out, "simulate", {**raw, "seed": config.seed}, [args.config], started)
    print(f"synthetic survey with {len(result.persons)} persons written to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="povmap",
        description="Small-area multidimensional poverty mapping pipeline",
    )
    parser.add_argument("--version", action="version", version=f"povmap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_direct = sub.add_parser("direct", help="design-based direct estimation")
    p_direct.add_argument("--persons", required=True)
    p_direct.add_argument("--areas")
    p_direct.add_argument("--out", required=True)
    p_direct.set_defaults(func=cmd_direct)

    p_fit = sub.add_parser("fit", help="fit a hierarchical model by HMC")
    source = p_fit.add_mutually_exclusive_group(required=True)
    source.add_argument("--persons")
    source.add_argument("--design")
    p_fit.add_argument("--areas", required=True)
    p_fit.add_argument("--model", required=True, help="model config JSON")
    p_fit.add_argument("--design-effects", help="pooled design-effects JSON (with --design)")
    p_fit.add_argument("--chains", type=int, default=4)
    p_fit.add_argument("--iter", type=int, default=10_000)
    p_fit.add_argument("--warmup", type=int, default=5_000)
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--threads", type=int, default=None,
                       help="chain-level parallelism (default: POVMAP_THREADS or chains)")
    p_fit.add_argument("--out", required=True)
    p_fit.set_defaults(func=cmd_fit)

    p_cmp = sub.add_parser("compare", help="LOO-CV model comparison")
    p_cmp.add_argument("fit_dirs", nargs="+")
    p_cmp.add_argument("--out", required=True)
    p_cmp.set_defaults(func=cmd_compare)

    p_rep = sub.add_parser("report", help="posterior estimate tables and map data")
    p_rep.add_argument("fit_dir")
    p_rep.add_argument("--areas", required=True)
    p_rep.add_argument("--persons", help="persons CSV for district benchmarking")
    p_rep.add_argument("--geojson", help="feature collection to annotate")
    p_rep.add_argument("--district-map", help="area_id,district_id CSV overriding the areas table")
    p_rep.add_argument("--out", required=True)
    p_rep.set_defaults(func=cmd_report)

    p_sim = sub.add_parser("simulate", help="generate a synthetic survey")
    p_sim.add_argument("--config", required=True, help="simulation config JSON")
    p_sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_sim.add_argument("--validate", action="store_true",
                       help="run a design-unbiasedness check and report it")
    p_sim.add_argument("--validate-reps", type=int, default=200)
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (SamplerError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
