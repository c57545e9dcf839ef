"""File formats: person/area/design CSVs, draws persistence, manifests.

All floats are written with ``repr`` (shortest round-trip), which keeps
repeated runs byte-identical and lossless through read/write cycles.
"""

from __future__ import annotations

import csv
import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .hmc import PosteriorDraws, SamplerConfig
from .records import AreaDesignSummary, AreaRecord, PersonRecord, validate_persons


class SchemaError(ValueError):
    """File or config does not match its schema (usage-level problem)."""


class DataError(ValueError):
    """Well-formed file with invalid values (data-level problem)."""


PERSON_COLUMNS = ["area_id", "psu_id", "household_id", "person_id", "weight", "poor"]
AREA_COLUMNS = ["area_id", "district_id", "population"]
DESIGN_PREFIX = ["area_id", "n_households", "n_adjusted", "z_direct", "z_direct_se", "D_smoothed"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _require_columns(header, required, path):
    for col in required:
        if col not in header:
            raise SchemaError(f"{path}: missing required column {col!r}")


# ---------------------------------------------------------------------------
# persons
# ---------------------------------------------------------------------------


def write_persons_csv(path, persons: list[PersonRecord]):
    k = len(persons[0].scores)
    header = PERSON_COLUMNS + [f"score_{j + 1}" for j in range(k)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p in persons:
            writer.writerow(
                [p.area_id, p.psu_id, p.household_id, p.person_id, _fmt(p.weight), p.poor]
                + [_fmt(s) for s in p.scores]
            )


def read_persons_csv(path) -> list[PersonRecord]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file")
        _require_columns(header, PERSON_COLUMNS, path)
        score_cols = [c for c in header if c.startswith("score_")]
        expected = PERSON_COLUMNS + [f"score_{j + 1}" for j in range(len(score_cols))]
        if header != expected:
            raise SchemaError(
                f"{path}: expected columns {','.join(expected)}, got {','.join(header)}"
            )
        idx = {c: i for i, c in enumerate(header)}
        persons = []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{row_no}: expected {len(header)} fields, got {len(row)}")
            try:
                persons.append(
                    PersonRecord(
                        area_id=row[idx["area_id"]],
                        psu_id=row[idx["psu_id"]],
                        household_id=row[idx["household_id"]],
                        person_id=row[idx["person_id"]],
                        weight=float(row[idx["weight"]]),
                        poor=int(row[idx["poor"]]),
                        scores=tuple(float(row[idx[c]]) for c in score_cols),
                    )
                )
            except ValueError as exc:
                raise DataError(f"{path}:{row_no}: {exc}") from exc
    if not persons:
        raise DataError(f"{path}: no person rows")
    try:
        validate_persons(persons)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return persons


# ---------------------------------------------------------------------------
# areas
# ---------------------------------------------------------------------------


def write_areas_csv(path, areas: list[AreaRecord]):
    cov_names = list(areas[0].covariates)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AREA_COLUMNS + cov_names)
        for a in areas:
            writer.writerow(
                [a.area_id, a.district_id, _fmt(a.population)]
                + [_fmt(a.covariates[c]) for c in cov_names]
            )


def read_areas_csv(path) -> list[AreaRecord]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        _require_columns(reader.fieldnames, ["area_id"], path)
        cov_names = [c for c in reader.fieldnames if c not in AREA_COLUMNS]
        areas = []
        for row_no, row in enumerate(reader, start=2):
            try:
                areas.append(
                    AreaRecord(
                        area_id=row["area_id"],
                        district_id=row.get("district_id", "") or "",
                        population=float(row["population"]) if row.get("population") else 0.0,
                        covariates={c: float(row[c]) for c in cov_names},
                    )
                )
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{row_no}: {exc}") from exc
    if not areas:
        raise DataError(f"{path}: no area rows")
    return areas


# ---------------------------------------------------------------------------
# design summaries
# ---------------------------------------------------------------------------


def _triangle_columns(k: int) -> list[str]:
    return [f"sigma_{a + 1}_{b + 1}" for a in range(k) for b in range(a + 1)]


def write_design_csv(path, summaries: list[AreaDesignSummary], k: int):
    header = (
        DESIGN_PREFIX
        + [f"y_{j + 1}" for j in range(k)]
        + _triangle_columns(k)
        + ["single_psu"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in summaries:
            row = [
                s.area_id,
                s.n_households,
                _fmt(s.n_adjusted),
                _fmt(s.z_direct),
                _fmt(s.z_direct_se),
                _fmt(s.D_smoothed),
            ]
            if s.y_direct is None:
                row += [""] * k + [""] * (k * (k + 1) // 2)
            else:
                row += [_fmt(v) for v in s.y_direct]
                row += [_fmt(s.sigma_hat[a, b]) for a in range(k) for b in range(a + 1)]
            row.append(int(s.single_psu))
            writer.writerow(row)


def read_design_csv(path) -> tuple[list[AreaDesignSummary], int]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        _require_columns(reader.fieldnames, DESIGN_PREFIX, path)
        k = len([c for c in reader.fieldnames if c.startswith("y_")])
        summaries = []
        for row_no, row in enumerate(reader, start=2):
            try:
                y = sigma = None
                if k and row[f"y_1"] != "":
                    y = np.array([float(row[f"y_{j + 1}"]) for j in range(k)])
                    sigma = np.zeros((k, k))
                    for a in range(k):
                        for b in range(a + 1):
                            sigma[a, b] = sigma[b, a] = float(row[f"sigma_{a + 1}_{b + 1}"])
                summaries.append(
                    AreaDesignSummary(
                        area_id=row["area_id"],
                        n_households=int(row["n_households"]),
                        n_adjusted=float(row["n_adjusted"]),
                        z_direct=float(row["z_direct"]),
                        z_direct_se=float(row["z_direct_se"]),
                        D_smoothed=float(row["D_smoothed"]),
                        single_psu=bool(int(row.get("single_psu", "0") or 0)),
                        y_direct=y,
                        sigma_hat=sigma,
                    )
                )
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{row_no}: {exc}") from exc
    if not summaries:
        raise DataError(f"{path}: no design rows")
    return summaries, k


# ---------------------------------------------------------------------------
# draws
# ---------------------------------------------------------------------------


def write_draws(out_dir, draws: PosteriorDraws):
    out_dir = Path(out_dir)
    with open(out_dir / "draws.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "iter"] + draws.parameter_names)
        for c in range(draws.n_chains):
            for i in range(draws.n_kept):
                writer.writerow([c, i] + [repr(float(v)) for v in draws.draws[c, i]])
    sidecar = {
        "step_size": draws.step_size.tolist(),
        "mass_diag": draws.mass_diag.tolist(),
        "divergence_count": draws.divergence_count.tolist(),
        "config": draws.config.__dict__,
        "parameter_names": draws.parameter_names,
    }
    (out_dir / "sampler.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def read_draws(fit_dir) -> PosteriorDraws:
    fit_dir = Path(fit_dir)
    sidecar = json.loads((fit_dir / "sampler.json").read_text())
    config = SamplerConfig(**sidecar["config"])
    names = sidecar["parameter_names"]
    raw = np.loadtxt(fit_dir / "draws.csv", delimiter=",", skiprows=1, usecols=range(2, 2 + len(names)), ndmin=2)
    chains = config.chains
    kept = config.iterations - config.warmup
    return PosteriorDraws(
        draws=raw.reshape(chains, kept, len(names)),
        parameter_names=names,
        divergence_count=np.array(sidecar["divergence_count"]),
        step_size=np.array(sidecar["step_size"]),
        mass_diag=np.array(sidecar["mass_diag"]),
        config=config,
    )


def write_matrix_csv(path, matrix: np.ndarray, columns: list[str]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in np.atleast_2d(matrix):
            writer.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\n").split(",")
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2), header


def write_table_csv(path, header: list[str], rows: list[list]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# model config and manifest
# ---------------------------------------------------------------------------

_MODEL_CONFIG_KEYS = {"family", "covariates", "K", "priors", "name"}
_PRIOR_KEYS = {"coeff_scale", "sd_scale"}


def load_model_config(path) -> dict:
    """Parse and validate a model configuration JSON; unknown keys rejected."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: model config must be a JSON object")
    unknown = set(raw) - _MODEL_CONFIG_KEYS
    if unknown:
        raise SchemaError(f"{path}: unknown model config keys: {sorted(unknown)}")
    if "family" not in raw:
        raise SchemaError(f"{path}: model config needs a 'family'")
    priors = raw.get("priors", {})
    if not isinstance(priors, dict) or set(priors) - _PRIOR_KEYS:
        raise SchemaError(f"{path}: priors accepts only {sorted(_PRIOR_KEYS)}")
    raw.setdefault("covariates", [])
    raw.setdefault("K", 1)
    raw["priors"] = {"coeff_scale": 5.0, "sd_scale": 5.0, **priors}
    return raw


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command: str, config: dict, inputs: list, started_at: str):
    from . import __version__

    payload = {
        "command": command,
        "version": __version__,
        "config": config,
        "config_hash": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()
        ).hexdigest(),
        "inputs": [
            {"path": str(p), "sha256": file_digest(p)} for p in inputs
        ],
        "seed": config.get("seed"),
        "started_at": started_at,
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
    (Path(out_dir) / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def read_geojson(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid GeoJSON: {exc}") from exc


def write_geojson(path, collection: dict):
    Path(path).write_text(json.dumps(collection, indent=2))
