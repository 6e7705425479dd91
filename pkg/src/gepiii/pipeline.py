"""Staged, cached execution of the full loop inside one work directory.

Layout::

    <work_dir>/data/                 synthetic inputs (when generated)
    <work_dir>/stages/<stage>/       outputs + report.json + stamp.json
    <work_dir>/submission.csv        blended submission
    <work_dir>/.lock                 one process per work dir

A stage is skipped when its ``stamp.json`` carries the current cache key and
all of its outputs exist. The key hashes the stage's config section, the key
of the stage before it and, for stages that read input files, their bytes.
A failed stage leaves a ``FAILED`` marker and no stamp.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import PipelineConfig, synthetic_spec_path
from .dataset import (
    BUILDING_FILE_NAMES,
    DatasetError,
    load_submission,
    load_test_rows,
    load_training_bundle,
    read_weather,
    write_rejects,
    write_submission,
)
from .ensemble import BlendSpec, blend, optimize_weights
from .features import FeatureMatrix, build_matrix, load_holiday_calendar
from .gbt import (
    CvEnsemble,
    LinearModel,
    SubsetPlan,
    fit_cv_ensemble,
    fit_hour_of_week_baseline,
    fit_linear_baseline,
    make_fold_plan,
    predict_linear,
)
from .preprocess import apply_cleaning, correct_timezones, estimate_site_offsets, impute_weather
from .scoring import score_submission, validate_predictions
from .synthetic import SyntheticSpec, generate_synthetic

logger = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "clean", "featurize", "train", "predict", "blend", "score")
STAMP = "stamp.json"
REPORT = "report.json"
CHUNK = 1 << 20


class StageError(RuntimeError):
    """A stage failed; ``stage`` names it and ``__cause__`` holds the cause."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {cause}")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(CHUNK), b""):
            h.update(block)
    return h.hexdigest()


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def to_kwh(log_pred: np.ndarray) -> np.ndarray:
    return np.clip(np.expm1(log_pred), 0.0, None)


@dataclass
class StageResult:
    stage: str
    status: str  # "ran" or "cached"
    seconds: float
    report: dict


class Pipeline:
    def __init__(self, config: PipelineConfig, work_dir=None):
        self.config = config
        self.work = Path(work_dir or config.work_dir).resolve()
        self.keys: dict[str, str] = {}

    # -- paths ---------------------------------------------------------------
    @property
    def data_dir(self) -> Path:
        if self.config.data_dir is not None:
            return Path(self.config.data_dir).resolve()
        if self.config.synthetic is not None:
            return self.work / "data"
        raise DatasetError("no data directory configured (paths.data_dir or synthetic)")

    def stage_dir(self, stage: str) -> Path:
        return self.work / "stages" / stage

    @property
    def submission_path(self) -> Path:
        return self.work / "submission.csv"

    def stages(self) -> list[str]:
        uses_synth = self.config.synthetic is not None and self.config.data_dir is None
        return [s for s in STAGES if s != "synth" or uses_synth]

    # -- caching ---------------------------------------------------------------
    def _input_files(self, stage: str) -> list[Path]:
        if stage == "synth":
            return [Path(str(synthetic_spec_path(self.config.synthetic)))]
        d = self.data_dir
        if stage == "ingest":
            names = ["train.csv", "weather_train.csv", "weather_test.csv", "test.csv"]
            names.append(next((n for n in BUILDING_FILE_NAMES if (d / n).exists()), BUILDING_FILE_NAMES[0]))
            return [d / n for n in names]
        if stage == "featurize" and self.config.features.get("holidays"):
            return [d / self.config.features["holidays"]]
        if stage == "score" and self.config.truth and (d / self.config.truth).exists():
            return [d / self.config.truth]
        return []

    def key(self, stage: str) -> str:
        order = self.stages()
        prev = order[order.index(stage) - 1] if order.index(stage) else None
        files = {}
        for p in self._input_files(stage):
            files[p.name] = file_digest(p) if p.exists() else None
        return _digest({
            "stage": stage,
            "version": __version__,
            "section": self.config.section(stage),
            "previous": self.keys.get(prev) if prev else None,
            "files": files,
        })

    def _cached(self, stage: str, key: str) -> dict | None:
        stamp = self.stage_dir(stage) / STAMP
        if not stamp.exists():
            return None
        meta = json.loads(stamp.read_text())
        if meta.get("key") != key:
            return None
        if not all((self.stage_dir(stage) / o).exists() for o in meta.get("outputs", [])):
            return None
        if stage == "synth" and not all((self.data_dir / f).exists() for f in meta["report"]["files"]):
            return None
        return meta

    # -- driver ------------------------------------------------------------------
    def run(self, until: str = "score", force: bool = False) -> list[StageResult]:
        order = self.stages()
        if until not in order:
            raise ValueError(f"unknown stage {until!r}")
        results = []
        for stage in order[: order.index(until) + 1]:
            t0 = time.perf_counter()
            key = self.key(stage)
            self.keys[stage] = key
            meta = None if force else self._cached(stage, key)
            if meta is not None:
                logger.info("stage %s: cached", stage)
                results.append(StageResult(stage, "cached", 0.0, meta.get("report", {})))
                continue
            sdir = self.stage_dir(stage)
            if sdir.exists():
                shutil.rmtree(sdir)
            sdir.mkdir(parents=True)
            logger.info("stage %s: running", stage)
            try:
                report, outputs = getattr(self, f"_run_{stage}")(sdir)
            except Exception as exc:
                (sdir / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
                raise StageError(stage, exc) from exc
            report = {"stage": stage, **report}
            _write_json(sdir / REPORT, report)
            _write_json(sdir / STAMP, {"key": key, "outputs": [*outputs, REPORT], "report": report})
            dt = time.perf_counter() - t0
            logger.info("stage %s: done in %.1fs", stage, dt)
            results.append(StageResult(stage, "ran", dt, report))
        return results

    # -- stages --------------------------------------------------------------------
    def _run_synth(self, sdir: Path):
        spec = SyntheticSpec.from_file(synthetic_spec_path(self.config.synthetic))
        spec.validate()
        out = self.data_dir
        if out.exists():
            shutil.rmtree(out)
        manifest = generate_synthetic(spec, out)
        files = {r["name"]: r["rows"] for r in manifest if r.get("record") == "file"}
        (sdir / "spec.json").write_text(json.dumps({"synthetic": self.config.synthetic}) + "\n")
        return {"data_dir": str(out), "files": files}, ["spec.json"]

    def _run_ingest(self, sdir: Path):
        d = self.data_dir
        bundle = load_training_bundle(d)
        wt_path = d / "weather_test.csv"
        if not wt_path.exists():
            raise DatasetError(f"missing required file {wt_path}")
        weather_test, wt_rejects = read_weather(wt_path)
        test = load_test_rows(d / "test.csv")
        unknown = ~test["building_id"].isin(bundle.buildings["building_id"])
        if unknown.any():
            raise DatasetError(
                f"test.csv references buildings without metadata: "
                f"{sorted(test.loc[unknown, 'building_id'].unique())[:10]}"
            )
        weather = pd.concat([bundle.weather, weather_test], ignore_index=True)
        dup = weather.duplicated(["site_id", "timestamp"], keep="first")
        weather = weather.loc[~dup].sort_values(["site_id", "timestamp"]).reset_index(drop=True)
        rejects = [*bundle.rejects, *wt_rejects]
        bundle.readings.to_parquet(sdir / "readings.parquet")
        bundle.buildings.to_parquet(sdir / "buildings.parquet")
        weather.to_parquet(sdir / "weather.parquet")
        test.to_parquet(sdir / "test_rows.parquet")
        write_rejects(rejects, sdir / "rejects.jsonl")
        by_file: dict[str, dict[str, int]] = {}
        for r in rejects:
            by_file.setdefault(r.file, {"reject": 0, "flag": 0})[r.severity] += 1
        report = {
            "rows": {"readings": len(bundle.readings), "buildings": len(bundle.buildings),
                     "weather": len(weather), "test": len(test)},
            "rejects": by_file,
            "duplicate_weather_rows_dropped": int(dup.sum()),
        }
        return report, ["readings.parquet", "buildings.parquet", "weather.parquet",
                        "test_rows.parquet", "rejects.jsonl"]

    def _load(self, stage: str, name: str) -> pd.DataFrame:
        return pd.read_parquet(self.stage_dir(stage) / name)

    def _run_clean(self, sdir: Path):
        cfg = self.config.cleaning
        readings = self._load("ingest", "readings.parquet")
        buildings = self._load("ingest", "buildings.parquet")
        weather = self._load("ingest", "weather.parquet")
        test = self._load("ingest", "test_rows.parquet")
        cleaned, report = apply_cleaning(readings, self.config.rules, buildings)
        offsets = estimate_site_offsets(weather) if cfg.get("timezone_correction", True) else {}
        if offsets:
            weather = correct_timezones(weather, offsets)
        start = min(readings["timestamp"].min(), test["timestamp"].min())
        end = max(readings["timestamp"].max(), test["timestamp"].max())
        grid = impute_weather(weather, int(cfg.get("max_gap_linear", 6)), start, end)
        cleaned.to_parquet(sdir / "readings_clean.parquet")
        grid.frame.to_parquet(sdir / "weather_grid.parquet")
        out = {
            "cleaning": report.to_dict(),
            "timezone_offsets": {str(k): v for k, v in offsets.items()},
            "weather_imputed_cells": grid.imputed_count,
            "weather_unavailable": [list(u) for u in grid.unavailable],
        }
        return out, ["readings_clean.parquet", "weather_grid.parquet"]

    def _calendars(self):
        name = self.config.features.get("holidays")
        if not name:
            return None
        path = self.data_dir / name
        if not path.exists():
            raise DatasetError(f"holiday calendar {path} not found")
        return {"default": load_holiday_calendar(path)}

    def _run_featurize(self, sdir: Path):
        readings = self._load("clean", "readings_clean.parquet")
        grid = self._load("clean", "weather_grid.parquet")
        buildings = self._load("ingest", "buildings.parquet")
        test = self._load("ingest", "test_rows.parquet")
        recipe = self.config.recipe
        calendars = self._calendars()
        train = build_matrix(readings, grid, buildings, recipe, calendars)
        test_m = build_matrix(test, grid, buildings, recipe, calendars,
                              encoders=train.encoders, fill_values=train.fill_values)
        train.save(sdir / "train_matrix.pkl")
        test_m.save(sdir / "test_matrix.pkl")
        report = {
            "recipe": recipe.name,
            "features": train.names,
            "rows_in": len(readings),
            "rows_out": train.n_rows,
            "rows_dropped": len(readings) - train.n_rows,
            "test_rows": test_m.n_rows,
        }
        return report, ["train_matrix.pkl", "test_matrix.pkl"]

    def _train_matrix(self) -> FeatureMatrix:
        return FeatureMatrix.load(self.stage_dir("featurize") / "train_matrix.pkl")

    def _test_matrix(self) -> FeatureMatrix:
        return FeatureMatrix.load(self.stage_dir("featurize") / "test_matrix.pkl")

    def _run_train(self, sdir: Path):
        train = self._train_matrix()
        report: dict = {"models": {}, "baselines": []}
        outputs = []
        for m in self.config.models:
            t0 = time.perf_counter()
            plan = make_fold_plan(train, m.folds["kind"], int(m.folds["k"]))
            ens = fit_cv_ensemble(
                train, m.gbt_params(self.config.seed), plan, SubsetPlan(m.subset["key"]),
                learner=m.learner, min_group_rows=int(m.subset.get("min_group_rows", 200)),
                refit_full=m.refit_full,
            )
            ens.save(sdir / m.name)
            oof_rmse = float(np.sqrt(np.mean((ens.oof - train.target) ** 2)))
            report["models"][m.name] = {
                "n_models": len(ens.models) + len(ens.fallback),
                "oof_rmsle": oof_rmse,
                "seconds": round(time.perf_counter() - t0, 3),
                "warnings": ens.warnings[:20],
            }
            outputs.append(f"{m.name}/ensemble.json")
        if "linear" in self.config.baselines:
            lin = fit_linear_baseline(train)
            _write_json(sdir / "baseline_linear.json", lin.to_dict())
            outputs.append("baseline_linear.json")
            report["baselines"].append("linear")
        if "hour_of_week" in self.config.baselines:
            report["baselines"].append("hour_of_week")
        return report, outputs

    def _run_predict(self, sdir: Path):
        test = self._test_matrix()
        train = self._train_matrix()
        row_id = test.keys["row_id"].to_numpy()
        oof = {}
        report = {"members": [], "baselines": []}
        outputs = []
        for m in self.config.models:
            ens = CvEnsemble.load(self.stage_dir("train") / m.name)
            write_submission(row_id, to_kwh(ens.predict(test)), sdir / f"{m.name}.csv")
            oof[m.name] = to_kwh(ens.oof)
            report["members"].append(m.name)
            outputs.append(f"{m.name}.csv")
        if "linear" in self.config.baselines:
            lin = LinearModel.from_dict(json.loads((self.stage_dir("train") / "baseline_linear.json").read_text()))
            write_submission(row_id, to_kwh(predict_linear(lin, test)), sdir / "baseline_linear.csv")
            report["baselines"].append("linear")
            outputs.append("baseline_linear.csv")
        if "hour_of_week" in self.config.baselines:
            readings = self._load("clean", "readings_clean.parquet")
            how = fit_hour_of_week_baseline(readings)
            write_submission(row_id, to_kwh(how.predict(test.keys)), sdir / "baseline_hour_of_week.csv")
            report["baselines"].append("hour_of_week")
            outputs.append("baseline_hour_of_week.csv")
        if oof:
            frame = train.keys[["building_id", "meter", "timestamp"]].copy()
            frame["actual"] = to_kwh(train.target)
            for name, v in oof.items():
                frame[name] = v
            frame.to_parquet(sdir / "oof.parquet")
            outputs.append("oof.parquet")
        return report, outputs

    def _member_files(self) -> dict[str, Path]:
        pdir = self.stage_dir("predict")
        if self.config.models:
            return {m.name: pdir / f"{m.name}.csv" for m in self.config.models}
        return {f"baseline_{b}": pdir / f"baseline_{b}.csv" for b in self.config.baselines}

    def _run_blend(self, sdir: Path):
        cfg = self.config.blend
        files = self._member_files()
        members = {name: load_submission(p) for name, p in files.items()}
        row_id = next(iter(members.values()))["row_id"].to_numpy()
        preds = np.vstack([f["meter_reading"].to_numpy(dtype=float) for f in members.values()])
        test = self._test_matrix()
        meters = pd.Series(test.keys["meter"].to_numpy(), index=test.keys["row_id"].to_numpy())
        meters = meters.loc[row_id].to_numpy()
        names = list(members)
        if len(names) == 1:
            spec = BlendSpec(names, [1.0], 1.0)
        elif cfg.get("weights") is not None:
            spec = BlendSpec(names, cfg["weights"], cfg.get("p", 1.0))
        elif cfg.get("optimize", True):
            oof = pd.read_parquet(self.stage_dir("predict") / "oof.parquet")
            spec = optimize_weights(
                {n: oof[n].to_numpy() for n in names}, oof["actual"].to_numpy(),
                p_grid=cfg["p_grid"], granularity=float(cfg["granularity"]),
                meters=oof["meter"].to_numpy(), per_meter=bool(cfg.get("per_meter")),
                seed=self.config.seed,
            )
        else:
            spec = BlendSpec(names, np.ones(len(names)), cfg.get("p", 1.0))
        out = blend(spec, preds, meters)
        write_submission(row_id, out, sdir / "submission.csv")
        shutil.copyfile(sdir / "submission.csv", self.submission_path)
        _write_json(sdir / "blend_spec.json", spec.to_dict())
        return {"blend": spec.to_dict(), "rows": int(len(row_id))}, ["submission.csv", "blend_spec.json"]

    def _run_score(self, sdir: Path):
        truth_name = self.config.truth
        truth_path = self.data_dir / truth_name if truth_name else None
        if truth_path is None or not truth_path.exists():
            logger.info("no ground truth available; scoring skipped")
            return {"skipped": "no ground truth"}, []
        test = self._load("ingest", "test_rows.parquet")
        buildings = self._load("ingest", "buildings.parquet")
        test = test.sort_values("row_id").reset_index(drop=True)
        test["site_id"] = test["building_id"].map(buildings.set_index("building_id")["site_id"])
        truth = validate_predictions(load_submission(truth_path), len(test))
        scores = {}
        candidates = {"submission": self.stage_dir("blend") / "submission.csv"}
        pdir = self.stage_dir("predict")
        candidates.update({m.name: pdir / f"{m.name}.csv" for m in self.config.models})
        candidates.update({f"baseline_{b}": pdir / f"baseline_{b}.csv" for b in self.config.baselines})
        for name, path in candidates.items():
            pred = validate_predictions(load_submission(path), len(test))
            scores[name] = score_submission(pred, truth, test, self.config.split).to_dict()
        _write_json(sdir / "scores.json", scores)
        return {"scores": scores}, ["scores.json"]
