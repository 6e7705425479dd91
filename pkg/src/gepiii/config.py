"""Pipeline configuration: one YAML file, versioned by ``schema_version``.

Schema (version 1)::

    schema_version: 1
    seed: 1                      # propagates to GBT params and the blend optimiser
    preset: winner5              # optional: start from a shipped preset, then override
    synthetic: small             # optional: shipped spec name or spec file; generated
                                 # into <work_dir>/data when paths.data_dir is unset
    paths: {data_dir: ..., work_dir: ...}
    cleaning:
      timezone_correction: true
      max_gap_linear: 6
      rules: [{kind: constant_streak, min_len: 48}, ...]
    features: {recipe: winner5, holidays: holidays_us.txt}
    models:
      - name: gbt_a
        learner: gbt             # or linear
        params: {...}            # GbtParams fields
        folds: {kind: by_month, k: 4}
        subset: {key: building_meter, min_group_rows: 200}
        refit_full: true
    baselines: [hour_of_week, linear]
    blend: {optimize: true, p_grid: [0, 0.5, 1, 1.5, 2], granularity: 0.05,
            per_meter: false, weights: null, p: 1.0}
    split: {public_year: 2017, private_year: 2018, excluded_site_ids: []}
    truth: ground_truth.csv      # relative to the data dir; scored when present

Relative paths resolve against the working directory of the process.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .features import FeatureError, get_recipe
from .gbt import GbtParams
from .gbt.cv import SUBSET_KEYS
from .preprocess import CleaningRule, validate_rules
from .scoring import SplitSpec

SCHEMA_VERSION = 1
PRESETS = ("winner1", "winner5", "baseline")
SYNTHETIC_SPECS = ("small",)
BASELINES = ("hour_of_week", "linear")
FOLD_KINDS = ("by_month", "by_row_block")
TOP_LEVEL = {"schema_version", "name", "seed", "preset", "synthetic", "paths", "cleaning",
             "features", "models", "baselines", "blend", "split", "truth"}


class ConfigError(ValueError):
    pass


def _preset_text(name: str) -> str:
    return resources.files("gepiii").joinpath("presets", f"{name}.yaml").read_text()


def synthetic_spec_path(ref: str):
    """A shipped spec name (``small``) or a path to a spec file."""
    if ref in SYNTHETIC_SPECS:
        return resources.files("gepiii").joinpath("presets", f"{ref}.yaml")
    path = Path(ref)
    if not path.exists():
        raise ConfigError(f"synthetic spec {ref!r} is neither a shipped spec {SYNTHETIC_SPECS} nor a file")
    return path


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _section(data: dict, name: str, allowed: set) -> dict:
    sec = data.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected a mapping")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    return sec


@dataclass
class ModelConfig:
    name: str
    learner: str = "gbt"
    params: dict = field(default_factory=dict)
    folds: dict = field(default_factory=lambda: {"kind": "by_month", "k": 4})
    subset: dict = field(default_factory=lambda: {"key": "none"})
    refit_full: bool = False

    def gbt_params(self, seed: int) -> GbtParams:
        return GbtParams.from_dict({"seed": seed, **self.params})

    @classmethod
    def from_dict(cls, data: dict, seed: int) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"model {data.get('name')!r}: unknown keys {sorted(unknown)}")
        if "name" not in data:
            raise ConfigError("every model needs a name")
        m = cls(**{**data, "folds": {"kind": "by_month", "k": 4, **(data.get("folds") or {})},
                   "subset": {"key": "none", **(data.get("subset") or {})}})
        if m.learner not in ("gbt", "linear"):
            raise ConfigError(f"model {m.name!r}: unknown learner {m.learner!r}")
        if m.folds["kind"] not in FOLD_KINDS or int(m.folds["k"]) < 2:
            raise ConfigError(f"model {m.name!r}: folds need kind in {FOLD_KINDS} and k >= 2")
        if m.subset["key"] not in SUBSET_KEYS:
            raise ConfigError(f"model {m.name!r}: unknown subset key {m.subset['key']!r}")
        try:
            m.gbt_params(seed)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"model {m.name!r}: {exc}") from exc
        return m


@dataclass
class PipelineConfig:
    name: str = "custom"
    seed: int = 0
    synthetic: str | None = None
    data_dir: str | None = None
    work_dir: str = "work"
    cleaning: dict = field(default_factory=dict)
    features: dict = field(default_factory=lambda: {"recipe": "minimal"})
    models: list[ModelConfig] = field(default_factory=list)
    baselines: list[str] = field(default_factory=lambda: list(BASELINES))
    blend: dict = field(default_factory=dict)
    split: SplitSpec = field(default_factory=SplitSpec)
    truth: str | None = "ground_truth.csv"

    # -- derived views -----------------------------------------------------
    @property
    def rules(self) -> list[CleaningRule]:
        return [CleaningRule.from_dict(r) for r in self.cleaning.get("rules", [])]

    @property
    def recipe(self):
        return get_recipe(self.features.get("recipe", "minimal"))

    def section(self, stage: str) -> dict:
        """The part of the config a stage depends on (used for cache keys)."""
        return {
            "synth": {"synthetic": self.synthetic},
            "ingest": {},
            "clean": self.cleaning,
            "featurize": self.features,
            "train": {"seed": self.seed, "models": [asdict(m) for m in self.models],
                      "baselines": self.baselines},
            "predict": {},
            "blend": {"seed": self.seed, "blend": self.blend},
            "score": {"split": {"public_year": self.split.public_year,
                                "private_year": self.split.private_year,
                                "excluded_site_ids": sorted(self.split.excluded_site_ids)},
                      "truth": self.truth},
        }[stage]


def parse_config(data: dict, seed: int | None = None) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    if "preset" in data:
        preset = data["preset"]
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {list(PRESETS)}")
        base = yaml.safe_load(_preset_text(preset))
        data = _merge(base, {k: v for k, v in data.items() if k != "preset"})
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    unknown = set(data) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")

    seed = int(data.get("seed", 0) if seed is None else seed)
    paths = _section(data, "paths", {"data_dir", "work_dir"})
    cleaning = _section(data, "cleaning", {"rules", "timezone_correction", "max_gap_linear"})
    features = _section(data, "features", {"recipe", "holidays"})
    blend = _section(data, "blend", {"optimize", "p_grid", "granularity", "per_meter", "weights", "p"})
    split = _section(data, "split", {"public_year", "private_year", "excluded_site_ids"})

    try:
        validate_rules([CleaningRule.from_dict(r) for r in cleaning.get("rules", [])])
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cleaning: {exc}") from exc
    try:
        get_recipe(features.get("recipe", "minimal"))
    except (FeatureError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    models = [ModelConfig.from_dict(m, seed) for m in data.get("models") or []]
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        raise ConfigError("model names must be unique")
    baselines = list(data.get("baselines", BASELINES) or [])
    bad = set(baselines) - set(BASELINES)
    if bad:
        raise ConfigError(f"unknown baselines {sorted(bad)}; known: {list(BASELINES)}")
    if not models and not baselines:
        raise ConfigError("config defines no models")
    if blend.get("weights") is not None and len(blend["weights"]) != len(models):
        raise ConfigError("blend.weights needs one weight per model")
    synthetic = data.get("synthetic")
    if synthetic is not None:
        synthetic_spec_path(str(synthetic))

    return PipelineConfig(
        name=str(data.get("name", "custom")),
        seed=seed,
        synthetic=None if synthetic is None else str(synthetic),
        data_dir=paths.get("data_dir"),
        work_dir=str(paths.get("work_dir") or "work"),
        cleaning={"timezone_correction": True, "max_gap_linear": 6, "rules": [], **cleaning},
        features={"recipe": "minimal", "holidays": None, **features},
        models=models,
        baselines=baselines,
        blend={"optimize": True, "p_grid": [0.0, 0.5, 1.0, 1.5, 2.0], "granularity": 0.05,
               "per_meter": False, "weights": None, "p": 1.0, **blend},
        split=SplitSpec.from_dict(split),
        truth=data.get("truth", "ground_truth.csv"),
    )


def load_config(ref: str, seed: int | None = None) -> PipelineConfig:
    """Load a config file, or a shipped preset by name."""
    if ref in PRESETS and not Path(ref).exists():
        data = yaml.safe_load(_preset_text(ref))
    else:
        path = Path(ref)
        if not path.exists():
            raise ConfigError(f"config {ref!r} is neither a file nor a preset {list(PRESETS)}")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return parse_config(data, seed)
