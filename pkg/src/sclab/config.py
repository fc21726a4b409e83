"""JSON experiment configuration and method presets.

Every section is optional; missing keys take the defaults of the matching
dataclass.  See README.md for the full schema.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .data import ToyDatasetSpec, default_toy_gmm, symmetric_two_class_gmm
from .errors import ConfigError
from .evaluation import GridSpec
from .guidance import GuidanceConfig
from .losses import LossWeights, SGLDConfig
from .sde import NoiseSchedule, SamplerConfig
from .training import ModelShape, TrainConfig

CLASSIFIER_PRESETS = ("cg", "cg-sc-labeled", "cg-sc-all", "cg-dlsm", "cg-jem", "cg-ls", "cg-jr")
COND_PRESETS = ("cond", "cfg-labeled", "cfg-all")
PRESETS = CLASSIFIER_PRESETS + COND_PRESETS

# the one loss weight each classifier preset switches on, with its default value
_PRESET_WEIGHT = {
    "cg": None,
    "cg-sc-labeled": ("lambda_sc", 1.0),
    "cg-sc-all": ("lambda_sc", 1.0),
    "cg-dlsm": ("lambda_dlsm", 1.0),
    "cg-jem": ("lambda_jem", 1.0),
    "cg-ls": ("label_smoothing_eps", 0.1),
    "cg-jr": ("lambda_jr", 0.01),
}
_CLASSIFIER_MODES = ("cg", "classifier-only-cond", "classifier-only-uncond")
_DEFAULT_MODE = {"cond": "cond", "cfg-labeled": "cfg", "cfg-all": "cfg"}


@dataclass(frozen=True)
class DataConfig:
    kind: str = "default"            # "default" | "symmetric"
    std: float = 0.8
    offset: float = 2.0
    n_train: int = 2000
    n_test: int = 2000
    labeled_fraction: float = 1.0
    seed: int | None = None          # None: use the experiment seed

    def gmm(self):
        if self.kind == "default":
            return default_toy_gmm(self.std)
        if self.kind == "symmetric":
            return symmetric_two_class_gmm(self.offset, self.std)
        raise ConfigError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class EvalConfig:
    t: float = 0.0
    k: int = 5
    n_buckets: int = 20
    grid: GridSpec = GridSpec()


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str
    seed: int = 0
    data: DataConfig = DataConfig()
    schedule: NoiseSchedule = NoiseSchedule()
    model: ModelShape = ModelShape()
    train_score: TrainConfig = TrainConfig()
    train_classifier: TrainConfig = TrainConfig()
    train_cond: TrainConfig = TrainConfig()
    loss_weights: LossWeights = LossWeights()
    sgld: SGLDConfig = SGLDConfig()
    p_uncond: float = 0.1
    guidance: GuidanceConfig = GuidanceConfig()
    sampler: SamplerConfig = SamplerConfig()
    n_samples_per_class: int = 500
    eval: EvalConfig = EvalConfig()

    @property
    def uses_classifier(self):
        return self.preset in CLASSIFIER_PRESETS

    @property
    def sc_data(self):
        return "labeled" if self.preset == "cg-sc-labeled" else "all"

    @property
    def cond_mode(self):
        return self.preset

    def dataset_spec(self):
        seed = self.seed if self.data.seed is None else self.data.seed
        try:
            return ToyDatasetSpec(self.data.gmm(), self.data.n_train, self.data.n_test,
                                  self.data.labeled_fraction, seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def stage_seed(self, stage):
        """Integer seed for one pipeline stage, derived from the experiment seed."""
        stages = ("score", "classifier", "cond", "sample")
        ss = np.random.SeedSequence([self.seed, stages.index(stage)])
        return int(ss.generate_state(1)[0])

    def pipeline(self):
        steps = ["gen-data"]
        if self.uses_classifier:
            steps += ["train-score", "train-classifier"]
        else:
            steps += ["train-cond"]
        return steps + ["sample", "eval"]

    def to_dict(self):
        return dataclasses.asdict(self)


def _build(cls, section, name):
    if section is None:
        return cls()
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r}: {exc}") from None


def _train_config(section, name, labeled_fraction, seed):
    section = dict(section or {})
    section.setdefault("labeled_fraction", labeled_fraction)
    section.setdefault("seed", seed)
    return _build(TrainConfig, section, name)


def _resolve_weights(preset, raw):
    raw = dict(raw or {})
    spec = _PRESET_WEIGHT.get(preset)
    if spec is not None:
        key, default = spec
        raw.setdefault(key, default)
    weights = _build(LossWeights, raw, "loss_weights")
    for f in dataclasses.fields(LossWeights):
        val = getattr(weights, f.name)
        active = spec is not None and f.name == spec[0]
        if active and val <= 0:
            raise ConfigError(f"preset {preset!r} needs {f.name} > 0")
        if not active and val != 0:
            raise ConfigError(f"preset {preset!r} does not allow {f.name}={val}")
    return weights


def _resolve_guidance(preset, raw):
    raw = dict(raw or {})
    if preset in CLASSIFIER_PRESETS:
        raw.setdefault("mode", "cg")
        g = _build(GuidanceConfig, raw, "guidance")
        if g.mode not in _CLASSIFIER_MODES:
            raise ConfigError(f"preset {preset!r} cannot use guidance mode {g.mode!r}")
        if g.lambda_cfg != 0:
            raise ConfigError(f"preset {preset!r} does not use lambda_cfg")
    else:
        raw.setdefault("mode", _DEFAULT_MODE[preset])
        g = _build(GuidanceConfig, raw, "guidance")
        if g.mode != _DEFAULT_MODE[preset]:
            raise ConfigError(f"preset {preset!r} needs guidance mode {_DEFAULT_MODE[preset]!r}")
        if g.mode == "cond" and g.lambda_cfg != 0:
            raise ConfigError("preset 'cond' does not use lambda_cfg")
    return g


def config_from_dict(raw: dict, seed_override=None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    preset = raw.get("preset")
    if preset not in PRESETS:
        raise ConfigError(f"preset must be one of {list(PRESETS)}, got {preset!r}")
    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    data = _build(DataConfig, raw.get("data"), "data")
    data.gmm()
    if preset in COND_PRESETS and any(v for v in (raw.get("loss_weights") or {}).values()):
        raise ConfigError(f"preset {preset!r} does not train a classifier; remove loss_weights")
    ev = dict(raw.get("eval") or {})
    if "grid" in ev:
        ev["grid"] = _build(GridSpec, ev["grid"], "eval.grid")
    sampler = dict(raw.get("sampler") or {})
    sampler.setdefault("seed", 0)
    try:
        schedule = _build(NoiseSchedule, raw.get("schedule"), "schedule")
        sampler_cfg = _build(SamplerConfig, sampler, "sampler")
    except Exception as exc:   # DomainError from validation
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    n_per = int(raw.get("n_samples_per_class", 500))
    if n_per < 2:
        raise ConfigError("n_samples_per_class must be >= 2")
    p_uncond = float(raw.get("p_uncond", 0.1))
    if not 0 <= p_uncond < 1:
        raise ConfigError("p_uncond must lie in [0, 1)")
    cfg = ExperimentConfig(
        preset=preset,
        seed=seed,
        data=data,
        schedule=schedule,
        model=_build(ModelShape, raw.get("model"), "model"),
        train_score=_train_config(raw.get("train_score"), "train_score", 1.0, seed),
        train_classifier=_train_config(raw.get("train_classifier"), "train_classifier",
                                       data.labeled_fraction, seed),
        train_cond=_train_config(raw.get("train_cond"), "train_cond", data.labeled_fraction,
                                 seed),
        loss_weights=_resolve_weights(preset, raw.get("loss_weights"))
        if preset in CLASSIFIER_PRESETS else LossWeights(),
        sgld=_build(SGLDConfig, raw.get("sgld"), "sgld"),
        p_uncond=p_uncond,
        guidance=_resolve_guidance(preset, raw.get("guidance")),
        sampler=sampler_cfg,
        n_samples_per_class=n_per,
        eval=_build(EvalConfig, ev, "eval"),
    )
    cfg.dataset_spec()
    return cfg


def load_config(path, seed_override=None) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
    return config_from_dict(raw, seed_override)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def resolved_json(cfg: ExperimentConfig) -> str:
    return json.dumps(_jsonable(cfg.to_dict()), indent=2)
