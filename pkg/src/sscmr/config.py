"""Experiment configuration: JSON documents layered over named profiles."""

import copy
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dataset import LABEL_MODES, SyntheticSpec
from .errors import ConfigError
from .label_prediction import LpConfig
from .representation import CrlConfig

MODES = ("supervised", "semi_paired", "semi_unpaired")

# Per-dataset settings of the original experiments.  The feature files
# themselves are not shipped; these presets apply to any loaded manifest.
PROFILES = {
    "wiki": {
        "label_mode": "single_label",
        "lp": {"hidden": 1000, "learning_rate": 0.005},
        "crl": {"alpha1": 10.0, "alpha2": 1.0, "alpha3": 10.0, "alpha4": 1.0, "beta": 1.0,
                "learning_rate": 0.001, "hidden": 5000},
    },
    "pascal": {
        "label_mode": "multi_label",
        "lp": {"hidden": 1000, "learning_rate": 0.05},
        "crl": {"alpha1": 10.0, "alpha2": 1.0, "alpha3": 1.0, "alpha4": 1.0, "beta": 1.0,
                "learning_rate": 0.005, "hidden": 5000},
    },
    "nuswide": {
        "label_mode": "multi_label",
        "lp": {"hidden": 1000, "learning_rate": 0.005},
        "crl": {"alpha1": 10.0, "alpha2": 0.1, "alpha3": 0.1, "alpha4": 0.1, "beta": 10.0,
                "learning_rate": 0.0001, "hidden": 5000},
    },
    # desk-scale benchmark on generated clusters
    "synthetic": {
        "label_mode": "single_label",
        "dataset": {
            "synthetic": {"d_x": 32, "d_y": 24, "d_c": 10, "samples_per_class": 100,
                          "noise_sigma": 0.8},
            "test_fraction": 0.2,
        },
        "lp": {"hidden": 64, "learning_rate": 0.05, "max_epochs": 100, "grad_clip": 10.0},
        "crl": {"alpha1": 10.0, "alpha2": 0.3, "alpha3": 0.1, "alpha4": 0.1, "beta": 10.0,
                "learning_rate": 0.005, "hidden": 64, "epochs": 100, "reduction": "mean"},
    },
}


@dataclass
class SplitConfig:
    labeled_fraction: float = 1.0
    nn_fraction: float = 0.2
    val_fraction: float = 0.1
    stratified: bool = False


@dataclass
class EvalConfig:
    cutoffs: list = field(default_factory=lambda: [50, "all"])
    metric: str = "cosine"


@dataclass
class ExperimentConfig:
    profile: str = "synthetic"
    mode: str = "supervised"
    seed: int = 0
    dataset: dict = field(default_factory=dict)
    split: SplitConfig = field(default_factory=SplitConfig)
    lp: LpConfig = field(default_factory=LpConfig)
    crl: CrlConfig = field(default_factory=CrlConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "supervised" and self.split.labeled_fraction != 1.0:
            raise ConfigError("supervised mode requires labeled_fraction = 1")
        if "manifest" not in self.dataset and "synthetic" not in self.dataset:
            raise ConfigError("dataset needs either 'manifest' or 'synthetic'")
        self.lp.validate()
        self.crl.validate()
        if self.eval.metric not in ("cosine", "dot", "euclidean"):
            raise ConfigError(f"unknown metric {self.eval.metric!r}")

    @property
    def label_mode(self):
        return self.synthetic_spec().label_mode if "synthetic" in self.dataset else None

    def synthetic_spec(self):
        spec = dict(self.dataset["synthetic"])
        if spec.get("seed") is None:
            spec["seed"] = derive_seed(self.seed, "dataset")
        return SyntheticSpec(**spec)

    def to_dict(self):
        return asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **changes):
        """Copy with dotted-path overrides, e.g. ``replace(**{"crl.beta": 0.0})``."""
        d = self.to_dict()
        for path, value in changes.items():
            _set_path(d, path, value)
        return config_from_dict(d)


def _set_path(d, path, value):
    keys = path.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, d, what):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {what} settings {sorted(unknown)}")
    return cls(**d)


def profile_defaults(name):
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}")
    p = copy.deepcopy(PROFILES[name])
    label_mode = p.pop("label_mode")
    if "dataset" in p and "synthetic" in p["dataset"]:
        p["dataset"]["synthetic"].setdefault("label_mode", label_mode)
    return p


def config_from_dict(d, profile=None):
    """Merge ``d`` over its profile's defaults and build an :class:`ExperimentConfig`."""
    d = dict(d)
    name = profile or d.get("profile", "synthetic")
    merged = _merge(profile_defaults(name), d)
    merged["profile"] = name
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    cfg = ExperimentConfig(
        profile=name,
        mode=merged.get("mode", "supervised"),
        seed=int(merged.get("seed", 0)),
        dataset=merged.get("dataset", {}),
        split=_build(SplitConfig, merged.get("split", {}), "split"),
        lp=_build(LpConfig, merged.get("lp", {}), "lp"),
        crl=CrlConfig.from_dict(merged.get("crl", {})),
        eval=_build(EvalConfig, merged.get("eval", {}), "eval"),
    )
    if "synthetic" in cfg.dataset:
        mode = cfg.dataset["synthetic"].get("label_mode")
        if mode is not None and mode not in LABEL_MODES:
            raise ConfigError(f"unknown label mode {mode!r}")
    cfg.validate()
    return cfg


def load_config(path, profile=None, seed=None):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if seed is not None:
        d["seed"] = seed
    return config_from_dict(d, profile)


_STAGES = {"dataset": 0, "holdout": 1, "split": 2, "lp": 3, "crl": 4, "sweep": 5}


def derive_seed(master, stage, index=0):
    """Independent 32-bit seed for ``stage`` (and run ``index``) under a master seed."""
    ss = np.random.SeedSequence([int(master), _STAGES[stage], int(index)])
    return int(ss.generate_state(1)[0])


def stage_rng(master, stage, index=0):
    return np.random.default_rng(derive_seed(master, stage, index))
