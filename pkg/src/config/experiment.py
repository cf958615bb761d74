"""
Experiment configuration loaded from a JSON document.

Every section is optional; missing fields fall back to the defaults in
src.config.core. Unknown keys and invalid values raise InvalidConfig with
a dotted field path, e.g. "fed.patience".

    {
      "master_seed": 0,
      "output_dir": "out/run",
      "grid": {"origin_lat": 35.0, "cell_size_km": 1.0, ...},
      "thresholds": [0, 2, 5],
      "synthetic": {"n_facilities": 16, "days": 30, ...},
      "prepare": {"enumeration": "dense", "demand_events": "pickups",
                  "quantile_thresholds": false, "locate_window_s": 45.0},
      "model": {"layer_widths": [6, 64, 64, 64, 4], "local_optimizer": "adam",
                "learning_rate": 0.005, "sgd_learning_rate": 0.05, ...},
      "fed": {"n_rounds": 300, "local_epochs": 1, "client_fraction": 1.0,
              "patience": 30, "overlap_margin": 0, "facilities": null},
      "split": {"ratios": [0.64, 0.16, 0.2], "stratify": false},
      "sweep": {"facilities": [4, 8, 16], "patience": [10, 30, "inf"],
                "margins": [0], "seeds": 3}
    }

Patience accepts an integer, null or "inf"; null and "inf" never stop.
"""

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple, Union

import src.config as config
from src.app.errors import InvalidConfig
from src.app.grid import GridSpec, LevelThresholds
from src.app.synthetic import SyntheticConfig
from src.helper.atomic_io import dumps_json


@dataclass(frozen=True)
class PrepareConfig:
    enumeration: str = config.SAMPLE_ENUMERATION
    demand_events: str = config.DEMAND_EVENTS
    quantile_thresholds: bool = False
    locate_window_s: float = config.LOCATE_WINDOW_SECONDS

    def __post_init__(self) -> None:
        if self.enumeration not in ("dense", "sparse"):
            raise InvalidConfig("prepare.enumeration", f"expected 'dense' or 'sparse', got {self.enumeration!r}")
        if self.demand_events not in ("pickups", "both"):
            raise InvalidConfig("prepare.demand_events", f"expected 'pickups' or 'both', got {self.demand_events!r}")
        if not self.locate_window_s >= 0:
            raise InvalidConfig("prepare.locate_window_s", f"must be >= 0, got {self.locate_window_s}")


@dataclass(frozen=True)
class ModelConfig:
    layer_widths: Tuple[int, ...] = config.LAYER_WIDTHS
    local_optimizer: str = config.LOCAL_OPTIMIZER
    learning_rate: float = config.LEARNING_RATE
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    epsilon: float = config.ADAM_EPSILON
    sgd_learning_rate: float = config.SGD_LEARNING_RATE

    def __post_init__(self) -> None:
        widths = list(self.layer_widths)
        if len(widths) < 2 or any(not isinstance(w, int) or w < 1 for w in widths):
            raise InvalidConfig("model.layer_widths", f"need >= 2 positive integers, got {widths}")
        if widths[0] != config.N_FEATURES or widths[-1] != config.N_CLASSES:
            raise InvalidConfig(
                "model.layer_widths", f"must run from {config.N_FEATURES} to {config.N_CLASSES}, got {widths}"
            )
        object.__setattr__(self, "layer_widths", tuple(widths))
        if self.local_optimizer not in ("adam", "sgd"):
            raise InvalidConfig("model.local_optimizer", f"expected 'adam' or 'sgd', got {self.local_optimizer!r}")
        for name in ("learning_rate", "sgd_learning_rate", "epsilon"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"model.{name}", f"must be > 0, got {getattr(self, name)}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InvalidConfig(f"model.{name}", f"must be in [0, 1), got {getattr(self, name)}")

    @property
    def active_learning_rate(self) -> float:
        return self.learning_rate if self.local_optimizer == "adam" else self.sgd_learning_rate


@dataclass(frozen=True)
class FedSettings:
    n_rounds: int = config.N_ROUNDS
    local_epochs: int = config.LOCAL_EPOCHS
    client_fraction: float = config.CLIENT_FRACTION
    patience: float = config.PATIENCE
    overlap_margin: int = config.OVERLAP_MARGIN
    facilities: Optional[int] = None

    def __post_init__(self) -> None:
        if not isinstance(self.n_rounds, int) or self.n_rounds < 1:
            raise InvalidConfig("fed.n_rounds", f"must be an integer >= 1, got {self.n_rounds}")
        if not isinstance(self.local_epochs, int) or self.local_epochs < 1:
            raise InvalidConfig("fed.local_epochs", f"must be an integer >= 1, got {self.local_epochs}")
        if not 0.0 < self.client_fraction <= 1.0:
            raise InvalidConfig("fed.client_fraction", f"must be in (0, 1], got {self.client_fraction}")
        object.__setattr__(self, "patience", parse_patience(self.patience, "fed.patience"))
        if not isinstance(self.overlap_margin, int) or self.overlap_margin < 0:
            raise InvalidConfig("fed.overlap_margin", f"must be an integer >= 0, got {self.overlap_margin}")
        if self.facilities is not None and (not isinstance(self.facilities, int) or self.facilities < 1):
            raise InvalidConfig("fed.facilities", f"must be a positive integer or null, got {self.facilities}")


@dataclass(frozen=True)
class SplitConfig:
    ratios: Tuple[float, float, float] = config.SPLIT_RATIOS
    stratify: bool = config.STRATIFY

    def __post_init__(self) -> None:
        ratios = tuple(float(r) for r in self.ratios)
        if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise InvalidConfig("split.ratios", f"need three non-negative ratios summing to 1, got {list(ratios)}")
        object.__setattr__(self, "ratios", ratios)


@dataclass(frozen=True)
class SweepConfig:
    facilities: Tuple[int, ...] = config.SWEEP_FACILITIES
    patience: Tuple[float, ...] = tuple(math.inf if p is None else p for p in config.SWEEP_PATIENCE)
    margins: Tuple[int, ...] = config.SWEEP_MARGINS
    seeds: int = config.SWEEP_SEEDS

    def __post_init__(self) -> None:
        if not self.facilities or any(not isinstance(f, int) or f < 1 for f in self.facilities):
            raise InvalidConfig("sweep.facilities", f"need positive integers, got {list(self.facilities)}")
        object.__setattr__(
            self,
            "patience",
            tuple(parse_patience(p, f"sweep.patience[{i}]") for i, p in enumerate(self.patience)),
        )
        if not self.patience:
            raise InvalidConfig("sweep.patience", "need at least one value")
        if not self.margins or any(not isinstance(m, int) or m < 0 for m in self.margins):
            raise InvalidConfig("sweep.margins", f"need non-negative integers, got {list(self.margins)}")
        if not isinstance(self.seeds, int) or self.seeds < 1:
            raise InvalidConfig("sweep.seeds", f"must be an integer >= 1, got {self.seeds}")
        object.__setattr__(self, "facilities", tuple(self.facilities))
        object.__setattr__(self, "margins", tuple(self.margins))


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    thresholds: LevelThresholds = field(default_factory=LevelThresholds)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    prepare: PrepareConfig = field(default_factory=PrepareConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fed: FedSettings = field(default_factory=FedSettings)
    split: SplitConfig = field(default_factory=SplitConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    master_seed: int = config.MASTER_SEED
    output_dir: str = config.OUTPUT_DIR

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid": dataclasses.asdict(self.grid),
            "thresholds": list(self.thresholds.boundaries),
            "synthetic": self.synthetic.to_dict(),
            "prepare": dataclasses.asdict(self.prepare),
            "model": {**dataclasses.asdict(self.model), "layer_widths": list(self.model.layer_widths)},
            "fed": {**dataclasses.asdict(self.fed), "patience": format_patience(self.fed.patience)},
            "split": {"ratios": list(self.split.ratios), "stratify": self.split.stratify},
            "sweep": {
                "facilities": list(self.sweep.facilities),
                "patience": [format_patience(p) for p in self.sweep.patience],
                "margins": list(self.sweep.margins),
                "seeds": self.sweep.seeds,
            },
            "master_seed": self.master_seed,
            "output_dir": self.output_dir,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(dumps_json(self.to_dict()).encode("utf-8")).hexdigest()


_SECTIONS = {
    "grid": GridSpec,
    "synthetic": SyntheticConfig,
    "prepare": PrepareConfig,
    "model": ModelConfig,
    "fed": FedSettings,
    "split": SplitConfig,
    "sweep": SweepConfig,
}


def parse_patience(value: Any, field_path: str) -> float:
    """Integer patience, or math.inf for null / "inf" / infinity."""
    if value is None or (isinstance(value, str) and value.lower() in ("inf", "infinity")):
        return math.inf
    if isinstance(value, float) and math.isinf(value) and value > 0:
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value or value < 1:
        raise InvalidConfig(field_path, f"must be an integer >= 1, null or \"inf\", got {value!r}")
    return int(value)


def format_patience(value: float) -> Union[int, str]:
    return "inf" if value == math.inf else int(value)


def load_experiment_config(path: Optional[str] = None) -> ExperimentConfig:
    """Read a JSON config file; None gives the defaults.

    Raises:
        InvalidConfig: unreadable JSON, unknown keys or invalid values
    """
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, encoding="utf-8") as handle:
            document = json.load(handle)
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidConfig("config", f"cannot read {path}: {e}")
    return experiment_config_from_dict(document)


def experiment_config_from_dict(document: Dict[str, Any]) -> ExperimentConfig:
    if not isinstance(document, dict):
        raise InvalidConfig("config", "top level must be a JSON object")
    allowed = set(_SECTIONS) | {"thresholds", "master_seed", "output_dir"}
    for key in document:
        if key not in allowed:
            raise InvalidConfig(key, "unknown key")

    sections: Dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build_section(name, cls, document.get(name, {}))

    thresholds = document.get("thresholds", list(config.LEVEL_THRESHOLDS))
    if not isinstance(thresholds, list):
        raise InvalidConfig("thresholds", f"must be a list of integers, got {thresholds!r}")

    master_seed = document.get("master_seed", config.MASTER_SEED)
    if isinstance(master_seed, bool) or not isinstance(master_seed, int):
        raise InvalidConfig("master_seed", f"must be an integer, got {master_seed!r}")
    output_dir = document.get("output_dir", config.OUTPUT_DIR)
    if not isinstance(output_dir, str) or not output_dir:
        raise InvalidConfig("output_dir", f"must be a non-empty string, got {output_dir!r}")

    return ExperimentConfig(
        thresholds=LevelThresholds(tuple(thresholds)),
        master_seed=master_seed,
        output_dir=output_dir,
        **sections,
    )


def _build_section(name: str, cls: type, values: Any) -> Any:
    if not isinstance(values, dict):
        raise InvalidConfig(name, "must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise InvalidConfig(f"{name}.{key}", "unknown key")
    converted = {key: tuple(value) if isinstance(value, list) else value for key, value in values.items()}
    try:
        return cls(**converted)
    except InvalidConfig:
        raise
    except (TypeError, ValueError) as e:
        raise InvalidConfig(name, str(e))
