import json
import os
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import pydantic
from dotenv import load_dotenv

from modules.errors import ConfigError

load_dotenv()

RUNS_DIR = Path("runs")

PRECISIONS = {"f32": np.float32, "f64": np.float64}

# Per-channel pixel statistics after scaling to [0, 1]
DATASET_NORMALIZATION = {
    "mnist":   {"mean": [0.1307], "std": [0.3081]},
    "cifar10": {"mean": [0.4914, 0.4822, 0.4465], "std": [0.2470, 0.2435, 0.2616]},
    "blobs":   {"mean": [0.0], "std": [1.0]},
}

# Correlation report row labels, in display order
CONSTRAINT_LABELS = ["unconstrained", "75%", "62.5%", "50%"]
CONSTRAINT_ORDER = {v: i for i, v in enumerate(CONSTRAINT_LABELS)}

REPORT_COLUMNS = [
    "constraint",
    "pearson_adaptive", "pearson_vanilla",
    "spearman_adaptive", "spearman_vanilla",
    "kendall_adaptive", "kendall_vanilla",
    "n",
]
SCATTER_COLUMNS = ["id", "constraint", "acc_evaluated", "acc_finetuned", "method"]
CANDIDATE_CSV_COLUMNS = ["id", "flops_ratio", "acc_vanilla", "acc_adaptive"]
BN_DISTANCE_COLUMNS = [
    "layer", "channel",
    "dmean_global", "dmean_adaptive",
    "dvar_global", "dvar_adaptive",
]
HISTOGRAM_COLUMNS = ["epoch", "layer", "bin_lo", "bin_hi", "count"]


def get_dtype():
    """Float dtype selected by EAGLE_PRECISION (f32 unless set to f64)."""
    name = os.getenv("EAGLE_PRECISION", "f32").strip().lower() or "f32"
    if name not in PRECISIONS:
        raise ConfigError(f"EAGLE_PRECISION must be one of {sorted(PRECISIONS)}, got {name!r}")
    return PRECISIONS[name]


def check_finite_enabled():
    return os.getenv("EAGLE_CHECK_FINITE", "0").strip() in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# Experiment config models
# ---------------------------------------------------------------------------
class StrictModel(pydantic.BaseModel):
    model_config = {
        "extra": "forbid",
        "validate_default": True,
    }


class DatasetConfig(StrictModel):
    kind: Literal["mnist", "cifar10", "blobs"] = "blobs"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    cifar_train: list[str] = []
    cifar_test: list[str] = []
    mean: Optional[list[float]] = None
    std: Optional[list[float]] = None
    train_subset: Optional[int] = pydantic.Field(default=None, ge=1)
    blob_classes: int = pydantic.Field(default=10, ge=2)
    blob_per_class: int = pydantic.Field(default=100, ge=1)
    blob_test_per_class: int = pydantic.Field(default=20, ge=1)
    blob_image_size: int = pydantic.Field(default=16, ge=4)
    blob_channels: int = pydantic.Field(default=1, ge=1)
    seed: Optional[int] = None

    @pydantic.model_validator(mode="after")
    def _fill_normalization(self):
        defaults = DATASET_NORMALIZATION[self.kind]
        if self.mean is None:
            self.mean = list(defaults["mean"])
        if self.std is None:
            self.std = list(defaults["std"])
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std must have the same length")
        if any(s <= 0 for s in self.std):
            raise ValueError("std entries must be positive")
        return self


class ModelConfig(StrictModel):
    architecture: Literal["micro-cnn", "micro-mobilenet"] = "micro-cnn"
    widths: Optional[list[pydantic.PositiveInt]] = None
    width_mult: float = pydantic.Field(default=1.0, gt=0)


class TrainConfig(StrictModel):
    epochs: int = pydantic.Field(default=10, ge=0)
    batch_size: int = pydantic.Field(default=128, ge=1)
    base_lr: float = pydantic.Field(default=0.05, ge=0)
    milestones: Optional[list[int]] = None
    lr_decay: float = pydantic.Field(default=0.1, gt=0)
    momentum: float = pydantic.Field(default=0.9, ge=0, lt=1)
    weight_decay: float = pydantic.Field(default=5e-4, ge=0)
    hflip: bool = False
    seed: Optional[int] = None

    @pydantic.model_validator(mode="after")
    def _check_milestones(self):
        if self.milestones is None:
            # step decay at 60% / 85% of the run
            self.milestones = sorted({int(self.epochs * 0.6), int(self.epochs * 0.85)} - {0})
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if ms and (ms[0] <= 0 or ms[-1] >= max(self.epochs, 1)):
            raise ValueError(f"milestones must lie in (0, epochs={self.epochs}), got {ms}")
        return self

    def lr_at(self, epoch):
        """Learning rate for a 0-based epoch under the step schedule."""
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * (self.lr_decay ** drops)


class FinetuneConfig(TrainConfig):
    epochs: int = pydantic.Field(default=2, ge=0)
    base_lr: float = pydantic.Field(default=1e-3, ge=0)
    milestones: Optional[list[int]] = []


class SearchConfig(StrictModel):
    candidate_count: int = pydantic.Field(default=50, ge=1)
    max_ratio: float = pydantic.Field(default=0.7, ge=0, lt=1)
    first_layer_max_ratio: float = pydantic.Field(default=0.2, ge=0, lt=1)
    constraint: Literal["flops", "params"] = "flops"
    flops_target: Optional[float] = pydantic.Field(default=None, gt=0, le=1)
    flops_tolerance: float = pydantic.Field(default=0.02, ge=0)
    max_attempts: int = pydantic.Field(default=10_000, ge=1)
    recalib_iterations: int = pydantic.Field(default=100, ge=1)
    recalib_fraction: float = pydantic.Field(default=1 / 30, gt=0, lt=1)
    subval_fraction: float = pydantic.Field(default=0.05, gt=0, lt=1)
    recalib_momentum: float = pydantic.Field(default=0.9, ge=0, lt=1)
    recalib_rule: Literal["momentum", "cumulative"] = "momentum"
    top_k_to_finetune: int = pydantic.Field(default=2, ge=0)
    criterion: Literal["l1", "l2"] = "l1"
    analysis: bool = True
    baseline: bool = False
    label: Optional[str] = None
    seed: Optional[int] = None

    @pydantic.model_validator(mode="after")
    def _check_fractions(self):
        if self.subval_fraction + self.recalib_fraction >= 1:
            raise ValueError("subval_fraction + recalib_fraction must be < 1")
        return self


class ExperimentConfig(StrictModel):
    seed: int = 0
    out_dir: Optional[str] = None
    dataset: DatasetConfig = pydantic.Field(default_factory=DatasetConfig)
    model: ModelConfig = pydantic.Field(default_factory=ModelConfig)
    train: TrainConfig = pydantic.Field(default_factory=TrainConfig)
    finetune: FinetuneConfig = pydantic.Field(default_factory=FinetuneConfig)
    search: SearchConfig = pydantic.Field(default_factory=SearchConfig)

    @pydantic.model_validator(mode="after")
    def _resolve_seeds(self):
        for section in (self.dataset, self.train, self.finetune, self.search):
            if section.seed is None:
                section.seed = self.seed
        return self


def load_experiment_config(path=None, seed=None, out_dir=None):
    """Parse a TOML experiment file (or defaults when path is None) and apply CLI overrides."""
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e

    if seed is not None:
        raw["seed"] = seed
        for section in ("dataset", "train", "finetune", "search"):
            raw.setdefault(section, {})["seed"] = seed
    if out_dir is not None:
        raw["out_dir"] = str(out_dir)

    try:
        return ExperimentConfig.model_validate(raw)
    except pydantic.ValidationError as e:
        raise ConfigError(str(e)) from e


def write_resolved_config(config, out_dir):
    """Write the fully-resolved config (defaults included) beside a run's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved.json"
    path.write_text(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return path
