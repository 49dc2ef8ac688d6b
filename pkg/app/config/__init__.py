"""Run configuration: schema, YAML files and dotted-key overrides"""
import copy
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    field_validator,
    model_validator,
)

from app.augment import AugmentationPolicy
from app.cluster import ClusterConfig
from app.dataset import DEFAULT_IMAGE_SIZE, DEFAULT_NUM_CLASSES, imbalanced_counts, subset_label
from app.distill import DistillConfig
from app.errors import BudgetMismatchError, InvalidConfigError
from app.lineval import EvalConfig
from app.models import BackboneConfig, HeadConfig
from app.optim import OptimizerConfig
from app.trainer import TrainSchedule
from app.utils import derive_seed

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

Method = Literal["simclr", "simsiam", "simsiam+c+d", "simsiam+d"]
PIPELINE_METHODS = ("simsiam+c+d", "simsiam+d")


class SyntheticCorpusConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train_per_class: PositiveInt = 200
    test_per_class: PositiveInt = 50
    signal: float = 1.0
    noise: float = 0.12
    seed: int = 0


class DatasetConfig(BaseModel):
    """Corpus location; "synthetic" generates a corpus under the run directory"""
    model_config = ConfigDict(extra="forbid")

    source: str = "synthetic"
    num_classes: PositiveInt = DEFAULT_NUM_CLASSES
    image_size: PositiveInt = DEFAULT_IMAGE_SIZE
    synthetic: SyntheticCorpusConfig = SyntheticCorpusConfig()

    @property
    def is_synthetic(self) -> bool:
        return self.source == "synthetic"


class SubsetConfig(BaseModel):
    """Which training subset to pre-train on

    imbalanced: long-tail subset for factor p
    balanced:   rescaled balanced subset of `total` records, or of the size of
                the p=`match_p` imbalanced subset
    full:       the whole training split
    """
    model_config = ConfigDict(extra="forbid")

    kind: Literal["imbalanced", "balanced", "full"] = "imbalanced"
    p: Optional[float] = 10
    total: Optional[PositiveInt] = None
    match_p: Optional[float] = None

    @model_validator(mode="after")
    def _complete(self):
        if self.kind == "imbalanced" and (self.p is None or self.p < 1):
            raise ValueError("imbalanced subsets need p >= 1")
        if self.kind == "balanced" and self.total is None and self.match_p is None:
            raise ValueError("balanced subsets need total or match_p")
        return self

    def resolved_total(self, per_class: int, num_classes: int) -> Optional[int]:
        if self.kind != "balanced":
            return None
        if self.total is not None:
            return self.total
        return sum(imbalanced_counts(per_class, self.match_p, num_classes))

    def label(self, per_class: int, num_classes: int) -> str:
        if self.kind == "imbalanced":
            return subset_label("imbalanced", p=self.p)
        if self.kind == "balanced":
            return subset_label("balanced", total=self.resolved_total(per_class, num_classes))
        return subset_label("full")


class ModelSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backbone: BackboneConfig = BackboneConfig()
    heads: HeadConfig = HeadConfig()


class PretrainConfig(BaseModel):
    """Shared pre-training settings; one optimizer per method"""
    model_config = ConfigDict(extra="forbid")

    batch_size: PositiveInt = 1024
    temperature: PositiveFloat = 0.5
    lr_per_step: bool = False
    # epochs between resumable snapshots; 0 disables them
    checkpoint_every: NonNegativeInt = 1
    simclr: OptimizerConfig = OptimizerConfig(kind="lars", base_lr=0.3, weight_decay=1e-6)
    simsiam: OptimizerConfig = OptimizerConfig(kind="sgd", base_lr=0.03, weight_decay=1e-5)


class EpochSplit(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base: PositiveInt = 40
    expert: PositiveInt = 180
    distill: PositiveInt = 80

    @property
    def total(self) -> int:
        return self.base + self.expert + self.distill


class RunConfig(BaseModel):
    """One experiment: subset × method × seed"""
    model_config = ConfigDict(extra="forbid")

    schema_version: int = SCHEMA_VERSION
    name: str = "run"
    method: Method = "simsiam"
    seed: int = 0
    output_dir: str = "runs/run"
    dataset: DatasetConfig = DatasetConfig()
    subset: SubsetConfig = SubsetConfig()
    model: ModelSection = ModelSection()
    augmentation: AugmentationPolicy = AugmentationPolicy()
    pretrain: PretrainConfig = PretrainConfig()
    budget: PositiveInt = 300
    # baseline epochs; None means the whole budget
    epochs: Optional[PositiveInt] = None
    split: EpochSplit = EpochSplit()
    cluster: ClusterConfig = ClusterConfig()
    distill: DistillConfig = DistillConfig()
    lineval: EvalConfig = EvalConfig()
    parallel_experts: PositiveInt = 1

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}, expected {SCHEMA_VERSION}")
        return v

    @model_validator(mode="after")
    def _expert_teachers(self):
        if self.method == "simsiam+c+d" and not self.distill.use_experts:
            raise ValueError(
                "distill.use_experts=false (--no-expert) needs method simsiam+d; "
                "simsiam+c+d distills from its cluster experts"
            )
        return self

    @property
    def base_method(self) -> str:
        return "simclr" if self.method == "simclr" else "simsiam"

    @property
    def is_pipeline(self) -> bool:
        return self.method in PIPELINE_METHODS

    @property
    def baseline_epochs(self) -> int:
        return self.epochs or self.budget

    def optimizer(self) -> OptimizerConfig:
        return getattr(self.pretrain, self.base_method)

    def schedule(self, epochs: int, tag: str) -> TrainSchedule:
        return TrainSchedule(
            epochs=epochs,
            batch_size=self.pretrain.batch_size,
            optimizer=self.optimizer(),
            method=self.base_method,
            seed=derive_seed(self.seed, tag),
            temperature=self.pretrain.temperature,
            lr_per_step=self.pretrain.lr_per_step,
        )


def check_budget(cfg: RunConfig) -> None:
    """The staged pipeline must consume exactly the baseline budget"""
    if cfg.is_pipeline and cfg.split.total != cfg.budget:
        raise BudgetMismatchError(
            f"epochs {cfg.split.base}+{cfg.split.expert}+{cfg.split.distill}={cfg.split.total} "
            f"!= budget {cfg.budget}"
        )
    if not cfg.is_pipeline and cfg.epochs is not None and cfg.epochs != cfg.budget:
        raise BudgetMismatchError(f"baseline epochs {cfg.epochs} != budget {cfg.budget}")


def parse_override(text: str):
    """'a.b.c=value' -> (['a', 'b', 'c'], parsed value)"""
    if "=" not in text:
        raise InvalidConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise InvalidConfigError(f"empty override key in {text!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise InvalidConfigError(f"cannot parse override value {raw!r}: {e}")
    return parts, value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Return a copy of `data` with every dotted override applied"""
    data = copy.deepcopy(data)
    for text in overrides:
        parts, value = parse_override(text)
        node = data
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            if not isinstance(child, dict):
                raise InvalidConfigError(f"override {text!r}: {part} is not a section")
            node = child
        node[parts[-1]] = value
    return data


def read_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise InvalidConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise InvalidConfigError(f"{path}: invalid YAML ({e})")
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{path}: top level must be a mapping")
    return data


def build_run_config(data: Dict[str, Any], overrides: Sequence[str] = ()) -> RunConfig:
    """Validate a config tree (after overrides) and its epoch budget"""
    try:
        cfg = RunConfig.model_validate(apply_overrides(data, overrides))
    except ValidationError as e:
        raise InvalidConfigError(str(e))
    check_budget(cfg)
    return cfg


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    data = read_yaml(path) if path else {}
    cfg = build_run_config(data, overrides)
    logger.debug(f"Loaded run config {cfg.name} ({cfg.method}, seed {cfg.seed})")
    return cfg


def dump_run_config(cfg: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True))
    return path


class GridConfig(BaseModel):
    """Cartesian grid of subsets × methods × seeds over one base run config"""
    model_config = ConfigDict(extra="forbid")

    schema_version: int = SCHEMA_VERSION
    name: str = "grid"
    base: Dict[str, Any] = Field(default_factory=dict)
    output_dir: str = "grids/grid"
    max_parallel: Optional[PositiveInt] = None
    subsets: List[SubsetConfig] = Field(default_factory=list)
    methods: List[Method] = Field(default_factory=list)
    seeds: List[int] = Field(default_factory=lambda: [0])
    runs: List[Dict[str, Any]] = Field(default_factory=list)

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}, expected {SCHEMA_VERSION}")
        return v


def subset_key(subset: SubsetConfig) -> str:
    if subset.kind == "imbalanced":
        return f"imb-p{subset.p:g}"
    if subset.kind == "balanced":
        return f"bal-{subset.total}" if subset.total is not None else f"bal-p{subset.match_p:g}"
    return "full"


def expand_grid(grid: GridConfig, overrides: Sequence[str] = ()) -> List[RunConfig]:
    """One RunConfig per (subset, method, seed) plus every explicit run entry"""
    entries: List[Dict[str, Any]] = []
    for subset in grid.subsets:
        for method in grid.methods:
            for seed in grid.seeds:
                entries.append({"subset": subset.model_dump(mode="json"), "method": method, "seed": seed})
    entries.extend(grid.runs)

    configs = []
    for entry in entries:
        data = copy.deepcopy(grid.base)
        data.update(copy.deepcopy(entry))
        data.setdefault("schema_version", SCHEMA_VERSION)
        resolved = build_run_config(data, overrides)
        slug = f"{subset_key(resolved.subset)}_{resolved.method.replace('+', '')}_s{resolved.seed}"
        if "output_dir" not in entry:
            data["output_dir"] = str(Path(grid.output_dir) / slug)
        if "name" not in entry:
            data["name"] = slug
        configs.append(build_run_config(data, overrides))
    return configs


def load_grid_config(path: Union[str, Path]) -> GridConfig:
    """Grid file; a string `base` is a run-config path relative to the grid file"""
    path = Path(path)
    data = read_yaml(path)
    if isinstance(data.get("base"), str):
        data["base"] = read_yaml(path.parent / data["base"])
    try:
        return GridConfig.model_validate(data)
    except ValidationError as e:
        raise InvalidConfigError(str(e))
