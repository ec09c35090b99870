# Configuration settings for phenoclass
import os
import json
import hashlib
import logging
from typing import Any, Dict, List, Literal, Optional, Sequence, Union
from pathlib import Path

import numpy as np
from omegaconf import OmegaConf
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

# Set up logging
logger = logging.getLogger(__name__)

try:
    from dotenv import load_dotenv
    # Load environment variables from .env file if it exists
    load_dotenv()
    logger.debug("Loaded environment variables from .env file")
except ImportError:
    logger.debug("dotenv package not installed. Environment variables will only be loaded from system.")

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent / "configs" / "default.yaml"
DEBUG_MODE = os.environ.get("DEBUG", "0") == "1"
DEFAULT_OUT_DIR = "runs"


class ConfigValidationError(ValueError):
    """All validation failures of a run configuration, not just the first"""

    def __init__(self, errors: List[Dict[str, Any]]):
        self.errors = errors
        lines = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in errors]
        super().__init__("; ".join(lines))


class DatasetSection(BaseModel):
    preset: Literal["comb", "simb", "siba"] = "simb"
    tag: Literal["COMB-13", "SIMB-7", "SIBA-7", "synthetic"] = "synthetic"


class PathsSection(BaseModel):
    data_dir: str = "data"
    out_dir: str = DEFAULT_OUT_DIR


class EviSection(BaseModel):
    gain: float = 2.5
    c1: float = 6.0
    c2: float = 7.5
    l: float = 1.0


class PreprocessSection(BaseModel):
    cloud_threshold: float = Field(default=65.0, ge=0.0, le=100.0)
    reflectance_scale: float = Field(default=10000.0, gt=0.0)
    evi: EviSection = EviSection()


class TasseledCapSection(BaseModel):
    brightness: List[float]
    greenness: List[float]
    wetness: List[float]

    @field_validator("brightness", "greenness", "wetness")
    @classmethod
    def _ten_coefficients(cls, value: List[float]) -> List[float]:
        if len(value) != 10:
            raise ValueError(f"expected 10 coefficients, got {len(value)}")
        return value


class AffineRule(BaseModel):
    """x -> (x + shift) / scale, strictly increasing"""
    shift: float = 0.0
    scale: float = Field(gt=0.0)

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) + self.shift) / self.scale

    def invert(self, y):
        return np.asarray(y, dtype=np.float64) * self.scale - self.shift


class NormalizationSection(BaseModel):
    version: int = 1
    s1: AffineRule
    s2: AffineRule
    temperature: AffineRule
    precipitation: AffineRule
    elevation: AffineRule
    slope: AffineRule


class FeaturesSection(BaseModel):
    subset: Literal["s1", "s2", "s1s2"] = "s1s2"
    feature_set: Literal["seasonal", "harmonic", "all"] = "all"
    iterative_fit: bool = False


class EncoderSection(BaseModel):
    d_e: int = Field(default=128, ge=3)
    depth: int = Field(default=2, ge=1)
    heads: int = Field(default=8, ge=1)
    ff_width: int = Field(default=256, ge=1)
    feature_dim: int = Field(default=128, ge=1)
    dw_classes: int = Field(default=9, ge=2)
    deep_inputs: Literal["all", "s1s2"] = "all"

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_e % self.heads != 0:
            raise ValueError(f"d_e={self.d_e} is not divisible by heads={self.heads}")
        return self


class PretrainSection(BaseModel):
    epochs: int = Field(default=20, ge=0)
    mask_ratio: float = Field(default=0.75, gt=0.0, lt=1.0)
    strategy: Literal["random", "group", "month"] = "random"
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    decoder_depth: int = Field(default=1, ge=1)
    checkpoint: Optional[str] = None
    # Pixels the MAE objective sees: an unlabelled synthetic corpus or the run seed's train split
    corpus: Literal["synthetic", "train"] = "synthetic"
    corpus_size: int = Field(default=8000, ge=1)
    corpus_seed: int = 1042
    corpus_prefix: str = Field(default="U", min_length=1)


class TrainSection(BaseModel):
    lr: float = Field(default=1e-4, gt=0.0)
    weight_decay: float = Field(default=0.00746, gt=0.0)
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=64, ge=1)
    betas: List[float] = [0.9, 0.999]
    eps: float = Field(default=1e-8, gt=0.0)
    hidden: List[int] = [1024, 512, 256]
    bn_momentum: float = Field(default=0.1, gt=0.0, le=1.0)
    val_fraction: float = Field(default=0.15, ge=0.0, lt=1.0)

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, value: List[int]) -> List[int]:
        if not value or any(w <= 0 for w in value):
            raise ValueError("hidden widths must be positive")
        return value


class SplitSection(BaseModel):
    train_fraction: float = Field(default=0.7, gt=0.0, lt=1.0)
    stratified: Literal[True] = True


class ForestSection(BaseModel):
    n_trees: int = Field(default=500, ge=1)
    min_samples_split: int = Field(default=2, ge=2)


class ExperimentSection(BaseModel):
    seeds: List[int] = [1, 2, 3, 4, 5]
    pipelines: List[Literal["rf-hand", "rf-deep", "mlp-deep"]] = ["mlp-deep", "rf-deep", "rf-hand"]

    @field_validator("seeds")
    @classmethod
    def _distinct(cls, value: List[int]) -> List[int]:
        if len(set(value)) != len(value):
            raise ValueError("seeds must be distinct")
        if not value:
            raise ValueError("at least one seed is required")
        return value


class RunConfig(BaseModel):
    """Resolved key-value configuration of one run"""
    seed: int = 42
    dataset: DatasetSection = DatasetSection()
    paths: PathsSection = PathsSection()
    preprocess: PreprocessSection = PreprocessSection()
    tasseled_cap: TasseledCapSection
    normalization: NormalizationSection
    features: FeaturesSection = FeaturesSection()
    encoder: EncoderSection = EncoderSection()
    pretrain: PretrainSection = PretrainSection()
    train: TrainSection = TrainSection()
    split: SplitSection = SplitSection()
    forest: ForestSection = ForestSection()
    experiment: ExperimentSection = ExperimentSection()

    def config_hash(self) -> str:
        """SHA-256 over the canonical JSON dump"""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Sequence[str]] = None) -> RunConfig:
    """
    Load the default config, merge a user file and dotted overrides on top

    Args:
        path: Optional YAML file; only the keys it sets replace defaults
        overrides: Dotted assignments such as "train.epochs=10"

    Returns:
        Validated RunConfig
    """
    base = Path(get_config().config_path)
    if not base.exists():
        raise FileNotFoundError(f"base config file not found: {base}")
    merged = OmegaConf.load(base)
    if get_config().out_dir:
        merged = OmegaConf.merge(merged, {"paths": {"out_dir": get_config().out_dir}})
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        merged = OmegaConf.merge(merged, OmegaConf.load(path))
        logger.info(f"Loaded config overrides from {path}")
    if overrides:
        merged = OmegaConf.merge(merged, OmegaConf.from_dotlist(list(overrides)))
    container = OmegaConf.to_container(merged, resolve=True)
    try:
        return RunConfig.model_validate(container)
    except ValidationError as e:
        raise ConfigValidationError(e.errors()) from e


def default_run_config() -> RunConfig:
    return load_run_config()


class Config:
    """Process-wide environment settings for phenoclass"""

    # Singleton instance
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(Config, cls).__new__(cls)
            cls._instance._initialize()
        return cls._instance

    def _initialize(self):
        """Initialize configuration from the environment"""
        self.debug = DEBUG_MODE
        self.threads = self._read_threads()
        # None keeps paths.out_dir from the config files
        self.out_dir = os.environ.get("PHENOCLASS_OUT")
        self.config_path = os.environ.get("PHENOCLASS_CONFIG", str(DEFAULT_CONFIG_PATH))
        logger.debug(f"Initialized configuration: debug={self.debug}, threads={self.threads}")

    @staticmethod
    def _read_threads() -> int:
        raw = os.environ.get("PHENOCLASS_THREADS")
        available = os.cpu_count() or 1
        if raw is None:
            return available
        try:
            value = int(raw)
        except ValueError:
            logger.warning(f"Ignoring non-integer PHENOCLASS_THREADS={raw!r}")
            return available
        return max(1, min(value, available))

    def as_dict(self) -> Dict[str, Any]:
        """Return configuration as dictionary (for run manifests)"""
        return {
            "debug": self.debug,
            "threads": self.threads,
            "out_dir": self.out_dir,
            "config_path": self.config_path,
        }


# Create a global instance
config = Config()


def get_config() -> Config:
    """Get the global configuration instance"""
    return config
