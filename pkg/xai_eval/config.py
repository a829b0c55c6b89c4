"""
Configuration: environment, logging setup and the resolved run configuration

Precedence, lowest first: built-in defaults, the --config JSON file,
XAIEVAL_* environment variables, command-line flags.
"""

import json
import logging
import os
import sys
import typing
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator

from xai_eval.attribution import AGGREGATIONS, METHODS
from xai_eval.data import SyntheticSpec
from xai_eval.errors import DataError
from xai_eval.faithfulness import FlipConfig
from xai_eval.localisation import METRIC_TITLES

load_dotenv()

ENV_PREFIX = "XAIEVAL_"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_LEVEL: str = os.environ.get("XAIEVAL_LOG_LEVEL", "INFO")

Subcommand = Literal["synth", "train", "eval", "explain", "localise", "mcd", "flip"]

# subcommands that read a trained model
NEEDS_CHECKPOINT = {"eval", "explain", "localise", "mcd", "flip"}


def setup_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            logging.StreamHandler(sys.stderr)
        ]
    )


class RunConfig(BaseModel):
    """Everything one CLI or tool invocation needs; embedded in every artifact"""

    model_config = ConfigDict(extra="forbid")

    subcommand: Subcommand
    manifest: Optional[Path] = None
    checkpoint: Optional[Path] = None
    out: Path = Path("xai_out")
    seed: int = 0

    # data selection
    split: str = "test"
    train_split: str = "train"
    val_split: Optional[str] = "val"
    split_ratio: float = 2.0 / 3.0
    limit: Optional[int] = Field(default=None, ge=1)
    classes: Optional[List[str]] = None

    # training
    epochs: int = Field(default=20, ge=0)
    lr: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=32, ge=1)
    dropout_rate: Optional[float] = None

    # evaluation and attribution
    topk: List[int] = Field(default_factory=lambda: [1, 3])
    methods: List[str] = Field(default_factory=lambda: list(METHODS))
    aggregation: Optional[str] = None
    ig_steps: int = Field(default=64, ge=1)

    # localisation
    metrics: List[str] = Field(default_factory=lambda: list(METRIC_TITLES))
    k: int = Field(default=1000, ge=1)
    part: Literal["union", "head", "thorax", "abdomen"] = "union"
    random_maps: int = Field(default=10, ge=0)

    # monte-carlo dropout
    mcd_samples: Optional[int] = Field(default=None, ge=1)
    mcd_seed: Optional[int] = None
    quantiles: List[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75])
    quantile_method: Literal["linear", "nearest"] = "linear"

    # pixel flipping
    flip: FlipConfig = Field(default_factory=FlipConfig)
    random_seeds: int = Field(default=20, ge=1)

    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)

    workers: int = Field(default=1, ge=1)
    show_progress: bool = False

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, v: List[str]) -> List[str]:
        unknown = [m for m in v if m not in METHODS]
        if unknown or not v:
            raise ValueError(f"unknown methods {unknown}; expected a subset of {list(METHODS)}")
        return v

    @field_validator("metrics")
    @classmethod
    def _known_metrics(cls, v: List[str]) -> List[str]:
        unknown = [m for m in v if m not in METRIC_TITLES]
        if unknown or not v:
            raise ValueError(f"unknown metrics {unknown}; expected a subset of {list(METRIC_TITLES)}")
        return v

    @field_validator("aggregation")
    @classmethod
    def _known_aggregation(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and v not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {list(AGGREGATIONS)}")
        return v

    @field_validator("quantiles")
    @classmethod
    def _unit_quantiles(cls, v: List[float]) -> List[float]:
        if not v or any(not 0.0 <= q <= 1.0 for q in v):
            raise ValueError("quantiles must be a non-empty list of values in [0, 1]")
        return v

    @field_validator("split_ratio")
    @classmethod
    def _open_ratio(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("split_ratio must lie strictly between 0 and 1")
        return v

    def check_paths(self) -> None:
        """Referenced inputs must exist when the subcommand starts"""
        if self.subcommand == "synth":
            return
        if self.manifest is None:
            raise DataError(f"{self.subcommand} needs --manifest")
        if not self.manifest.is_file():
            raise DataError(f"Manifest not found: {self.manifest}")
        if self.subcommand in NEEDS_CHECKPOINT:
            if self.checkpoint is None:
                raise DataError(f"{self.subcommand} needs --checkpoint")
            if not self.checkpoint.is_file():
                raise DataError(f"Checkpoint not found: {self.checkpoint}")

    def artifact_config(self) -> Dict[str, Any]:
        """JSON-ready copy embedded in every artifact"""
        return self.model_dump(mode="json")


def _is_list(annotation: Any) -> bool:
    if typing.get_origin(annotation) in (list, List):
        return True
    return any(_is_list(arg) for arg in typing.get_args(annotation) if arg is not type(None))


def _is_model(annotation: Any) -> bool:
    return isinstance(annotation, type) and issubclass(annotation, BaseModel)


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """
    RunConfig fields set through XAIEVAL_<FIELD> variables

    List fields take comma-separated values, nested sections take JSON.
    """
    environ = os.environ if environ is None else environ
    out: Dict[str, Any] = {}
    for name, info in RunConfig.model_fields.items():
        if name == "subcommand":
            continue
        raw = environ.get(ENV_PREFIX + name.upper())
        if raw is None or raw == "":
            continue
        if _is_model(info.annotation):
            try:
                out[name] = json.loads(raw)
            except json.JSONDecodeError as e:
                raise DataError(f"{ENV_PREFIX}{name.upper()} is not valid JSON: {e}") from None
        elif _is_list(info.annotation):
            out[name] = [item.strip() for item in raw.split(",") if item.strip()]
        else:
            out[name] = raw
    return out


def deep_merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(dict(merged[key]), value)
        else:
            merged[key] = value
    return merged


def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"Config file {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise DataError(f"Config file {path} must hold a JSON object")
    return data


def resolve_config(subcommand: str, flags: Optional[Mapping[str, Any]] = None,
                   config_file: Optional[Path] = None,
                   environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    Merge every configuration layer into a validated RunConfig

    Args:
        subcommand: CLI subcommand or tool name
        flags: explicitly given command-line values (None entries are ignored)
        config_file: optional JSON file of RunConfig fields
        environ: environment mapping (defaults to os.environ)

    Raises:
        pydantic.ValidationError: unknown keys or out-of-range values
    """
    data = load_config_file(config_file)
    data.pop("subcommand", None)
    data = deep_merge(data, env_overrides(environ))
    data = deep_merge(data, {k: v for k, v in (flags or {}).items() if v is not None})
    data["subcommand"] = subcommand
    return RunConfig.model_validate(data)
