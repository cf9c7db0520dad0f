"""Run configuration: pydantic models and the ``key = value`` file format."""
# pylint: disable=W1203
import logging
import os
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from lts_qat.common import BitWidth, ConfigError, Mode, Precision
from lts_qat.layers import QuantOptions
from lts_qat.scheduler import LtsHyperparams
from lts_qat.utils import split_list

logger = logging.getLogger("lts-qat.config")

DEFAULT_STATS = {
    "idx": ((0.1307,), (0.3081,)),
    "cifar10bin": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "synthetic": ((0.0,), (1.0,)),
}


def data_root() -> Optional[Path]:
    """Directory relative dataset paths resolve against, from LTS_QAT_DATA_ROOT."""
    root = os.getenv("LTS_QAT_DATA_ROOT")
    return Path(root) if root else None


class DataConfig(BaseModel):
    """Dataset source and normalization."""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["idx", "cifar10bin", "synthetic"] = "synthetic"
    path: Optional[Path] = None
    mean: Optional[list[float]] = None
    std: Optional[list[float]] = None
    synthetic_train: int = Field(512, ge=1)
    synthetic_test: int = Field(128, ge=1)
    synthetic_shape: tuple[int, int, int] = (1, 28, 28)
    synthetic_classes: int = Field(10, ge=2)
    limit_train: Optional[int] = Field(None, ge=1)
    limit_test: Optional[int] = Field(None, ge=1)

    @field_validator("mean", "std", "synthetic_shape", mode="before")
    @classmethod
    def _split(cls, v):
        """Comma separated lists."""
        return split_list(v)

    @model_validator(mode="after")
    def _defaults(self):
        """Fill dataset statistics and require a path for file datasets."""
        mean, std = DEFAULT_STATS[self.kind]
        if self.mean is None:
            self.mean = list(mean)
        if self.std is None:
            self.std = list(std)
        if self.kind != "synthetic" and self.path is None:
            raise ValueError(f"data.path is required for data.kind = {self.kind}")
        return self

    def resolved_path(self) -> Optional[Path]:
        """``path``, made absolute against LTS_QAT_DATA_ROOT when relative."""
        if self.path is None:
            return None
        root = data_root()
        if root is not None and not self.path.is_absolute():
            return root / self.path
        return self.path


class OptimConfig(BaseModel):
    """SGD with momentum and stepwise decay."""
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(0.05, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    lr_decay_epochs: list[int] = Field(default_factory=lambda: [30, 45])
    lr_decay_factor: float = Field(0.1, gt=0)

    @field_validator("lr_decay_epochs", mode="before")
    @classmethod
    def _split(cls, v):
        return split_list(v)


class TrainConfig(BaseModel):
    """Initialization, checkpointing and loop limits."""
    model_config = ConfigDict(extra="forbid")

    init_from: Optional[Path] = None
    pretrain_epochs: int = Field(0, ge=0)
    from_scratch: bool = False
    resume_from: Optional[Path] = None
    checkpoint_epochs: list[int] = Field(default_factory=list)
    max_iterations_per_epoch: Optional[int] = Field(None, ge=1)
    eval_batch_size: int = Field(256, ge=1)
    progress: bool = True

    @field_validator("checkpoint_epochs", mode="before")
    @classmethod
    def _split(cls, v):
        return split_list(v)


class RunConfig(BaseModel):
    """Everything one training run needs."""
    model_config = ConfigDict(extra="forbid")

    model: Literal["mlp-s", "convnet-s"] = "convnet-s"
    bit_width: BitWidth = 4
    mode: Mode = "lts"
    epochs: int = Field(60, ge=1)
    batch_size: int = Field(128, ge=1)
    seed: int = Field(0, ge=0)
    out_dir: Path = Path("runs/default")
    precision: Precision = 32
    deterministic: bool = True
    data: DataConfig = Field(default_factory=DataConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    lts: LtsHyperparams = Field(default_factory=LtsHyperparams)
    quant: QuantOptions = Field(default_factory=QuantOptions)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @field_validator("precision", mode="before")
    @classmethod
    def _precision_int(cls, v):
        """Config values arrive as strings."""
        if isinstance(v, str) and v.strip().isdigit():
            return int(v)
        return v

    @model_validator(mode="after")
    def _cross_checks(self):
        """mode / lts.mode agreement, warmup extent and mode inputs."""
        if self.mode != "fp":
            if "mode" in self.lts.model_fields_set and self.lts.mode != self.mode:
                raise ValueError(
                    f"mode = {self.mode} conflicts with lts.mode = {self.lts.mode}")
            self.lts = self.lts.model_copy(update={"mode": self.mode})
        if self.lts.warmup_epochs > self.epochs:
            raise ValueError(
                f"lts.warmup_epochs ({self.lts.warmup_epochs}) exceeds epochs ({self.epochs})")
        if (self.mode == "lts" and self.lts.strategy != "fixing"
                and self.lts.warmup_epochs >= self.epochs):
            raise ValueError(
                f"{self.lts.strategy}-growth needs lts.warmup_epochs < epochs")
        if self.mode == "random" and self.lts.trajectory is None:
            raise ValueError("mode = random needs lts.trajectory")
        if (self.mode != "fp" and self.train.init_from is None
                and self.train.pretrain_epochs == 0 and not self.train.from_scratch):
            raise ValueError(
                "quantized modes need train.init_from, train.pretrain_epochs > 0 "
                "or train.from_scratch = true")
        return self

    @property
    def quantized(self) -> bool:
        """True for every mode but fp."""
        return self.mode != "fp"

    def check_paths(self) -> None:
        """Every referenced file must exist before training starts."""
        paths = {"data.path": self.data.resolved_path(),
                 "train.init_from": self.train.init_from,
                 "train.resume_from": self.train.resume_from,
                 "lts.trajectory": self.lts.trajectory if self.mode == "random" else None}
        for key, path in paths.items():
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{key}: {path} does not exist")


def _coerce(value: str) -> Union[str, None]:
    value = value.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        return value[1:-1]
    if value.lower() in ("none", "null"):
        return None
    return value


def _assign(tree: dict, key: str, value: Any, where: str) -> None:
    parts = key.split(".")
    if any(not p for p in parts):
        raise ConfigError(f"{where}: malformed key '{key}'")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"{where}: '{part}' is both a value and a section")
        node = child
    if isinstance(node.get(parts[-1]), dict):
        raise ConfigError(f"{where}: '{key}' is a section")
    node[parts[-1]] = value


def parse_config_text(text: str) -> dict:
    """``key = value`` lines into a nested dict of strings.

    ``#`` starts a comment, dotted keys address sections and a key may
    appear only once.
    """
    tree: dict = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in seen:
            raise ConfigError(
                f"line {lineno}: duplicate key '{key}' (first set on line {seen[key]})")
        seen[key] = lineno
        _assign(tree, key, _coerce(value), f"line {lineno}")
    return tree


def apply_overrides(tree: dict, overrides: Optional[list[str]]) -> dict:
    """Apply ``key=value`` overrides; later ones win."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, value = item.split("=", 1)
        _assign(tree, key.strip(), _coerce(value), f"override '{item}'")
    return tree


def build_config(tree: dict) -> RunConfig:
    """Validate a nested dict; pydantic errors surface as ConfigError."""
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[list[str]] = None) -> RunConfig:
    """Read a config file (or defaults) and apply overrides."""
    tree: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        logger.info(f"Loading config {path}")
        tree = parse_config_text(path.read_text(encoding="utf-8"))
    config = build_config(apply_overrides(tree, overrides))
    logger.debug(f"config: {config.model_dump_json()}")
    return config


def dump_config(config: RunConfig) -> str:
    """Inverse of ``parse_config_text`` for the values a run used."""
    lines = []

    def walk(prefix: str, node: dict) -> None:
        for key, value in node.items():
            name = f"{prefix}{key}"
            if isinstance(value, dict):
                walk(f"{name}.", value)
            elif value is None:
                continue
            elif isinstance(value, (list, tuple)):
                lines.append(f"{name} = {', '.join(str(v) for v in value)}")
            else:
                lines.append(f"{name} = {str(value).lower() if isinstance(value, bool) else value}")

    walk("", config.model_dump(mode="json"))
    return "\n".join(lines) + "\n"
