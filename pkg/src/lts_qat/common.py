"""Common types, errors and logging for the training engine."""
# pylint: disable=W1203
import logging
import os
from typing import Literal

import numpy as np
from dotenv import find_dotenv, load_dotenv
from pydantic import Field
from typing_extensions import Annotated

load_dotenv(find_dotenv(usecwd=True), override=False)

logger = logging.getLogger("lts-qat")
logger.setLevel(os.getenv("LTS_QAT_LOG_LEVEL", "INFO").upper())
if not logger.handlers:
    console_handler = logging.StreamHandler()
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)


class LtsError(Exception):
    """Base error of the package."""


class DimensionError(LtsError, ValueError):
    """Tensor shapes or extents do not agree."""


class ConfigError(LtsError, ValueError):
    """Invalid configuration, hyperparameter or geometry."""


class QuantizationError(LtsError, ValueError):
    """Quantizer invariant violated (u <= l, empty tensor, ...)."""


class DataParseError(LtsError, ValueError):
    """Dataset container could not be parsed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DataValidationError(LtsError, ValueError):
    """Dataset content is out of its valid range."""


class CheckpointError(LtsError, ValueError):
    """Checkpoint file is corrupt or does not match the model."""


class MetricsError(LtsError, ValueError):
    """Metric computation lacks the records it needs."""


class DivergenceError(LtsError, RuntimeError):
    """Training produced a non-finite loss."""


Precision = Literal[32, 64]
BitWidth = Annotated[int, Field(ge=2, le=8)]
TensorKind = Literal["weight", "activation"]
Mode = Literal["fp", "baseline", "lts", "random"]

DTYPES: dict[int, type] = {32: np.float32, 64: np.float64}


def dtype_for(precision: int) -> np.dtype:
    """Numpy dtype of a run precision."""
    if precision not in DTYPES:
        raise ConfigError(f"precision must be 32 or 64, got {precision}")
    return np.dtype(DTYPES[precision])
