"""Lottery ticket scratcher: EMA level distance, threshold schedule, freezing.

A weight is frozen for good once the exponential moving average of its
distance to the current quantization level drops below t = Delta^B * p.
The rate p follows a fixing, linear-growth or sine-growth schedule and stays
0 during the warmup epochs.
"""
# pylint: disable=W1203
import logging
import math
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import pandas as pd  # type: ignore
from pydantic import BaseModel, ConfigDict, Field
from pydantic.dataclasses import dataclass

from lts_qat.common import CheckpointError, ConfigError, DimensionError, MetricsError
from lts_qat.layers import Parameter, QuantLayer
from lts_qat.quantizer import interval, normalize, quantize_levels
from lts_qat.tensor_core import check_same_shape

logger = logging.getLogger("lts-qat.scheduler")

Strategy = Literal["fixing", "linear", "sine"]


class LtsHyperparams(BaseModel):
    """Freezing hyperparameters (config section ``lts``)."""
    model_config = ConfigDict(extra="forbid")

    mode: Literal["baseline", "lts", "random"] = "lts"
    m: float = Field(0.99, ge=0, lt=1)
    warmup_epochs: int = Field(12, ge=0)
    strategy: Strategy = "linear"
    c: float = Field(0.05, ge=0, le=1)
    # per-layer sparsity trajectory of a prior LTS run, random mode only
    trajectory: Optional[Path] = None


@dataclass(config=ConfigDict(arbitrary_types_allowed=True))
class FreezeState:
    """EMA distances, last levels and the (shared) frozen mask of one layer."""
    bit_width: int
    ema_distance: np.ndarray
    q_prev: np.ndarray
    frozen_mask: np.ndarray
    p: float = 0.0
    t: float = 0.0

    @classmethod
    def initial(cls, q0: np.ndarray, frozen_mask: np.ndarray,
                bit_width: int) -> "FreezeState":
        """D^0 = Delta^B everywhere, as if every level had just changed."""
        if q0.shape != frozen_mask.shape:
            raise DimensionError(f"levels {q0.shape} vs mask {frozen_mask.shape}")
        return cls(bit_width=bit_width,
                   ema_distance=np.full(q0.shape, interval(bit_width), dtype=np.float64),
                   q_prev=q0.astype(np.int16), frozen_mask=frozen_mask)

    @property
    def frozen_count(self) -> int:
        """Frozen positions."""
        return int(self.frozen_mask.sum())


def level_distance(w_n: np.ndarray, q: np.ndarray, bit_width: int) -> np.ndarray:
    """2 * |w_n - q / (2^B - 1)|, the level distance in dequantized-weight units."""
    check_same_shape(w_n, q, "level_distance")
    levels = 2 ** bit_width - 1
    w64 = w_n.astype(np.float64, copy=False)
    return 2.0 * np.abs(w64 - q.astype(np.float64) / levels)


def ema_update(state: FreezeState, distance: np.ndarray, q: np.ndarray,
               m: float) -> FreezeState:
    """D^i = m D^{i-1} + (1 - m) D on unfrozen positions, reset on level change."""
    check_same_shape(distance, state.ema_distance, "ema_update")
    check_same_shape(q, state.q_prev, "ema_update")
    q = q.astype(np.int16)
    active = ~state.frozen_mask
    changed = q != state.q_prev
    same = active & ~changed
    reset = active & changed
    d = state.ema_distance
    d[same] = m * d[same] + (1.0 - m) * distance[same]
    d[reset] = interval(state.bit_width)
    state.q_prev[active] = q[active]
    return state


def rate_schedule(strategy: Strategy, i: int, iters_per_epoch: int, epochs: int,
                  warmup_epochs: int, c: float = 0.05) -> float:
    """Rate p at (1-based) iteration i."""
    total = iters_per_epoch * epochs
    warm = iters_per_epoch * warmup_epochs
    if not 0 <= i <= total:
        raise ConfigError(f"iteration {i} outside [0, {total}]")
    if strategy != "fixing" and warmup_epochs >= epochs:
        raise ConfigError(
            f"{strategy}-growth needs warmup epochs ({warmup_epochs}) < epochs ({epochs})")
    if i <= warm:
        return 0.0
    if strategy == "fixing":
        p = c
    else:
        frac = (i - warm) / (total - warm)
        p = frac if strategy == "linear" else math.sin(frac * math.pi / 2)
    return min(1.0, max(0.0, p))


def threshold(bit_width: int, p: float) -> float:
    """t = Delta^B * p."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"rate p must lie in [0, 1], got {p}")
    return interval(bit_width) * p


def freeze_step(state: FreezeState, t: float,
                param: Optional[Parameter] = None) -> np.ndarray:
    """Freeze every position whose EMA distance is strictly below t.

    The mask only ever grows. When ``param`` is given, newly frozen
    positions get their momentum zeroed.
    """
    fresh = ~state.frozen_mask & (state.ema_distance < t)
    if param is not None:
        param.freeze(fresh)
        if param.frozen_mask is not state.frozen_mask:
            state.frozen_mask |= fresh
    else:
        state.frozen_mask |= fresh
    state.t = t
    return state.frozen_mask


def iterations_to_freeze(m: float, delta: float, d_inst: float, t: float,
                         limit: int = 1_000_000) -> Optional[int]:
    """Smallest n with m^n * delta + (1 - m^n) * d_inst < t, None if unreachable."""
    for n in range(limit + 1):
        mn = m ** n
        if mn * delta + (1 - mn) * d_inst < t:
            return n
    return None


class LayerFreezeStats(BaseModel):
    """Per-layer outcome of one scheduler step."""
    layer: str
    frozen: int
    total: int
    p: float
    t: float
    newly_frozen: int = 0

    @property
    def sparsity(self) -> float:
        """Frozen fraction of the layer."""
        return self.frozen / self.total if self.total else 0.0


def _current_levels(layer: QuantLayer) -> tuple[np.ndarray, np.ndarray]:
    """Re-quantize the weight only: normalized weight and levels."""
    bounds_w, _ = layer.bounds()
    w_n = normalize(layer.weight.value, bounds_w)
    return w_n, quantize_levels(w_n, layer.bit_width)


class LtsScheduler:
    """Runs the freezing rule after every optimizer step."""

    def __init__(self, layers: list[QuantLayer], hparams: LtsHyperparams,
                 iters_per_epoch: int, epochs: int):
        if hparams.strategy != "fixing" and hparams.warmup_epochs >= epochs:
            raise ConfigError(
                f"{hparams.strategy}-growth needs lts.warmup_epochs < epochs")
        self.layers = layers
        self.hparams = hparams
        self.iters_per_epoch = iters_per_epoch
        self.epochs = epochs
        self.states: dict[str, FreezeState] = {}
        for layer in layers:
            _, q = _current_levels(layer)
            self.states[layer.name] = FreezeState.initial(
                q, layer.weight.frozen_mask, layer.bit_width)

    def rate(self, i: int) -> float:
        """p at iteration i."""
        h = self.hparams
        return rate_schedule(h.strategy, i, self.iters_per_epoch, self.epochs,
                             h.warmup_epochs, h.c)

    def step(self, i: int) -> list[LayerFreezeStats]:
        """EMA update and freezing for 1-based iteration i."""
        p = self.rate(i)
        stats = []
        for layer in self.layers:
            state = self.states[layer.name]
            w_n, q = _current_levels(layer)
            distance = level_distance(w_n, q, layer.bit_width)
            ema_update(state, distance, q, self.hparams.m)
            t = threshold(layer.bit_width, p)
            state.p = p
            before = state.frozen_count
            if p > 0:
                freeze_step(state, t, layer.weight)
            else:
                state.t = t
            after = state.frozen_count
            stats.append(LayerFreezeStats(
                layer=layer.name, frozen=after, total=state.frozen_mask.size,
                p=p, t=t, newly_frozen=after - before))
        return stats

    def state_tensors(self) -> dict[str, np.ndarray]:
        """EMA distances and last levels for checkpoints."""
        out = {}
        for name, state in self.states.items():
            out[f"lts.{name}.ema"] = state.ema_distance
            out[f"lts.{name}.q_prev"] = state.q_prev
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        """Restore EMA distances and last levels."""
        for name, state in self.states.items():
            for key, target in ((f"lts.{name}.ema", state.ema_distance),
                                (f"lts.{name}.q_prev", state.q_prev)):
                if key not in tensors:
                    raise CheckpointError(f"missing tensor {key}")
                if tensors[key].shape != target.shape:
                    raise CheckpointError(
                        f"shape conflict for tensor {key}: {tensors[key].shape} "
                        f"vs {target.shape}")
                np.copyto(target, tensors[key], casting="unsafe")


def random_freeze_step(frozen_mask: np.ndarray, target_fraction: float,
                       rng: np.random.Generator,
                       param: Optional[Parameter] = None) -> np.ndarray:
    """Freeze uniformly chosen unfrozen positions up to floor(fraction * numel)."""
    # fractions arrive as frozen / total, which need not round-trip exactly
    target = int(math.floor(target_fraction * frozen_mask.size + 1e-9))
    current = int(frozen_mask.sum())
    if target <= current:
        return frozen_mask
    free = np.flatnonzero(~frozen_mask.reshape(-1))
    chosen = rng.choice(free, size=target - current, replace=False)
    fresh = np.zeros(frozen_mask.size, dtype=bool)
    fresh[chosen] = True
    fresh = fresh.reshape(frozen_mask.shape)
    if param is not None:
        param.freeze(fresh)
        if param.frozen_mask is not frozen_mask:
            frozen_mask |= fresh
    else:
        frozen_mask |= fresh
    return frozen_mask


def load_trajectory(path: Path) -> pd.DataFrame:
    """Per-iteration, per-layer sparsity of a prior LTS run (iter x layer)."""
    path = Path(path)
    if path.is_dir():
        path = path / "sparsity_per_layer.csv"
    if not path.exists():
        raise MetricsError(f"trajectory file not found: {path}")
    df = pd.read_csv(path, float_precision="round_trip")
    missing = {"iter", "layer", "sparsity"} - set(df.columns)
    if missing:
        raise MetricsError(f"trajectory {path} lacks columns {sorted(missing)}")
    return df.pivot(index="iter", columns="layer", values="sparsity").sort_index()


class RandomFreezer:
    """Random-frozen control matching a recorded LTS sparsity trajectory."""

    def __init__(self, layers: list[QuantLayer], trajectory: pd.DataFrame,
                 total_iterations: int, seed: int = 0):
        if len(trajectory.index) < total_iterations:
            raise MetricsError(
                f"trajectory covers {len(trajectory.index)} iterations, "
                f"run needs {total_iterations}")
        names = [layer.name for layer in layers]
        absent = [n for n in names if n not in trajectory.columns]
        if absent:
            raise MetricsError(f"trajectory has no layers {absent}")
        self.layers = layers
        self.trajectory = trajectory
        self.seed = seed

    def step(self, i: int) -> list[LayerFreezeStats]:
        """Match the recorded frozen fraction of iteration i (1-based)."""
        if i not in self.trajectory.index:
            raise MetricsError(f"trajectory has no iteration {i}")
        row = self.trajectory.loc[i]
        rng = np.random.default_rng([self.seed, i])
        stats = []
        for layer in self.layers:
            before = layer.weight.frozen_count
            random_freeze_step(layer.weight.frozen_mask, float(row[layer.name]),
                               rng, layer.weight)
            after = layer.weight.frozen_count
            stats.append(LayerFreezeStats(
                layer=layer.name, frozen=after, total=layer.weight.frozen_mask.size,
                p=0.0, t=0.0, newly_frozen=after - before))
        return stats
