"""Desk-scale experiment grid: fp initializer, baseline, LTS and random-frozen runs.

Usage: python scripts/desk_experiments.py [config file] [out root]
"""
# pylint: disable=W1203
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import tqdm

from lts_qat.bench import compare_runs
from lts_qat.cli import main

logger = logging.getLogger("lts-qat.desk")
logger.setLevel(logging.INFO)

config_file = sys.argv[1] if len(sys.argv) > 1 else None
out_root = Path(sys.argv[2] if len(sys.argv) > 2 else "runs/desk").absolute()
SEEDS = [0, 1, 2]
BIT_WIDTHS = [2, 4]
FP_EPOCHS = 10


def run(out: Path, seed: int, *overrides: str) -> Path:
    argv = ["train", "--seed", str(seed), "--out", str(out), "--deterministic",
            "--set", "train.progress=false"]
    if config_file:
        argv += ["--config", config_file]
    for item in overrides:
        argv += ["--set", item]
    if main(argv) != 0:
        raise RuntimeError(f"run {out} failed")
    return out


def fp_run(seed: int) -> Path:
    return run(out_root / f"fp/seed{seed}", seed, "mode=fp", f"epochs={FP_EPOCHS}",
               "lts.warmup_epochs=0")


def quantized_runs(seed: int) -> list[Path]:
    init = out_root / f"fp/seed{seed}/checkpoints/epoch_{FP_EPOCHS:04d}.ckpt"
    dirs = []
    for bits in BIT_WIDTHS:
        common = [f"bit_width={bits}", f"train.init_from={init}"]
        base = out_root / f"baseline/b{bits}/seed{seed}"
        lts = out_root / f"lts/b{bits}/seed{seed}"
        rnd = out_root / f"random/b{bits}/seed{seed}"
        dirs.append(run(base, seed, "mode=baseline", *common))
        dirs.append(run(lts, seed, "mode=lts", *common))
        # the control replays the LTS run's per-layer sparsity
        dirs.append(run(rnd, seed, "mode=random", f"lts.trajectory={lts}", *common))
    return dirs


with ThreadPoolExecutor(max_workers=len(SEEDS)) as executor:
    list(tqdm.tqdm(executor.map(fp_run, SEEDS), total=len(SEEDS), desc="fp"))
    run_dirs = [d for dirs in tqdm.tqdm(executor.map(quantized_runs, SEEDS),
                                        total=len(SEEDS), desc="qat") for d in dirs]

runs, table = compare_runs(run_dirs)
runs.to_csv(out_root / "runs.csv", index=False, lineterminator="\n")
table.to_csv(out_root / "comparison.csv", index=False, lineterminator="\n")
logger.info(f"Wrote {out_root / 'comparison.csv'}")
print(table.to_string(index=False))
