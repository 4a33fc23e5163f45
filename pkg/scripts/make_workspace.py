"""Build a self-contained toy workspace and drive the full CLI over it.

Writes the five dataset containers (blob inliers, scatter-blob test
outliers, uniform-noise exposure and validation sets) plus a config.json,
then runs train, finetune, gen-synthetic, both fit-detector passes,
evaluate, and report in sequence. The finished workspace is a worked
example of every on-disk format the tools read and write.

Usage:
    python3 scripts/make_workspace.py work/demo
    python3 scripts/make_workspace.py work/demo --seed 3 --no-run
"""

import argparse
import json
import time
from pathlib import Path

from oodkit import cli, toydata
from oodkit.data import save_dataset

CONFIG = {
    "out_dir": "out",
    "tuning_protocol": "zero-shot",
    "datasets": {
        "d_in_train": "d_in_train",
        "d_in_test": "d_in_test",
        "d_out_oe": "d_out_oe",
        "d_out_val": ["d_out_val_0"],
        "d_out_test": ["d_out_test"],
    },
    "network": {
        "input_shape": [3, 8, 8],
        "num_classes": 4,
        "layers": [
            {"kind": "conv2d", "out_channels": 8, "kernel": 3, "padding": 1},
            {"kind": "relu"},
            {"kind": "avgpool", "pool": 2},
            {"kind": "conv2d", "out_channels": 16, "kernel": 3, "padding": 1},
            {"kind": "relu"},
            {"kind": "avgpool", "pool": 2},
            {"kind": "flatten"},
            {"kind": "dense", "out_dim": 32},
            {"kind": "relu"},
            {"kind": "dense", "out_dim": 4},
        ],
    },
    "train": {"epochs": 12, "batch_in": 128, "momentum": 0.9,
              "lr": {"kind": "step-decay", "initial": 0.05,
                     "drop_factor": 1.0}},
    "finetune": {"epochs": 16, "batch_in": 128, "batch_oe": 256,
                 "momentum": 0.9,
                 "lr": {"kind": "cosine", "initial": 0.0025}},
    "grid": {"lam1": [0.0, 0.1], "lam2": [0.5]},
    "detectors": {"eps_grid": [0.0, 0.005, 0.01]},
    "synthetic": {"count": 128},
}


def build(root: Path, seed: int) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    bundle = toydata.trend_datasets(seed)
    for role, value in bundle.items():
        if isinstance(value, list):
            for i, ds in enumerate(value):
                save_dataset(ds, root / f"{role}_{i}")
        else:
            save_dataset(value, root / role)
    config = dict(CONFIG, seed=seed)
    path = root / "config.json"
    path.write_text(json.dumps(config, indent=2) + "\n")
    return path


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root", type=Path, help="workspace directory to create")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-run", action="store_true",
                    help="only write datasets and config, skip the pipeline")
    args = ap.parse_args(argv)

    config = build(args.root, args.seed)
    print(f"workspace at {args.root}, config {config}")
    if args.no_run:
        return 0

    steps = [
        ["train", "--config", str(config)],
        ["finetune", "--config", str(config)],
        ["gen-synthetic", "--config", str(config)],
        ["fit-detector", "--config", str(config), "--detector", "md"],
        ["fit-detector", "--config", str(config), "--detector", "fcgm"],
        ["evaluate", "--config", str(config)],
        ["report", "--config", str(config)],
    ]
    for step in steps:
        t0 = time.perf_counter()
        print(f"$ oodkit {' '.join(step)}", flush=True)
        rc = cli.main(step)
        print(f"  -> exit {rc} in {time.perf_counter() - t0:.1f}s")
        if rc not in (0, 4):
            return rc
    print(f"artifacts under {args.root / 'out'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
