#!/usr/bin/env python3
"""Directional study: attention modules + center-distance labels vs the plain baseline.

Trains both arms with the identical desk schedule on the same synthetic
training set, tracks the same fixed benchmark, and reports whether the
full configuration beats the baseline on mean IoU. With --seeds, repeats
the study over several seeds and reports how often the ordering holds.
"""

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from siamfuse.experiments import (
    BASELINE_ARM,
    FUSION_ARM,
    benchmark_records,
    compare_arms,
    mean_iou,
    training_records,
)
from siamfuse.metrics import report_rows, write_report
from siamfuse.training import TrainConfig


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seeds", type=int, nargs="+", default=[0], help="one study per seed")
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--steps-per-epoch", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--train-sequences", type=int, default=12)
    p.add_argument("--train-length", type=int, default=60)
    p.add_argument("--bench-sequences", type=int, default=10)
    p.add_argument("--bench-length", type=int, default=60)
    p.add_argument("--jobs", type=int, default=4)
    return p.parse_args()


def main():
    args = parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dataclasses.replace(
        TrainConfig.desk(),
        epochs=args.epochs,
        steps_per_epoch=args.steps_per_epoch,
        batch_size=args.batch_size,
    )
    train_set = training_records(args.train_sequences, length=args.train_length)
    bench = benchmark_records(args.bench_sequences, length=args.bench_length)
    print(f"{len(train_set)} training sequences, {len(bench)} benchmark sequences")

    wins = 0
    summaries = []
    for seed in args.seeds:
        t0 = time.time()
        table, runs_by_arm = compare_arms(
            [FUSION_ARM, BASELINE_ARM], train_set, bench, seed, train_cfg=cfg, jobs=args.jobs
        )
        seed_dir = out / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        (seed_dir / "ablation.json").write_text(
            json.dumps(table.to_json_dict(), indent=2, sort_keys=True) + "\n"
        )
        (seed_dir / "ablation.csv").write_text("\n".join(table.to_csv_lines()) + "\n")
        rows = []
        for name, runs in runs_by_arm.items():
            rows.extend(report_rows(runs, config_name=name))
        write_report(seed_dir / "metrics", rows)

        full = mean_iou(runs_by_arm[FUSION_ARM.name])
        base = mean_iou(runs_by_arm[BASELINE_ARM.name])
        won = full > base
        wins += won
        verdict = "holds" if won else "FAILS"
        summaries.append({"seed": seed, FUSION_ARM.name: full, BASELINE_ARM.name: base, "holds": won})
        print(f"seed {seed}: {FUSION_ARM.name} {full:.4f} vs {BASELINE_ARM.name} {base:.4f} "
              f"-> ordering {verdict} ({time.time() - t0:.1f}s)")

    (out / "summary.json").write_text(json.dumps(summaries, indent=2) + "\n")
    print(f"ordering held in {wins}/{len(args.seeds)} seed(s)")
    return 0 if wins * 2 > len(args.seeds) else 1


if __name__ == "__main__":
    sys.exit(main())
