#!/usr/bin/env python3
"""Train and evaluate both models on the synthetic rule-structure datasets.

Generates each dataset (cached under --workdir), trains the conditional
message-passing baseline and the path-neighbor model over --seeds seeds,
and prints one line per (dataset, model, seed) plus per-dataset means.

Usage:
  python3 scripts/run_synthetic.py --structures C3 U --seeds 1
  python3 scripts/run_synthetic.py            # everything, 3 seeds (slow)
"""

import argparse
import json
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from pngnn.kg import load_dataset, save_bundle
from pngnn.synth import STRUCTURES, SynthConfig, generate
from pngnn.training import TrainConfig, train, evaluate_checkpoint


def dataset_dir(workdir: str, structure: str) -> str:
    path = os.path.join(workdir, f"ds_{structure}")
    if not os.path.isdir(path):
        bundle, manifest = generate(SynthConfig(structure=structure, seed=0))
        save_bundle(bundle, path)
        with open(os.path.join(path, "meta.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)
    return path


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--structures", nargs="*", default=list(STRUCTURES))
    ap.add_argument("--models", nargs="*", default=["cgnn", "pngnn"])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--config", default=os.path.join(
        os.path.dirname(__file__), "..", "configs", "synthetic.json"))
    ap.add_argument("--workdir", default="runs/synthetic")
    args = ap.parse_args()

    with open(args.config) as fh:
        base = json.load(fh)

    os.makedirs(args.workdir, exist_ok=True)
    summary: dict[tuple[str, str], list[float]] = {}
    for structure in args.structures:
        data = dataset_dir(args.workdir, structure)
        bundle = load_dataset(data, layout="synthetic")
        for model in args.models:
            for seed in range(args.seeds):
                cfg = TrainConfig.from_json({**base, "model": model,
                                             "seed": seed})
                out = os.path.join(args.workdir,
                                   f"{structure}_{model}_s{seed}")
                t0 = time.time()
                result = train(cfg, bundle, out)
                record, _ = evaluate_checkpoint(result.checkpoint_path,
                                                bundle, "test")
                mins = (time.time() - t0) / 60
                print(f"{structure:8s} {model:5s} seed={seed} "
                      f"hits1={record['hits1']:.4f} mrr={record['mrr']:.4f} "
                      f"({mins:.1f} min)", flush=True)
                summary.setdefault((structure, model), []).append(
                    record["hits1"])
    print("\nmean Hits@1 over seeds:")
    for (structure, model), vals in sorted(summary.items()):
        print(f"  {structure:8s} {model:5s} {100 * sum(vals) / len(vals):6.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
