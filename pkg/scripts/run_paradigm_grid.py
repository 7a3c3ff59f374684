"""Run the method-by-paradigm accuracy grid and emit a pivot CSV.

Each cell is a full pipeline run (data, optional pretrain, optional
perturbation generation, victim training, evaluation), repeated over seeds.
Failed cells are marked FAILED in the table instead of aborting the sweep.
"""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ueforge.harness import RunSpec, grid


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="runs/grid")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--methods", nargs="+", default=["clean", "emn", "ssc"])
    parser.add_argument("--paradigms", nargs="+", default=["scratch", "pf"])
    parser.add_argument("--freeze", default="stem,S1",
                        help="components frozen under the pf paradigm")
    parser.add_argument("--n-train", type=int, default=2048)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--gen-epochs", type=int, default=20)
    args = parser.parse_args()

    specs = []
    for method in args.methods:
        for paradigm in args.paradigms:
            if method == "clean" and paradigm != "scratch":
                continue
            for seed in args.seeds:
                name = f"{method}-{paradigm}-s{seed}"
                specs.append(RunSpec(
                    name=name, seed=seed, method=method, paradigm=paradigm,
                    freeze=args.freeze if paradigm != "scratch" else "-",
                    n_train=args.n_train, epochs=args.epochs,
                    gen_epochs=args.gen_epochs,
                    output_dir=os.path.join(args.out_dir, name),
                ))

    os.makedirs(args.out_dir, exist_ok=True)
    table = os.path.join(args.out_dir, "grid.csv")
    start = time.time()
    result = grid(specs, table)
    print(f"{len(specs)} cells in {time.time() - start:.0f}s -> {table}")
    with open(table) as fh:
        print(fh.read())
    for name, stage, cause in result.failures:
        print(f"FAILED {name}: stage {stage}: {cause}", file=sys.stderr)
    return 1 if result.failures else 0


if __name__ == "__main__":
    sys.exit(main())
