"""Sweep the semantic-focus pretraining weight and finetune on both UE methods.

For each seed: generate EMN and SSC perturbation sets once, pretrain the
source-family checkpoint at each lambda_sf, then finetune with frozen shallow
components on each perturbed dataset. Shares datasets and perturbations
across the sweep so each lambda point costs only two finetunes.
"""

import argparse
import csv
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ueforge.data import gen_data
from ueforge.generation import (GenConfig, apply_perturbations, generate_emn,
                                generate_ssc)
from ueforge.harness import SF_AUX_STAGES
from ueforge.model import FreezeMask, StagedNet
from ueforge.training import TrainConfig, evaluate, sf_pretrain, train


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/lambda_sweep.csv")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 1.0, 3.0])
    parser.add_argument("--freeze", default="stem,S1")
    parser.add_argument("--n-train", type=int, default=2048)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--gen-alpha", type=float, default=0.1)
    parser.add_argument("--gen-lambda", type=float, default=1.0,
                        help="camouflage weight for SSC generation")
    args = parser.parse_args()

    start = time.time()
    freeze = FreezeMask.parse(args.freeze)
    rows = []
    for seed in args.seeds:
        train_ds, test_ds = gen_data(seed, 4, args.n_train, 512, family=0)
        pre_ds, _ = gen_data(seed, 4, args.n_train, 512, family=1)

        reference = StagedNet(seed=seed + 7)
        train(reference, pre_ds, TrainConfig(seed=seed, epochs=args.epochs))

        gen_cfg = GenConfig(seed=seed, alpha=args.gen_alpha)
        ssc_surrogate = StagedNet(seed=seed)
        ref_params = reference.main_params()
        for name, p in ssc_surrogate.main_params().items():
            if name.startswith(("stem.", "S1.")):
                p.data[...] = ref_params[name].data
        sets = {
            "emn": generate_emn(train_ds, StagedNet(seed=seed), gen_cfg),
            "ssc": generate_ssc(
                train_ds, ssc_surrogate,
                GenConfig(seed=seed, alpha=args.gen_alpha, lam=args.gen_lambda,
                          surrogate_freeze=FreezeMask.parse(args.freeze)),
                reference),
        }
        poisoned = {m: apply_perturbations(train_ds, ps) for m, ps in sets.items()}
        print(f"[{time.time() - start:5.0f}s] seed {seed}: perturbations ready")

        for lam in args.lambdas:
            aux = SF_AUX_STAGES if lam > 0 else ()
            pre_net = StagedNet(aux_stages=aux, seed=seed + 7)
            sf_pretrain(pre_net, pre_ds, TrainConfig(
                seed=seed, epochs=args.epochs, lambda_sf=lam,
                paradigm="sf" if lam > 0 else "scratch"))
            snapshot = {k: v.data.copy() for k, v in pre_net.main_params().items()}

            for method in ("emn", "ssc"):
                victim = StagedNet(seed=100)
                for name, value in snapshot.items():
                    victim.params[name].data[...] = value
                train(victim, poisoned[method], TrainConfig(
                    seed=seed, epochs=args.epochs, freeze=freeze, paradigm="pf"))
                acc = evaluate(victim, test_ds).accuracy
                rows.append((seed, lam, method, f"{acc:.6f}"))
                print(f"[{time.time() - start:5.0f}s]   lambda_sf={lam:g} "
                      f"{method}: {acc:.4f}")

    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("seed", "lambda_sf", "method", "accuracy"))
        writer.writerows(rows)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
