"""Command-line interface.

Subcommands cover each pipeline stage (gen-data, pretrain, sf-pretrain,
gen-ue, train, evaluate, diagnose) plus orchestration (grid, report).
Exit codes: 0 success, 2 configuration or input error, 3 stage failure.
``UEFORGE_SEED`` overrides any seed for quick smoke runs.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import diagnostics as dg
from . import harness
from .data import gen_data, load_dataset, save_dataset
from .errors import (ConfigError, FormatError, InputError, StageError,
                     UEForgeError, UsageError)
from .generation import (GenConfig, apply_perturbations, generate_emn,
                         generate_ssc, load_perturbations, save_perturbations)
from .model import (STAGE_NAMES, FreezeMask, StagedNet, load_checkpoint,
                    save_checkpoint)
from .training import TrainConfig, evaluate, sf_pretrain, train as train_net

_CONFIG_ERRORS = (ConfigError, FormatError, InputError, UsageError, OSError)


def _seed(value: int) -> int:
    override = os.environ.get("UEFORGE_SEED")
    if override is None:
        return value
    try:
        return int(override)
    except ValueError as exc:
        raise ConfigError(f"UEFORGE_SEED must be an integer, got {override!r}") from exc


def _net_for(ds, seed: int, aux_stages=()) -> StagedNet:
    n, c, h, w = ds.images.shape
    return StagedNet(in_channels=c, image_size=h, num_classes=ds.num_classes,
                     aux_stages=aux_stages, seed=seed)


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ueforge",
        description="Desk-scale laboratory for unlearnable examples.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural shape dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--n-train", type=int, default=2048)
    p.add_argument("--n-test", type=int, default=512)
    p.add_argument("--family", type=int, default=0)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("pretrain", help="train an initialization checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)

    p = sub.add_parser("sf-pretrain",
                       help="pretrain with auxiliary shallow heads")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda-sf", type=float, default=1.0)
    p.add_argument("--aux-stages", default="S1,S2")
    _add_train_flags(p)

    p = sub.add_parser("gen-ue", help="generate unlearnable perturbations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("emn", "ssc"), default="emn")
    p.add_argument("--eps", type=float, default=8.0 / 255.0)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--inner-steps", type=int, default=5)
    p.add_argument("--eta", type=float, default=None,
                   help="outer step size (default eps/4)")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--surrogate-freeze", default=None,
                   help="stages frozen in the surrogate during generation "
                        "(default: none for emn; the anchored stages for ssc; "
                        "pass '-' to force none)")
    p.add_argument("--align-stages", default="S1")
    p.add_argument("--reference", default=None,
                   help="checkpoint for the frozen reference extractor (ssc)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a classifier, optionally finetuning")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None, help="initialization checkpoint")
    p.add_argument("--freeze", default="-")
    p.add_argument("--perturb", default=None, help="UEPD file applied to the data")
    _add_train_flags(p)

    p = sub.add_parser("evaluate", help="report accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("diagnose", help="feature and spectral diagnostics")
    p.add_argument("--metric", required=True,
                   choices=("cossim", "ptr", "psd", "rsd", "residual"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--perturb", required=True)
    p.add_argument("--stage", default="S1", choices=STAGE_NAMES)
    p.add_argument("--sample", type=int, default=256)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.add_argument("--run-id", default="adhoc")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("grid", help="run a grid of spec files")
    p.add_argument("specs", nargs="+", help="flat key=value spec files")
    p.add_argument("--table", required=True, help="output pivot CSV")

    p = sub.add_parser("report", help="merge result CSVs into one summary")
    p.add_argument("results", nargs="+")
    p.add_argument("--out", required=True)

    return parser


def _cmd_gen_data(args) -> int:
    seed = _seed(args.seed)
    train_ds, test_ds = gen_data(seed, args.classes, args.n_train, args.n_test,
                                 args.family, args.image_size)
    os.makedirs(args.out_dir, exist_ok=True)
    train_path = os.path.join(args.out_dir, "train.ueds")
    test_path = os.path.join(args.out_dir, "test.ueds")
    save_dataset(train_ds, train_path)
    save_dataset(test_ds, test_path)
    print(f"wrote {train_path} ({len(train_ds)} examples) and "
          f"{test_path} ({len(test_ds)} examples)")
    return 0


def _train_config(args, freeze: FreezeMask = FreezeMask(), lambda_sf: float = 0.0,
                  paradigm: str = "scratch") -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       lr=args.lr, momentum=args.momentum,
                       weight_decay=args.weight_decay, seed=_seed(args.seed),
                       freeze=freeze, lambda_sf=lambda_sf, paradigm=paradigm)


def _cmd_pretrain(args) -> int:
    ds = load_dataset(args.data, split="train")
    net = _net_for(ds, _seed(args.seed))
    train_net(net, ds, _train_config(args))
    save_checkpoint(net, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_sf_pretrain(args) -> int:
    ds = load_dataset(args.data, split="train")
    aux = tuple(s.strip() for s in args.aux_stages.split(",") if s.strip())
    net = _net_for(ds, _seed(args.seed), aux_stages=aux)
    cfg = _train_config(args, lambda_sf=args.lambda_sf,
                        paradigm="sf" if args.lambda_sf > 0 else "scratch")
    sf_pretrain(net, ds, cfg)
    save_checkpoint(net, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_gen_ue(args) -> int:
    ds = load_dataset(args.data, split="train")
    seed = _seed(args.seed)
    surrogate = _net_for(ds, seed)
    align = tuple(s.strip() for s in args.align_stages.split(",") if s.strip())
    anchored: tuple[str, ...] = ()
    if args.method == "ssc":
        bad = [s for s in align if s not in STAGE_NAMES]
        if bad:
            raise ConfigError(f"unknown alignment stages: {','.join(bad)}")
        depth = max(STAGE_NAMES.index(s) for s in align)
        anchored = ("stem",) + tuple(STAGE_NAMES[: depth + 1])
    freeze_spec = args.surrogate_freeze
    if freeze_spec is None:
        freeze_spec = ",".join(anchored) if anchored else "-"
    cfg = GenConfig(epsilon=args.eps,
                    eta=args.eta if args.eta is not None else args.eps / 4.0,
                    alpha=args.alpha, inner_steps=args.inner_steps,
                    epochs=args.epochs, batch_size=args.batch_size,
                    lam=args.lam if args.method == "ssc" else 0.0,
                    align_stages=align,
                    surrogate_freeze=FreezeMask.parse(freeze_spec),
                    seed=seed)
    if args.method == "emn":
        ps = generate_emn(ds, surrogate, cfg)
    else:
        if args.reference is None:
            raise ConfigError("gen-ue --method ssc requires --reference")
        reference = _net_for(ds, seed)
        load_checkpoint(reference, args.reference)
        # the surrogate's stages up to the deepest alignment tap start
        # from the reference so the perturbation is carved through the
        # same shallow filters the reference actually uses
        prefixes = tuple(f"{s}." for s in anchored)
        ref_params = reference.main_params()
        for name, p in surrogate.main_params().items():
            if name.startswith(prefixes):
                p.data[...] = ref_params[name].data
        ps = generate_ssc(ds, surrogate, cfg, reference)
    save_perturbations(ps, args.out)
    print(f"wrote {args.out} (N={len(ps)}, max-linf={ps.max_linf():.6f})")
    return 0


def _cmd_train(args) -> int:
    ds = load_dataset(args.data, split="train")
    if args.perturb:
        ds = apply_perturbations(ds, load_perturbations(args.perturb))
    seed = _seed(args.seed)
    net = _net_for(ds, seed)
    if args.init:
        load_checkpoint(net, args.init)
    freeze = FreezeMask.parse(args.freeze)
    paradigm = "pf" if args.init else "scratch"
    train_net(net, ds, _train_config(args, freeze=freeze, paradigm=paradigm))
    save_checkpoint(net, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    ds = load_dataset(args.data, split="test")
    net = _net_for(ds, _seed(args.seed))
    load_checkpoint(net, args.checkpoint)
    report = evaluate(net, ds)
    print(f"accuracy={report.accuracy:.4f} loss={report.loss:.4f} n={report.n}")
    return 0


def _cmd_diagnose(args) -> int:
    ds = load_dataset(args.data, split="train")
    ps = load_perturbations(args.perturb)
    if len(ps) != len(ds):
        raise InputError(f"{len(ps)} perturbations for {len(ds)} examples")
    net = _net_for(ds, _seed(args.seed))
    load_checkpoint(net, args.checkpoint)
    sample = min(args.sample, len(ds))
    x = ds.images[:sample]
    delta = ps.deltas[:sample]

    if args.metric == "cossim":
        curve = dg.cosine_similarity(net, x, delta)
        rows = dg.metric_rows(args.run_id, "cossim", curve.as_rows())
    elif args.metric == "ptr":
        rows = dg.metric_rows(args.run_id, "ptr",
                              [(s, dg.ptr(net, x, delta, s)) for s in STAGE_NAMES])
    elif args.metric == "psd":
        profile = dg.radial_profile(dg.mean_power_spectrum(delta))
        rows = dg.metric_rows(args.run_id, "psd", profile.bins)
    elif args.metric == "rsd":
        p_delta = dg.radial_profile(dg.mean_power_spectrum(delta))
        p_x = dg.radial_profile(dg.mean_power_spectrum(x))
        rsd = dg.relative_spectral_density(p_delta, p_x)
        rows = dg.metric_rows(args.run_id, "rsd", list(enumerate(rsd)))
    else:
        residual = dg.feature_residual(net, x, delta, args.stage)
        norms = np.linalg.norm(residual.reshape(residual.shape[0], -1), axis=1)
        rows = dg.metric_rows(args.run_id, "residual",
                              [(args.stage, float(norms.mean()))])

    if args.out:
        dg.write_metric_rows(args.out, rows)
        print(f"wrote {args.out}")
    else:
        print(",".join(dg.METRIC_HEADER))
        for row in rows:
            print(",".join(str(v) for v in row))
    return 0


def _cmd_grid(args) -> int:
    specs = [harness.load_spec(path) for path in args.specs]
    result = harness.grid(specs, args.table)
    print(f"wrote {result.table_csv}")
    if result.failures:
        for name, stage, cause in result.failures:
            print(f"FAILED {name}: stage {stage}: {cause}", file=sys.stderr)
        return 3
    return 0


def _cmd_report(args) -> int:
    out = harness.report(args.results, args.out)
    print(f"wrote {out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "sf-pretrain": _cmd_sf_pretrain,
    "gen-ue": _cmd_gen_ue,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "diagnose": _cmd_diagnose,
    "grid": _cmd_grid,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return _COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UEForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def cli_entry() -> None:
    sys.exit(main())
