"""Experiment orchestration: run specs, the pipeline, grids, and reports.

A RunSpec names one experiment cell: which data family to protect, which
perturbation method (if any), which training paradigm, and all hyperparameters.
Its ``run_id`` is a content hash over every field except the output directory,
so re-running a spec anywhere reproduces byte-identical result CSVs.

Pipeline stages run in order: data, pretrain, gen-ue, train, evaluate,
diagnose. A failing stage aborts the run with the stage name attached and
leaves artifacts from completed stages on disk.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import diagnostics as dg
from .data import Dataset, gen_data, save_dataset
from .errors import ConfigError, InputError, StageError
from .generation import (GenConfig, PerturbationSet, apply_perturbations,
                         generate_emn, generate_ssc, save_perturbations)
from .model import (STAGE_NAMES, FreezeMask, StagedNet, load_checkpoint,
                    save_checkpoint)
from .training import (EVAL_HEADER, TrainConfig, eval_row, evaluate,
                       sf_pretrain, train)

METHODS = ("clean", "emn", "ssc")
PARADIGMS = ("scratch", "pf", "sf")
SF_AUX_STAGES = ("S1", "S2")


@dataclass(frozen=True)
class RunSpec:
    """One experiment cell. Field names double as config-file keys."""

    name: str = "run"
    seed: int = 0
    # data
    family: int = 0
    pretrain_family: int = 1
    num_classes: int = 4
    n_train: int = 2048
    n_test: int = 512
    image_size: int = 16
    # perturbation
    method: str = "clean"
    epsilon: float = 8.0 / 255.0
    eta: float = 8.0 / 255.0 / 4.0
    alpha: float = 0.1
    inner_steps: int = 5
    gen_epochs: int = 20
    gen_batch: int = 64
    lam: float = 1.0
    align_stages: str = "S1"
    # paradigm
    paradigm: str = "scratch"
    freeze: str = "-"
    lambda_sf: float = 0.0
    pretrain_epochs: int = 30
    # training
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # plumbing (excluded from the run_id hash)
    output_dir: str = "runs/run"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.family == self.pretrain_family:
            raise ConfigError("pretrain_family must differ from the protected family")
        try:
            FreezeMask.parse(self.freeze)
        except InputError as exc:
            raise ConfigError(f"bad freeze mask: {exc}") from exc

    @property
    def run_id(self) -> str:
        digest = hashlib.sha256()
        for f in fields(self):
            if f.name == "output_dir":
                continue
            digest.update(f"{f.name}={getattr(self, f.name)!r};".encode("utf-8"))
        return digest.hexdigest()[:12]

    def freeze_mask(self) -> FreezeMask:
        return FreezeMask.parse(self.freeze)

    def gen_config(self) -> GenConfig:
        return GenConfig(
            epsilon=self.epsilon, eta=self.eta, alpha=self.alpha,
            inner_steps=self.inner_steps, epochs=self.gen_epochs,
            batch_size=self.gen_batch,
            lam=self.lam if self.method == "ssc" else 0.0,
            align_stages=tuple(s.strip() for s in self.align_stages.split(",") if s.strip()),
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        freeze = self.freeze_mask() if self.paradigm != "scratch" else FreezeMask()
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            momentum=self.momentum, weight_decay=self.weight_decay,
            seed=self.seed, freeze=freeze, lambda_sf=self.lambda_sf,
            paradigm=self.paradigm,
        )

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.pretrain_epochs, batch_size=self.batch_size, lr=self.lr,
            momentum=self.momentum, weight_decay=self.weight_decay,
            seed=self.seed, lambda_sf=self.lambda_sf,
            paradigm="sf" if self.lambda_sf > 0 else "scratch",
        )


# ---------------------------------------------------------------------------
# flat key=value config files


def parse_config(text: str) -> dict:
    """Parse `key = value` lines; `#` starts a comment; blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def format_config(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def spec_from_mapping(values: dict) -> RunSpec:
    """Build a RunSpec from string-valued config keys, with type coercion."""
    kwargs = {}
    by_name = {f.name: f for f in fields(RunSpec)}
    for key, value in values.items():
        if key not in by_name:
            raise ConfigError(f"unknown config key {key!r}")
        ftype = by_name[key].type
        try:
            if ftype == "int":
                kwargs[key] = int(value)
            elif ftype == "float":
                kwargs[key] = float(value)
            else:
                kwargs[key] = str(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    seed_override = os.environ.get("UEFORGE_SEED")
    if seed_override is not None:
        try:
            kwargs["seed"] = int(seed_override)
        except ValueError as exc:
            raise ConfigError(f"UEFORGE_SEED must be an integer, got {seed_override!r}") from exc
    return RunSpec(**kwargs)


def load_spec(path: str) -> RunSpec:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read spec file {path}: {exc}") from exc
    return spec_from_mapping(parse_config(text))


def save_spec(spec: RunSpec, path: str) -> None:
    values = {k: v for k, v in asdict(spec).items()}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(values))


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class RunResult:
    spec: RunSpec
    run_id: str
    test_accuracy: float
    test_loss: float
    results_csv: str
    diagnostics_csv: str | None
    artifacts: dict = field(default_factory=dict)


def _stage(name: str):
    def deco(fn):
        def wrapped(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        return wrapped
    return deco


@_stage("data")
def _stage_data(spec: RunSpec, out: str):
    train_ds, test_ds = gen_data(spec.seed, spec.num_classes, spec.n_train,
                                 spec.n_test, spec.family, spec.image_size)
    save_dataset(train_ds, os.path.join(out, "train.ueds"))
    save_dataset(test_ds, os.path.join(out, "test.ueds"))
    pre = None
    if spec.paradigm != "scratch" or spec.method == "ssc":
        pre = gen_data(spec.seed, spec.num_classes, spec.n_train, spec.n_test,
                       spec.pretrain_family, spec.image_size)
        save_dataset(pre[0], os.path.join(out, "pretrain_train.ueds"))
        save_dataset(pre[1], os.path.join(out, "pretrain_test.ueds"))
    return train_ds, test_ds, pre


def _fresh_net(spec: RunSpec, aux_stages=()) -> StagedNet:
    return StagedNet(in_channels=1, image_size=spec.image_size,
                     num_classes=spec.num_classes, aux_stages=aux_stages,
                     seed=spec.seed)


@_stage("pretrain")
def _stage_pretrain(spec: RunSpec, pre, out: str):
    """Train the initialization checkpoint on the disjoint source family."""
    aux = SF_AUX_STAGES if (spec.paradigm == "sf" and spec.lambda_sf > 0) else ()
    net = _fresh_net(spec, aux_stages=aux)
    sf_pretrain(net, pre[0], spec.pretrain_config())
    path = os.path.join(out, "pretrained.uewt")
    save_checkpoint(net, path)
    return net, path


@_stage("gen-ue")
def _stage_gen_ue(spec: RunSpec, train_ds: Dataset, pre, out: str):
    surrogate = _fresh_net(spec)
    cfg = spec.gen_config()
    if spec.method == "emn":
        ps = generate_emn(train_ds, surrogate, cfg)
    else:
        reference = _fresh_net(spec)
        ref_cfg = replace(spec.pretrain_config(), lambda_sf=0.0, paradigm="scratch")
        train(reference, pre[0], ref_cfg)
        save_checkpoint(reference, os.path.join(out, "reference.uewt"))
        # anchored shallow branch: the surrogate's stages up to the deepest
        # alignment tap are copied from the reference and frozen, so both
        # branches of the alignment term stay identical and the outer step
        # carves the perturbation entirely through the reference's own
        # shallow filters; deep stages stay random and trainable so the
        # inner loop still has classification error to exploit
        depth = max(STAGE_NAMES.index(s) for s in cfg.align_stages)
        anchored_stages = ("stem",) + tuple(STAGE_NAMES[: depth + 1])
        anchored = tuple(f"{s}." for s in anchored_stages)
        ref_params = reference.main_params()
        for name, p in surrogate.main_params().items():
            if name.startswith(anchored):
                p.data[...] = ref_params[name].data
        cfg = replace(cfg, surrogate_freeze=FreezeMask.parse(",".join(anchored_stages)))
        ps = generate_ssc(train_ds, surrogate, cfg, reference)
    save_perturbations(ps, os.path.join(out, "deltas.uepd"))
    return ps


@_stage("train")
def _stage_train(spec: RunSpec, train_ds: Dataset, pretrained_path, out: str):
    net = _fresh_net(spec)
    if spec.paradigm != "scratch":
        load_checkpoint(net, pretrained_path)
    train(net, train_ds, spec.train_config())
    path = os.path.join(out, "final.uewt")
    save_checkpoint(net, path)
    return net, path


@_stage("evaluate")
def _stage_evaluate(spec: RunSpec, net, used_train: Dataset, test_ds: Dataset, out: str):
    cfg = spec.train_config()
    rows = []
    for ds in (used_train, test_ds):
        report = evaluate(net, ds)
        rows.append(eval_row(spec.run_id, cfg, spec.method, report, spec.epochs))
    path = os.path.join(out, "results.csv")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_HEADER)
        for row in rows:
            writer.writerow([row[k] for k in EVAL_HEADER])
    os.replace(tmp, path)
    test_report = [r for r in rows if r["split"] == "test"][-1]
    return float(test_report["accuracy"]), float(test_report["loss"]), path


@_stage("diagnose")
def _stage_diagnose(spec: RunSpec, net, clean_train: Dataset, ps: PerturbationSet,
                    out: str, sample: int = 256):
    x = clean_train.images[:sample]
    delta = ps.deltas[:sample]
    rows = []
    curve = dg.cosine_similarity(net, x, delta)
    rows += dg.metric_rows(spec.run_id, "cossim", curve.as_rows())
    for stage in STAGE_NAMES:
        rows += dg.metric_rows(spec.run_id, "ptr",
                               [(stage, dg.ptr(net, x, delta, stage))])
    p_delta = dg.radial_profile(dg.mean_power_spectrum(delta))
    p_x = dg.radial_profile(dg.mean_power_spectrum(x))
    rows += dg.metric_rows(spec.run_id, "psd", p_delta.bins)
    rsd = dg.relative_spectral_density(p_delta, p_x)
    rows += dg.metric_rows(spec.run_id, "rsd", list(enumerate(rsd)))
    path = os.path.join(out, "diagnostics.csv")
    dg.write_metric_rows(path, rows)
    return path


def run(spec: RunSpec) -> RunResult:
    """Execute one experiment cell end to end under ``spec.output_dir``."""
    out = spec.output_dir
    os.makedirs(out, exist_ok=True)
    save_spec(spec, os.path.join(out, "spec.cfg"))

    train_ds, test_ds, pre = _stage_data(spec, out)

    pretrained_path = None
    if spec.paradigm != "scratch":
        _, pretrained_path = _stage_pretrain(spec, pre, out)

    ps = None
    used_train = train_ds
    if spec.method != "clean":
        ps = _stage_gen_ue(spec, train_ds, pre, out)
        used_train = apply_perturbations(train_ds, ps)

    net, final_path = _stage_train(spec, used_train, pretrained_path, out)
    accuracy, loss, results_csv = _stage_evaluate(spec, net, used_train, test_ds, out)

    diagnostics_csv = None
    if ps is not None:
        diagnostics_csv = _stage_diagnose(spec, net, train_ds, ps, out)

    artifacts = {"final": final_path}
    if pretrained_path:
        artifacts["pretrained"] = pretrained_path
    if ps is not None:
        artifacts["deltas"] = os.path.join(out, "deltas.uepd")
    return RunResult(spec, spec.run_id, accuracy, loss, results_csv,
                     diagnostics_csv, artifacts)


# ---------------------------------------------------------------------------
# grid


@dataclass
class GridResult:
    table_csv: str
    failures: list
    cells: dict


def _cell_label(spec: RunSpec) -> str:
    label = spec.paradigm
    if spec.paradigm != "scratch":
        label += f"[{spec.freeze}]"
        if spec.lambda_sf:
            label += f"@sf{spec.lambda_sf:g}"
    return label


def grid(specs: list, table_path: str) -> GridResult:
    """Run every spec; aggregate seed means into a method-by-paradigm table.

    Failed cells are recorded and marked FAILED in the table instead of
    aborting the sweep.
    """
    if not specs:
        raise ConfigError("grid needs at least one RunSpec")
    cells: dict = {}
    failures = []
    for spec in specs:
        key = (spec.method, _cell_label(spec))
        try:
            result = run(spec)
        except StageError as exc:
            failures.append((spec.name, exc.stage, str(exc.cause)))
            cells.setdefault(key, []).append(None)
            continue
        cells.setdefault(key, []).append(result.test_accuracy)

    methods = sorted({m for m, _ in cells}, key=lambda m: METHODS.index(m))
    labels = sorted({c for _, c in cells})
    tmp = f"{table_path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method"] + labels)
        for m in methods:
            row = [m]
            for label in labels:
                accs = cells.get((m, label))
                if accs is None:
                    row.append("")
                elif any(a is None for a in accs):
                    row.append("FAILED")
                else:
                    arr = np.asarray(accs)
                    row.append(f"{arr.mean():.4f}+-{arr.std():.4f}")
            writer.writerow(row)
    os.replace(tmp, table_path)
    return GridResult(table_path, failures, cells)


def report(results_csvs: list, out_path: str) -> str:
    """Concatenate per-run result rows into one summary CSV, sorted."""
    rows = []
    for path in results_csvs:
        with open(path, "r", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != EVAL_HEADER:
                raise ConfigError(f"{path}: unexpected results header {header}")
            rows.extend(tuple(r) for r in reader)
    rows.sort()
    tmp = f"{out_path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_HEADER)
        writer.writerows(rows)
    os.replace(tmp, out_path)
    return out_path
