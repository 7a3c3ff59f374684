"""Classifier training loops: scratch, finetune with frozen components, and
semantic-focused pretraining with auxiliary shallow heads.

All loops share one SGD schedule (step decay) and one shuffling discipline so
that runs differing only in freeze mask or loss weights stay comparable.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tape, Tensor, no_grad
from .data import Dataset
from .errors import ConfigError, InputError, NumericsError, UsageError
from .model import FreezeMask, StagedNet, apply_freeze, aux_forward, forward

EVAL_HEADER = ("run_id", "paradigm", "method", "freeze_mask",
               "lambda_sf", "seed", "epoch", "split", "accuracy", "loss")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    decay_epochs: tuple = (20, 26)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    freeze: FreezeMask = field(default_factory=FreezeMask)
    lambda_sf: float = 0.0
    paradigm: str = "scratch"
    clip_norm: float = 2.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.lambda_sf < 0:
            raise ConfigError(f"lambda_sf must be nonnegative, got {self.lambda_sf}")
        if self.paradigm not in ("scratch", "pf", "sf"):
            raise ConfigError(f"unknown paradigm {self.paradigm!r}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for boundary in self.decay_epochs:
            if epoch >= boundary:
                lr *= self.decay_factor
        return lr


@dataclass
class EvalReport:
    accuracy: float
    loss: float
    per_class: np.ndarray
    split: str = "test"
    n: int = 0


def _loss_and_correct(net: StagedNet, images, labels):
    logits, _ = forward(net, Tensor(images))
    loss = ad.cross_entropy(logits, labels)
    pred = logits.data.argmax(axis=1)
    return loss, int((pred == labels).sum())


def evaluate(net: StagedNet, ds: Dataset, batch_size: int = 256) -> EvalReport:
    """Exact accuracy and mean loss over a dataset; no parameter updates."""
    if len(ds) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    correct = 0
    loss_sum = 0.0
    hits = np.zeros(ds.num_classes)
    counts = np.zeros(ds.num_classes)
    with no_grad():
        for images, labels in ds.batches(batch_size):
            logits, _ = forward(net, Tensor(images))
            loss = ad.cross_entropy(logits, labels)
            loss_sum += loss.item() * len(labels)
            pred = logits.data.argmax(axis=1)
            correct += int((pred == labels).sum())
            np.add.at(counts, labels, 1.0)
            np.add.at(hits, labels, (pred == labels).astype(np.float64))
    per_class = np.divide(hits, counts, out=np.zeros_like(hits), where=counts > 0)
    return EvalReport(accuracy=correct / len(ds), loss=loss_sum / len(ds),
                      per_class=per_class, split=ds.split, n=len(ds))


def train(net: StagedNet, ds: Dataset, cfg: TrainConfig, loss_log: list | None = None) -> StagedNet:
    """SGD with momentum, weight decay and step decay; honors ``cfg.freeze``.

    The shuffle stream depends only on ``cfg.seed``, so two configs that share
    a seed visit examples in the same order.
    """
    if len(ds) == 0:
        raise InputError("cannot train on an empty dataset")
    apply_freeze(net, cfg.freeze)
    params = [p for p in net.main_params().values() if p.requires_grad]
    if not params:
        raise ConfigError("freeze mask leaves no learnable parameters")
    opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng([int(cfg.seed), 0x5F])
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(len(ds))
        for images, labels in ds.batches(cfg.batch_size, order):
            with Tape():
                loss, _ = _loss_and_correct(net, images, labels)
                ad.backward(loss)
            if not np.isfinite(loss.item()):
                raise NumericsError(f"non-finite training loss at epoch {epoch}")
            ad.clip_gradients(params, cfg.clip_norm)
            opt.step()
            ad.reset_grads(params)
            if loss_log is not None:
                loss_log.append(loss.item())
    return net


def sf_pretrain(net: StagedNet, ds: Dataset, cfg: TrainConfig,
                loss_log: list | None = None) -> StagedNet:
    """Pretrain with auxiliary shallow classification heads.

    Total loss is the head cross-entropy plus ``lambda_sf`` times the summed
    auxiliary cross-entropies. ``lambda_sf == 0`` delegates to ``train`` so the
    update stream is identical to plain pretraining.
    """
    if cfg.lambda_sf == 0.0:
        return train(net, ds, cfg, loss_log)
    if not net.aux_stages:
        raise UsageError("sf_pretrain with lambda_sf > 0 requires auxiliary heads")
    if len(ds) == 0:
        raise InputError("cannot train on an empty dataset")
    apply_freeze(net, cfg.freeze)
    params = net.learnable_params()
    if not params:
        raise ConfigError("freeze mask leaves no learnable parameters")
    opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng([int(cfg.seed), 0x5F])
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(len(ds))
        for images, labels in ds.batches(cfg.batch_size, order):
            with Tape():
                logits, taps = forward(net, Tensor(images), capture=True)
                loss = ad.cross_entropy(logits, labels)
                for aux_logits in aux_forward(net, taps):
                    aux_loss = ad.cross_entropy(aux_logits, labels)
                    loss = ad.add(loss, ad.scale(aux_loss, cfg.lambda_sf))
                ad.backward(loss)
            if not np.isfinite(loss.item()):
                raise NumericsError(f"non-finite pretraining loss at epoch {epoch}")
            ad.clip_gradients(params, cfg.clip_norm)
            opt.step()
            ad.reset_grads(params)
            if loss_log is not None:
                loss_log.append(loss.item())
    return net


def finetune_config(cfg: TrainConfig, freeze: FreezeMask) -> TrainConfig:
    return replace(cfg, freeze=freeze, paradigm="pf", lambda_sf=0.0)


def write_eval_rows(path: str, rows: list, append: bool = False) -> None:
    """Write evaluation rows with the canonical header; rows are tuples or
    dicts keyed by EVAL_HEADER."""
    mode = "a" if append and os.path.exists(path) else "w"
    tmp = path if mode == "a" else f"{path}.tmp.{os.getpid()}"
    with open(tmp, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(EVAL_HEADER)
        for row in rows:
            if isinstance(row, dict):
                row = [row[k] for k in EVAL_HEADER]
            writer.writerow(row)
    if mode == "w":
        os.replace(tmp, path)


def eval_row(run_id: str, cfg: TrainConfig, method: str, report: EvalReport,
             epoch: int) -> dict:
    return {
        "run_id": run_id,
        "paradigm": cfg.paradigm,
        "method": method,
        "freeze_mask": str(cfg.freeze),
        "lambda_sf": repr(cfg.lambda_sf),
        "seed": cfg.seed,
        "epoch": epoch,
        "split": report.split,
        "accuracy": f"{report.accuracy:.6f}",
        "loss": f"{report.loss:.6f}",
    }
