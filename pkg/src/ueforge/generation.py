"""Unlearnable-example generation by bilevel optimization.

Two methods share one loop:

* ``generate_emn``: sample-wise error-minimizing noise. Inner steps fit a
  surrogate to the perturbed batch; the outer step moves each ``delta_i``
  along the negative sign of the cross-entropy gradient so the batch becomes
  "easier", starving later training of useful error signal.
* ``generate_ssc``: adds a shallow-semantic camouflage term to the inner
  objective. Gram matrices of the surrogate's shallow features on ``x + delta``
  are pulled toward Gram matrices of a frozen reference extractor on clean
  ``x``, so the perturbation survives pretrained shallow filters.

The surrogate is snapshotted at each epoch entry and restored at epoch end.
Within an epoch the inner steps accumulate batch to batch, so the outer
gradient is taken at a progressively trained surrogate; across epochs every
inner trajectory restarts from the same initial weights, which keeps the
trained state an honest per-epoch approximation of the inner argmin instead
of a drifting one.
"""

from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset
from .errors import ConfigError, DimensionError, FormatError, InputError
from .model import (FreezeMask, StagedNet, apply_freeze, forward,
                    shallow_forward)

_PERT_MAGIC = b"UEPD"
_PERT_VERSION = 1

EPSILON_DEFAULT = 8.0 / 255.0


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the bilevel generation loop."""

    epsilon: float = EPSILON_DEFAULT
    eta: float = EPSILON_DEFAULT / 4.0
    alpha: float = 0.1
    inner_steps: int = 5
    epochs: int = 20
    batch_size: int = 64
    lam: float = 0.0
    align_stages: tuple = ("S1",)
    surrogate_freeze: FreezeMask = field(default_factory=FreezeMask)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ConfigError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.eta <= 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.inner_steps < 1:
            raise ConfigError(f"inner_steps must be positive, got {self.inner_steps}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lam < 0:
            raise ConfigError(f"lam must be nonnegative, got {self.lam}")


@dataclass
class PerturbationSet:
    """Per-example additive perturbations with their budget."""

    deltas: np.ndarray
    epsilon: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.deltas.ndim != 4:
            raise InputError(f"deltas must be [N,C,H,W], got shape {self.deltas.shape}")

    def __len__(self):
        return len(self.deltas)

    def max_linf(self) -> float:
        return float(np.abs(self.deltas).max())

    def violations(self, tol: float = 0.0) -> int:
        per_example = np.abs(self.deltas).reshape(len(self), -1).max(axis=1)
        return int((per_example > self.epsilon + tol).sum())


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(delta, -epsilon, epsilon)


def apply_perturbations(ds: Dataset, ps: PerturbationSet) -> Dataset:
    """Return a dataset with ``clip(x + delta, 0, 1)`` and unchanged labels."""
    if len(ps) != len(ds):
        raise InputError(f"{len(ps)} perturbations for {len(ds)} examples")
    if ps.deltas.shape[1:] != ds.images.shape[1:]:
        raise DimensionError(
            f"perturbation shape {ps.deltas.shape[1:]} vs image shape {ds.images.shape[1:]}"
        )
    images = np.clip(ds.images + ps.deltas, 0.0, 1.0)
    return Dataset(images, ds.labels.copy(), ds.num_classes, split=ds.split,
                   seed=ds.seed, family=ds.family,
                   meta={**ds.meta, "perturbed": True})


def semantic_alignment_loss(taps_adv, taps_ref, stages=("S1",)):
    """Mean squared Frobenius gap between Gram matrices at the given stages.

    ``taps_ref`` entries are treated as constants; gradients flow only through
    the adversarial branch.
    """
    if not stages:
        raise InputError("alignment needs at least one stage")
    total = None
    for stage in stages:
        if stage not in taps_adv or stage not in taps_ref:
            raise InputError(f"stage {stage!r} missing from feature taps")
        g_adv = ad.gram(taps_adv[stage])
        ref = taps_ref[stage]
        ref_feat = ref.data if isinstance(ref, Tensor) else np.asarray(ref)
        g_ref = _gram_constant(ref_feat)
        if g_adv.shape != g_ref.shape:
            raise DimensionError(
                f"Gram shapes differ at {stage}: {g_adv.shape} vs {g_ref.shape}"
            )
        diff = ad.sub(g_adv, Tensor(g_ref))
        sq = ad.tsum(ad.mul(diff, diff))
        total = sq if total is None else ad.add(total, sq)
    batch = taps_adv[stages[0]].shape[0]
    return ad.scale(total, 1.0 / (batch * len(stages)))


def _gram_constant(feats: np.ndarray) -> np.ndarray:
    b, c, h, w = feats.shape
    m = feats.reshape(b, c, h * w)
    return np.einsum("bik,bjk->bij", m, m) / (c * h * w)


def _rsem_value(adv: dict, ref: dict, stages) -> float:
    total = 0.0
    for stage in stages:
        gap = _gram_constant(adv[stage]) - _gram_constant(ref[stage])
        total += float((gap * gap).sum())
    batch = adv[stages[0]].shape[0]
    return total / (batch * len(stages))


def _snapshot(net: StagedNet) -> dict:
    return {k: v.data.copy() for k, v in net.params.items()}


def _restore(net: StagedNet, snap: dict) -> None:
    for k, v in snap.items():
        net.params[k].data[...] = v


def _generate(ds: Dataset, surrogate: StagedNet, cfg: GenConfig,
              reference: StagedNet | None) -> PerturbationSet:
    if len(ds) == 0:
        raise InputError("cannot generate perturbations for an empty dataset")
    use_alignment = cfg.lam > 0.0
    if use_alignment and reference is None:
        raise ConfigError("lam > 0 requires a reference extractor")
    apply_freeze(surrogate, cfg.surrogate_freeze)
    trainable = [p for p in surrogate.main_params().values() if p.requires_grad]
    if not trainable:
        raise ConfigError("surrogate freeze mask leaves no learnable parameters")

    deltas = np.zeros_like(ds.images)
    n = len(ds)
    batches = [
        np.arange(start, min(start + cfg.batch_size, n))
        for start in range(0, n, cfg.batch_size)
    ]
    ref_taps = {}
    if use_alignment:
        with ad.no_grad():
            for bi, sel in enumerate(batches):
                taps = shallow_forward(reference, Tensor(ds.images[sel]),
                                       upto=cfg.align_stages[-1])
                ref_taps[bi] = {s: taps[s].data for s in cfg.align_stages}

    trace = {"outer_ce": [], "inner_final": []}
    if use_alignment:
        trace["r_sem_pre"] = []
        trace["r_sem_post"] = []
    for _epoch in range(cfg.epochs):
        snap = _snapshot(surrogate)
        for bi, sel in enumerate(batches):
            x = ds.images[sel]
            y = ds.labels[sel]

            inner_loss_val = math.nan
            for k in range(cfg.inner_steps):
                with Tape():
                    xp = Tensor(np.clip(x + deltas[sel], 0.0, 1.0))
                    logits, taps = forward(surrogate, xp, capture=use_alignment)
                    loss = ad.cross_entropy(logits, y)
                    if use_alignment:
                        adv = {s: taps[s] for s in cfg.align_stages}
                        r_sem = semantic_alignment_loss(adv, ref_taps[bi],
                                                        cfg.align_stages)
                        loss = ad.add(loss, ad.scale(r_sem, cfg.lam))
                        if k == 0:
                            trace["r_sem_pre"].append(r_sem.item())
                    ad.backward(loss)
                inner_loss_val = loss.item()
                for p in trainable:
                    p.data -= cfg.alpha * p.grad
                ad.reset_grads(trainable)
            if use_alignment:
                with ad.no_grad():
                    taps = shallow_forward(
                        surrogate, Tensor(np.clip(x + deltas[sel], 0.0, 1.0)),
                        upto=cfg.align_stages[-1])
                adv = {s: taps[s].data for s in cfg.align_stages}
                trace["r_sem_post"].append(
                    _rsem_value(adv, ref_taps[bi], cfg.align_stages))

            with Tape():
                xp = Tensor(np.clip(x + deltas[sel], 0.0, 1.0))
                xp.requires_grad = True
                logits, _ = forward(surrogate, xp)
                outer = ad.cross_entropy(logits, y)
                ad.backward(outer)
            deltas[sel] = project_linf(
                deltas[sel] - cfg.eta * np.sign(xp.grad), cfg.epsilon
            )
            xp.grad = None
            ad.reset_grads(trainable)
            trace["outer_ce"].append(outer.item())
            trace["inner_final"].append(inner_loss_val)
        _restore(surrogate, snap)

    method = "ssc" if use_alignment else "emn"
    return PerturbationSet(
        deltas, cfg.epsilon,
        meta={"method": method, "lam": cfg.lam, "seed": cfg.seed,
              "epochs": cfg.epochs, "inner_steps": cfg.inner_steps,
              "align_stages": list(cfg.align_stages) if use_alignment else [],
              "trace": trace},
    )


def generate_emn(ds: Dataset, surrogate: StagedNet, cfg: GenConfig) -> PerturbationSet:
    """Error-minimizing perturbations; any alignment weight is ignored."""
    if cfg.lam != 0.0:
        cfg = GenConfig(epsilon=cfg.epsilon, eta=cfg.eta, alpha=cfg.alpha,
                        inner_steps=cfg.inner_steps, epochs=cfg.epochs,
                        batch_size=cfg.batch_size, lam=0.0,
                        align_stages=cfg.align_stages,
                        surrogate_freeze=cfg.surrogate_freeze, seed=cfg.seed)
    return _generate(ds, surrogate, cfg, reference=None)


def generate_ssc(ds: Dataset, surrogate: StagedNet, cfg: GenConfig,
                 reference: StagedNet | None) -> PerturbationSet:
    """Camouflaged perturbations; ``lam == 0`` reduces to ``generate_emn``."""
    if cfg.lam > 0.0 and reference is None:
        raise ConfigError("generate_ssc with lam > 0 requires a reference model")
    return _generate(ds, surrogate, cfg, reference if cfg.lam > 0.0 else None)


# ---------------------------------------------------------------------------
# UEPD serialization


def save_perturbations(ps: PerturbationSet, path: str) -> None:
    buf = io.BytesIO()
    buf.write(_PERT_MAGIC)
    buf.write(struct.pack("<H", _PERT_VERSION))
    buf.write(struct.pack("<d", ps.epsilon))
    buf.write(struct.pack("<I", len(ps)))
    for i, delta in enumerate(ps.deltas):
        name = f"delta.{i:06d}".encode("utf-8")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", delta.ndim))
        for extent in delta.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(delta.astype("<f8").tobytes(order="C"))
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_perturbations(path: str) -> PerturbationSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 18 or raw[:4] != _PERT_MAGIC:
        raise FormatError(f"{path}: not a UEPD perturbation file")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != _PERT_VERSION:
        raise FormatError(f"{path}: unsupported perturbation version {version}")
    (epsilon,) = struct.unpack_from("<d", raw, 6)
    (n,) = struct.unpack_from("<I", raw, 14)
    offset = 18
    deltas = []
    for i in range(n):
        try:
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            extents = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            count = int(np.prod(extents)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
        except (struct.error, ValueError) as exc:
            raise FormatError(f"{path}: truncated perturbation record {i}") from exc
        if offset > len(raw):
            raise FormatError(f"{path}: truncated perturbation record {i} ({name})")
        deltas.append(arr.reshape(extents).copy())
    stacked = np.stack(deltas) if deltas else np.zeros((0, 1, 1, 1))
    return PerturbationSet(stacked, float(epsilon))
