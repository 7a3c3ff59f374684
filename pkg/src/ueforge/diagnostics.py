"""Feature-space and spectral diagnostics for perturbation analysis.

Feature metrics compare a network's stage activations on clean and perturbed
inputs (layer-wise cosine similarity, perturbation transfer ratio, raw
residuals). Spectral metrics characterize where perturbation energy lives in
frequency: unnormalized 2D DFT power, radially averaged profiles, and the
log2 density ratio between perturbation and image spectra.

All functions here are pure; none mutate the network or inputs.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import DimensionError, InputError
from .model import STAGE_NAMES, StagedNet, forward

METRIC_HEADER = ("run_id", "metric", "stage_or_bin", "value")


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# feature-space metrics


@dataclass
class ConsistencyCurve:
    """Per-stage cosine similarities between clean and perturbed features."""

    stages: tuple
    values: tuple
    degenerate: tuple

    def __getitem__(self, stage: str) -> float:
        return self.values[self.stages.index(stage)]

    def as_rows(self):
        return list(zip(self.stages, self.values))


def vector_cosine(v: np.ndarray, w: np.ndarray) -> float:
    """Cosine of the angle between flattened vectors; 0.0 if either is zero."""
    v = np.asarray(v, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    nv = np.linalg.norm(v)
    nw = np.linalg.norm(w)
    if nv == 0.0 or nw == 0.0:
        return 0.0
    return float(np.dot(v, w) / (nv * nw))


def vector_ptr(clean: np.ndarray, perturbed: np.ndarray) -> float:
    """Relative feature displacement; +inf when the clean feature is zero."""
    clean = np.asarray(clean, dtype=np.float64).ravel()
    perturbed = np.asarray(perturbed, dtype=np.float64).ravel()
    n = np.linalg.norm(clean)
    if n == 0.0:
        return math.inf
    return float(np.linalg.norm(perturbed - clean) / n)


def _stage_taps(net: StagedNet, x: np.ndarray):
    with no_grad():
        _, taps = forward(net, Tensor(x), capture=True)
    return {s: taps[s].data for s in STAGE_NAMES}


def _check_pair(x, delta):
    x = _as_array(x)
    delta = _as_array(delta)
    if x.shape != delta.shape:
        raise DimensionError(f"x shape {x.shape} vs delta shape {delta.shape}")
    if x.ndim != 4:
        raise InputError(f"expected [N,C,H,W] inputs, got shape {x.shape}")
    return x, delta


def cosine_similarity(net: StagedNet, x, delta) -> ConsistencyCurve:
    """Per-stage mean cosine between features of ``x`` and ``x + delta``.

    The mean runs over examples; a single example reduces to the plain cosine
    of the two flattened feature maps. Zero-norm features contribute 0 and set
    the stage's degenerate flag.
    """
    x, delta = _check_pair(x, delta)
    taps_clean = _stage_taps(net, x)
    taps_adv = _stage_taps(net, x + delta)
    values, flags = [], []
    for stage in STAGE_NAMES:
        a = taps_clean[stage].reshape(len(x), -1)
        b = taps_adv[stage].reshape(len(x), -1)
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        bad = (na == 0.0) | (nb == 0.0)
        denom = np.where(bad, 1.0, na * nb)
        cos = np.where(bad, 0.0, np.einsum("ij,ij->i", a, b) / denom)
        values.append(float(cos.mean()))
        flags.append(bool(bad.any()))
    return ConsistencyCurve(STAGE_NAMES, tuple(values), tuple(flags))


def ptr(net: StagedNet, x, delta, stage: str) -> float:
    """Perturbation transfer ratio at one stage tap.

    Per-example ratio of feature displacement norm to clean feature norm,
    averaged over the batch; +inf when any clean feature has zero norm.
    """
    if stage not in STAGE_NAMES:
        raise InputError(f"unknown stage {stage!r}")
    x, delta = _check_pair(x, delta)
    clean = _stage_taps(net, x)[stage].reshape(len(x), -1)
    adv = _stage_taps(net, x + delta)[stage].reshape(len(x), -1)
    norms = np.linalg.norm(clean, axis=1)
    if np.any(norms == 0.0):
        return math.inf
    ratios = np.linalg.norm(adv - clean, axis=1) / norms
    return float(ratios.mean())


def feature_residual(net: StagedNet, x, delta, stage: str) -> np.ndarray:
    """Channel-resolved residual ``f_stage(x+delta) - f_stage(x)``, raw."""
    if stage not in STAGE_NAMES:
        raise InputError(f"unknown stage {stage!r}")
    x, delta = _check_pair(x, delta)
    clean = _stage_taps(net, x)[stage]
    adv = _stage_taps(net, x + delta)[stage]
    return adv - clean


# ---------------------------------------------------------------------------
# spectral metrics


@dataclass
class SpectralProfile:
    """Radially averaged power spectrum with its binning metadata."""

    power: np.ndarray
    height: int
    width: int
    convention: str = "unnormalized-dft"
    counts: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.power = np.asarray(self.power, dtype=np.float64)

    def __len__(self):
        return len(self.power)

    @property
    def bins(self):
        return list(zip(range(len(self.power)), self.power))

    def peak_bin(self) -> int:
        return int(np.argmax(self.power))


def power_spectrum_2d(z) -> np.ndarray:
    """Squared modulus of the unnormalized 2D DFT, DC at index (0, 0).

    Accepts [H,W] or [C,H,W]; channels are averaged before the transform.
    """
    z = _as_array(z)
    if z.ndim == 3:
        z = z.mean(axis=0)
    if z.ndim != 2:
        raise InputError(f"expected [H,W] or [C,H,W], got shape {z.shape}")
    if min(z.shape) < 2:
        raise InputError(f"spatial extents must be >= 2, got {z.shape}")
    f = np.fft.fft2(z)
    return (f.real ** 2 + f.imag ** 2)


def mean_power_spectrum(batch) -> np.ndarray:
    """Average of per-example power spectra over an [N,C,H,W] batch."""
    batch = _as_array(batch)
    if batch.ndim != 4:
        raise InputError(f"expected [N,C,H,W], got shape {batch.shape}")
    if len(batch) == 0:
        raise InputError("cannot average spectra of an empty batch")
    acc = np.zeros(batch.shape[2:])
    for example in batch:
        acc += power_spectrum_2d(example)
    return acc / len(batch)


def _ring_indices(h: int, w: int):
    # Bin membership depends only on (H, W): rounded centered radius, with
    # corner radii beyond the Nyquist ring folded into the outermost bin.
    n_bins = min(h, w) // 2 + 1
    cy, cx = h // 2, w // 2
    yy, xx = np.mgrid[0:h, 0:w]
    radius = np.sqrt((yy - cy) ** 2.0 + (xx - cx) ** 2.0)
    rings = np.rint(radius).astype(np.int64)
    return np.minimum(rings, n_bins - 1), n_bins


def radial_profile(power: np.ndarray) -> SpectralProfile:
    """Radially average an uncentered [H,W] power spectrum."""
    power = np.asarray(power, dtype=np.float64)
    if power.ndim != 2:
        raise InputError(f"expected [H,W] power, got shape {power.shape}")
    h, w = power.shape
    centered = np.fft.fftshift(power)
    rings, n_bins = _ring_indices(h, w)
    sums = np.bincount(rings.ravel(), weights=centered.ravel(), minlength=n_bins)
    counts = np.bincount(rings.ravel(), minlength=n_bins)
    return SpectralProfile(sums / counts, h, w, counts=counts)


def radial_psd(z) -> SpectralProfile:
    """Radially averaged power spectral density of an image.

    Power is grouped by integer ring index round(sqrt(u^2 + v^2)) around the
    centered DC bin and averaged within each ring.
    """
    return radial_profile(power_spectrum_2d(z))


def relative_spectral_density(p_delta, p_x) -> np.ndarray:
    """Per-bin log2 ratio of perturbation power to image power.

    Bins where either profile is zero are reported as NaN rather than
    clamped, since the ratio is undefined there.
    """
    pd = p_delta.power if isinstance(p_delta, SpectralProfile) else np.asarray(p_delta, dtype=np.float64)
    px = p_x.power if isinstance(p_x, SpectralProfile) else np.asarray(p_x, dtype=np.float64)
    if pd.shape != px.shape:
        raise InputError(f"bin count mismatch: {pd.shape} vs {px.shape}")
    out = np.full(pd.shape, np.nan)
    ok = (pd > 0.0) & (px > 0.0)
    out[ok] = np.log2(pd[ok] / px[ok])
    return out


# ---------------------------------------------------------------------------
# CSV emission


def metric_rows(run_id: str, metric: str, keyed_values) -> list:
    rows = []
    for key, value in keyed_values:
        if isinstance(value, float) and math.isnan(value):
            rendered = "nan"
        elif isinstance(value, float) and math.isinf(value):
            rendered = "inf"
        else:
            rendered = f"{value:.9g}"
        rows.append((run_id, metric, key, rendered))
    return rows


def write_metric_rows(path: str, rows: list) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_HEADER)
        writer.writerows(rows)
    os.replace(tmp, path)
