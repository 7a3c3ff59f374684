"""Staged convolutional classifier: conv stem, four stages, linear head.

Each stage is two 3x3 convs with ReLU; stages S2..S4 downsample by 2 at entry.
Optional auxiliary heads (global-average-pool + linear) attach to stage outputs
for semantic-focused pretraining. A freeze mask partitions parameters into a
frozen and a learnable subset by component name.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, bias_add, conv2d, global_avg_pool, linear, relu
from .errors import FormatError, InputError, UsageError

STAGE_NAMES = ("S1", "S2", "S3", "S4")
COMPONENTS = ("stem",) + STAGE_NAMES + ("head",)

_CKPT_MAGIC = b"UEWT"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class FreezeMask:
    """Set of component names whose parameters stay fixed during training."""

    frozen: frozenset = frozenset()

    def __post_init__(self):
        unknown = set(self.frozen) - set(COMPONENTS)
        if unknown:
            raise InputError(f"unknown freeze components: {sorted(unknown)}")

    @classmethod
    def parse(cls, text: str) -> "FreezeMask":
        """Parse 'stem,S1' style lists; '' or '-' means nothing frozen."""
        text = text.strip()
        if text in ("", "-", "none"):
            return cls(frozenset())
        return cls(frozenset(part.strip() for part in text.split(",") if part.strip()))

    def __contains__(self, name: str) -> bool:
        return name in self.frozen

    def __str__(self) -> str:
        return ",".join(sorted(self.frozen, key=COMPONENTS.index)) if self.frozen else "-"


@dataclass
class FeatureTaps:
    """Stage activations captured during one forward pass (no copies)."""

    stages: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.stages[name]

    def __contains__(self, name):
        return name in self.stages


class StagedNet:
    """Parameters are named f"{component}.{layer}.{w|b}" in a stable order.

    Architecture for widths (w1..w4): stem 3x3 conv C->w1, each stage two 3x3
    convs (stride-2 first conv for S2..S4), global average pool, linear head.
    """

    def __init__(self, in_channels=1, image_size=16, widths=(8, 16, 32, 64),
                 num_classes=4, aux_stages=(), seed=0):
        if len(widths) != 4:
            raise InputError(f"expected 4 stage widths, got {len(widths)}")
        for s in aux_stages:
            if s not in STAGE_NAMES:
                raise InputError(f"unknown aux stage {s!r}")
        self.in_channels = int(in_channels)
        self.image_size = int(image_size)
        self.widths = tuple(int(w) for w in widths)
        self.num_classes = int(num_classes)
        self.aux_stages = tuple(aux_stages)
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    def _add_conv(self, name, c_in, c_out, rng):
        # ReLU-gain fan-in scaling; no normalization layers to rescue a
        # vanishing forward signal, so the bound must preserve variance
        bound = np.sqrt(6.0 / (c_in * 9))
        self.params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (c_out, c_in, 3, 3)),
                                          requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)

    def _add_linear(self, name, d_in, d_out, rng):
        bound = 1.0 / np.sqrt(d_in)
        self.params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (d_in, d_out)),
                                          requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(d_out), requires_grad=True)

    def _init_params(self, rng):
        w1, w2, w3, w4 = self.widths
        self._add_conv("stem", self.in_channels, w1, rng)
        chans = [w1, w1, w2, w3, w4]
        for i, stage in enumerate(STAGE_NAMES):
            self._add_conv(f"{stage}.c1", chans[i], chans[i + 1], rng)
            self._add_conv(f"{stage}.c2", chans[i + 1], chans[i + 1], rng)
        self._add_linear("head", w4, self.num_classes, rng)
        # aux heads initialize last so the main trunk matches an aux-free net
        stage_width = dict(zip(STAGE_NAMES, (w1, w2, w3, w4)))
        for stage in self.aux_stages:
            self._add_linear(f"aux.{stage}", stage_width[stage], self.num_classes, rng)

    # -- parameter views ----------------------------------------------------

    def component_of(self, param_name: str) -> str:
        head = param_name.split(".", 1)[0]
        return "aux" if head == "aux" else head

    def main_params(self):
        """Trunk + head parameters, aux heads excluded."""
        return {k: v for k, v in self.params.items() if not k.startswith("aux.")}

    def learnable_params(self):
        return [p for p in self.params.values() if p.requires_grad]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone_config(self, aux_stages=(), seed=None) -> "StagedNet":
        return StagedNet(self.in_channels, self.image_size, self.widths,
                         self.num_classes, aux_stages,
                         self.seed if seed is None else seed)

    # -- forward ------------------------------------------------------------

    def _stage_apply(self, name: str, h: Tensor) -> Tensor:
        stride = 1 if name == "S1" else 2
        h = relu(bias_add(conv2d(h, self.params[f"{name}.c1.w"], stride=stride, padding=1),
                          self.params[f"{name}.c1.b"]))
        h = relu(bias_add(conv2d(h, self.params[f"{name}.c2.w"], stride=1, padding=1),
                          self.params[f"{name}.c2.b"]))
        return h

    def _head_apply(self, h: Tensor) -> Tensor:
        pooled = global_avg_pool(h)
        return linear(pooled, self.params["head.w"], self.params["head.b"])


def forward(net: StagedNet, batch: Tensor, capture: bool = False):
    """Run the classifier; optionally capture per-stage feature taps.

    Returns (logits, taps) with taps=None unless capture is set.
    """
    h = relu(bias_add(conv2d(batch, net.params["stem.w"], stride=1, padding=1),
                      net.params["stem.b"]))
    taps = FeatureTaps() if capture else None
    for name in STAGE_NAMES:
        h = net._stage_apply(name, h)
        if capture:
            taps.stages[name] = h
    return net._head_apply(h), taps


def forward_from(net: StagedNet, stage: str, features: Tensor) -> Tensor:
    """Resume the forward pass from a captured tap at ``stage``."""
    if stage not in STAGE_NAMES:
        raise InputError(f"unknown stage {stage!r}")
    h = features
    for name in STAGE_NAMES[STAGE_NAMES.index(stage) + 1:]:
        h = net._stage_apply(name, h)
    return net._head_apply(h)


def shallow_forward(net: StagedNet, batch: Tensor, upto: str = "S1") -> FeatureTaps:
    """Taps for stages up to and including ``upto`` (skips deeper stages and head)."""
    if upto not in STAGE_NAMES:
        raise InputError(f"unknown stage {upto!r}")
    h = relu(bias_add(conv2d(batch, net.params["stem.w"], stride=1, padding=1),
                      net.params["stem.b"]))
    taps = FeatureTaps()
    for name in STAGE_NAMES[: STAGE_NAMES.index(upto) + 1]:
        h = net._stage_apply(name, h)
        taps.stages[name] = h
    return taps


def aux_forward(net: StagedNet, taps: FeatureTaps):
    """Logits of each auxiliary head applied to its stage tap."""
    if not net.aux_stages:
        raise UsageError("no auxiliary heads configured on this net")
    outs = []
    for stage in net.aux_stages:
        pooled = global_avg_pool(taps[stage])
        outs.append(linear(pooled, net.params[f"aux.{stage}.w"], net.params[f"aux.{stage}.b"]))
    return outs


def apply_freeze(net: StagedNet, mask: FreezeMask) -> None:
    """Freeze masked components: excluded from gradients and optimizer updates."""
    for name, p in net.params.items():
        comp = net.component_of(name)
        if comp == "aux":
            continue
        p.requires_grad = comp not in mask
    # re-freezing with a smaller mask re-enables previously frozen components


# ---------------------------------------------------------------------------
# checkpoint serialization (magic UEWT)


def _write_tensor(buf, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<I", arr.ndim))
    for ext in arr.shape:
        buf.write(struct.pack("<I", ext))
    buf.write(arr.astype("<f8").tobytes(order="C"))


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def _read_tensor(fh, index: int):
    (nlen,) = struct.unpack("<I", _read_exact(fh, 4, f"tensor {index} name length"))
    name = _read_exact(fh, nlen, f"tensor {index} name").decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} rank"))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4, f"{name} extent"))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(fh, count * 8, f"{name} payload")
    return name, np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_checkpoint(net: StagedNet, path: str, include_aux: bool = False) -> None:
    """Serialize parameters; aux heads are dropped unless requested."""
    params = net.params if include_aux else net.main_params()
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<H", _CKPT_VERSION))
    buf.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        _write_tensor(buf, name, p.data)
    _atomic_write(path, buf.getvalue())


def load_checkpoint(net: StagedNet, path: str) -> None:
    """Load parameters; all-or-nothing, rejects any architecture mismatch."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _CKPT_MAGIC:
            raise FormatError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != _CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        staged = {}
        for i in range(count):
            name, arr = _read_tensor(fh, i)
            staged[name] = arr
    expected = net.main_params()
    for name, arr in staged.items():
        if name not in net.params:
            raise FormatError(f"checkpoint tensor {name!r} has no slot in the target net")
        if net.params[name].shape != arr.shape:
            raise FormatError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape} vs net {net.params[name].shape}"
            )
    missing = [n for n in expected if n not in staged]
    if missing:
        raise FormatError(f"checkpoint is missing tensor {missing[0]!r}")
    # validation passed for every tensor: now mutate
    for name, arr in staged.items():
        net.params[name].data[...] = arr
