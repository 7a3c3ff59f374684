"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Design notes:
  * Operations record onto the innermost active ``Tape``; with no tape active
    they are plain numpy computations (cheap inference path).
  * Recording order is execution order, which is automatically topological, so
    the backward pass is a single reverse sweep that visits each node once.
  * Gradients of ``requires_grad`` leaves accumulate into ``Tensor.grad`` and
    are never cleared implicitly; call :func:`reset_grads` between steps.
    Intermediate gradients live in a scratch dict local to one backward call.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, InputError, NumericsError, UsageError


class Tensor:
    """Dense n-dimensional float64 array, optionally participating in autodiff.

    ``requires_grad`` marks a leaf whose gradient should be accumulated.
    ``node`` is set on tensors produced by a recorded operation.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def detach(self) -> "Tensor":
        """A view of the same data with no tape participation."""
        return Tensor(self.data)

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.node is not None:
            flags.append("on_tape")
        tag = f" [{' '.join(flags)}]" if flags else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def _scalar_err(t):
    raise UsageError(f"expected a scalar tensor, got shape {t.shape}")


class Node:
    """One recorded primitive: inputs, the produced output and its local vjp."""

    __slots__ = ("inputs", "output", "backward_fn", "tape")

    def __init__(self, inputs, output, backward_fn, tape):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of primitive operations for one forward computation.

    Usable as a context manager; ops executed inside record themselves here.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self.nodes)


class no_grad:
    """Context manager suspending tape recording."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list = [None]


def _active_tape():
    return _TAPE_STACK[-1]


def _needs_grad(t) -> bool:
    return isinstance(t, Tensor) and (t.requires_grad or t.node is not None)


def _record(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    if not any(_needs_grad(t) for t in inputs):
        return out
    node = Node(inputs, out, backward_fn, tape)
    out.node = node
    tape.nodes.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss over the tape that recorded it.

    Leaf gradients accumulate across repeated calls; intermediates are scratch.
    """
    if loss.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise UsageError("loss was not recorded on any tape")
    tape = loss.node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, ig in zip(node.inputs, node.backward_fn(g)):
            if ig is None or not isinstance(t, Tensor):
                continue
            if t.requires_grad:
                t.grad = ig.copy() if t.grad is None else t.grad + ig
            elif t.node is not None:
                prev = grads.get(id(t))
                grads[id(t)] = ig if prev is None else prev + ig


def reset_grads(params) -> None:
    """Explicitly clear accumulated gradients (no implicit zeroing anywhere)."""
    for p in params:
        p.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"add: shapes {a.shape} vs {b.shape}")
        out = Tensor(a.data + b.data)
        return _record(out, (a, b), lambda g: (g, g))
    out = Tensor(a.data + float(b))
    return _record(out, (a,), lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"sub: shapes {a.shape} vs {b.shape}")
        out = Tensor(a.data - b.data)
        return _record(out, (a, b), lambda g: (g, -g))
    out = Tensor(a.data - float(b))
    return _record(out, (a,), lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"mul: shapes {a.shape} vs {b.shape}")
        out = Tensor(a.data * b.data)
        return _record(out, (a, b), lambda g, ad=a.data, bd=b.data: (g * bd, g * ad))
    s = float(b)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, float(s))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    shape = a.shape
    return _record(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(a.data.mean())
    shape = a.shape
    return _record(out, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    need_a, need_b = _needs_grad(a), _needs_grad(b)

    def back(g, ad=a.data, bd=b.data):
        return (g @ bd.T if need_a else None, ad.T @ g if need_b else None)

    return _record(out, (a, b), back)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias: [B,C,H,W]+[C] or [B,K]+[K]."""
    if x.ndim == 4:
        if b.shape != (x.shape[1],):
            raise DimensionError(f"bias_add: bias {b.shape} vs channels {x.shape[1]}")
        out = Tensor(x.data + b.data[None, :, None, None])
        return _record(out, (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))))
    if x.ndim == 2:
        if b.shape != (x.shape[1],):
            raise DimensionError(f"bias_add: bias {b.shape} vs features {x.shape[1]}")
        out = Tensor(x.data + b.data[None, :])
        return _record(out, (x, b), lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"bias_add: unsupported input rank {x.ndim}")


# ---------------------------------------------------------------------------
# neural-net primitives


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record(out, (x,), lambda g: (g * mask,))


def flatten(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"flatten expects a batch dimension, got rank {x.ndim}")
    b = x.shape[0]
    shape = x.shape
    out = Tensor(x.data.reshape(b, -1))
    return _record(out, (x,), lambda g: (g.reshape(shape),))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    y = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} vs out features {w.shape[1]}")
        y = y + b.data[None, :]
    out = Tensor(y)
    need_x, need_w = _needs_grad(x), _needs_grad(w)
    need_b = b is not None and _needs_grad(b)

    def back(g, xd=x.data, wd=w.data):
        gx = g @ wd.T if need_x else None
        gw = xd.T @ g if need_w else None
        gb = g.sum(axis=0) if need_b else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _record(out, inputs, back)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,C,H,W] with [F,C,k,k]; differentiable in both.

    Forward lowers to one im2col matmul; backward scatters through the k*k
    window offsets, so everything heavy stays inside BLAS.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: input rank {x.ndim}, kernel rank {kernel.ndim}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise DimensionError(f"conv2d: input channels {C} vs kernel channels {Ck}")
    if kh != kw:
        raise DimensionError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise InputError(f"conv2d: stride {stride}, padding {padding}")
    k = kh
    if k > H + 2 * padding or k > W + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {k} exceeds padded input {H + 2 * padding}x{W + 2 * padding}"
        )
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
    wmat = kernel.data.reshape(F, C * k * k)
    out = Tensor((cols @ wmat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2))

    need_x, need_w = _needs_grad(x), _needs_grad(kernel)
    if not (need_x or need_w):
        return out

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, F)
        gw = (g2.T @ cols).reshape(F, C, k, k) if need_w else None
        gx = None
        if need_x:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += dcols[:, :, :, :, i, j]
            gx = dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp
        return (gx, gw)

    return _record(out, (x, kernel), back)


def maxpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; gradient routes to the window argmax
    (first row-major index on ties)."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: expected [B,C,H,W], got rank {x.ndim}")
    B, C, H, W = x.shape
    if H % window or W % window:
        raise DimensionError(f"maxpool2d: window {window} does not divide {H}x{W}")
    Ho, Wo = H // window, W // window
    tiles = x.data.reshape(B, C, Ho, window, Wo, window).transpose(0, 1, 2, 4, 3, 5)
    flat = tiles.reshape(B, C, Ho, Wo, window * window)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def back(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(B, C, Ho, Wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        return (dx.reshape(B, C, H, W),)

    return _record(out, (x,), back)


def avgpool2d(x: Tensor, window: int) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"avgpool2d: expected [B,C,H,W], got rank {x.ndim}")
    B, C, H, W = x.shape
    if H % window or W % window:
        raise DimensionError(f"avgpool2d: window {window} does not divide {H}x{W}")
    Ho, Wo = H // window, W // window
    tiles = x.data.reshape(B, C, Ho, window, Wo, window)
    out = Tensor(tiles.mean(axis=(3, 5)))
    inv = 1.0 / (window * window)

    def back(g):
        dx = np.broadcast_to(g[:, :, :, None, :, None] * inv, (B, C, Ho, window, Wo, window))
        return (dx.reshape(B, C, H, W).copy(),)

    return _record(out, (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C] spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected [B,C,H,W], got rank {x.ndim}")
    B, C, H, W = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    inv = 1.0 / (H * W)

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, (B, C, H, W)).copy(),)

    return _record(out, (x,), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label], stabilized by max subtraction."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be [B,K], got {logits.shape}")
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    y = y.astype(np.int64).reshape(-1)
    B, K = logits.shape
    if y.shape[0] != B:
        raise DimensionError(f"cross_entropy: {B} logits rows vs {y.shape[0]} labels")
    if y.min(initial=0) < 0 or y.max(initial=0) >= K:
        raise InputError(f"cross_entropy: labels must lie in [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    nll = logsumexp - z[np.arange(B), y]
    value = nll.mean()
    if not np.isfinite(value):
        raise NumericsError("cross_entropy produced a non-finite loss")
    out = Tensor(value)

    def back(g):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(B), y] -= 1.0
        return (p * (g / B),)

    return _record(out, (logits,), back)


def gram(x: Tensor) -> Tensor:
    """Per-example channel Gram matrix: [B,C,H,W] -> [B,C,C], G = M M^T / (C H W)."""
    if x.ndim != 4:
        raise DimensionError(f"gram: expected [B,C,H,W], got rank {x.ndim}")
    B, C, H, W = x.shape
    m = x.data.reshape(B, C, H * W)
    norm = 1.0 / (C * H * W)
    out = Tensor(np.einsum("bij,bkj->bik", m, m) * norm)

    def back(g):
        dm = np.einsum("bik,bkj->bij", g + g.transpose(0, 2, 1), m) * norm
        return (dm.reshape(B, C, H, W),)

    return _record(out, (x,), back)


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """SGD with momentum and weight decay:

        v <- momentum * v + grad + weight_decay * param
        param <- param - lr * v

    One velocity slot per parameter, allocated at construction.
    """

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.state = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        if len(self.state) != len(self.params):
            raise UsageError("optimizer state does not match its parameter list")
        for p, v in zip(self.params, self.state):
            if p.grad is None:
                raise UsageError("missing gradient: call backward before step")
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v


def sgd_step(params, grads, lr: float, momentum: float, weight_decay: float, state) -> None:
    """Functional form of the SGD update; ``state`` holds one velocity per param."""
    if len(state) != len(params) or len(grads) != len(params):
        raise UsageError("sgd_step: params, grads and state must align one-to-one")
    for p, g, v in zip(params, grads, state):
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients in place so their global l2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Loss spikes on this normalization-free net
    otherwise feed through momentum and push ReLUs into a dead, input-
    independent state.
    """
    total = 0.0
    for p in params:
        if p.grad is None:
            raise UsageError("missing gradient: call backward before clipping")
        total += float(np.sum(p.grad * p.grad))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm
