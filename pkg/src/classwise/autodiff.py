"""Dense tensors with reverse-mode differentiation over a fixed primitive set.

The primitives are exactly what the small classifier architectures and the
robust-training objectives need: affine, 2-D convolution (stride 1, valid
padding), ReLU, 2x2 max-pooling, flatten, temperature softmax, cross-entropy,
KL divergence, and elementwise add/scale.  There is no broadcasting beyond
what those layers require, no dynamic shapes, no GPU path.

Every operation is a pure function of its inputs.  Gradients are exact
reverse-mode derivatives accumulated on a tape; `backward` can restrict the
pass to a subset of leaves (e.g. only the network input during an attack),
which skips the unused weight-gradient work.

Training runs in float32; gradient checking against central finite
differences needs float64.  All ops preserve the dtype of their inputs and
reduce in a fixed order, so repeated evaluation is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Probabilities are clamped to [PROB_FLOOR, 1] before any log so losses stay
# finite on (near-)one-hot inputs.
PROB_FLOOR = 1e-12


class Tensor:
    """An n-d float array plus the bookkeeping needed for reverse mode.

    Leaves are created directly (`Tensor(data, requires_grad=True)` for
    parameters and attacked inputs); interior nodes are created by the op
    functions below and remember, per parent, a closure mapping the output
    gradient to that parent's gradient contribution.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fns")

    def __init__(self, data, requires_grad=False, _parents=(), _grad_fns=()):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self._parents = _parents
        self._grad_fns = _grad_fns

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class GradientSet:
    """Gradients keyed by parameter name, plus the input gradient if asked for."""

    parameters: dict[str, np.ndarray] = field(default_factory=dict)
    input: np.ndarray | None = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_dtype(name: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"{name}: mixed dtypes {sorted(map(str, dtypes))}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: (N, d) @ (d, m) + (m,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _same_dtype("linear", x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"linear: cannot multiply input {x.data.shape} by weights {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise ValueError(f"linear: bias shape {b.data.shape} != ({w.data.shape[1]},)")
    out = x.data @ w.data + b.data
    return Tensor(
        out,
        _parents=(x, w, b),
        _grad_fns=(
            lambda g: g @ w.data.T,
            lambda g: x.data.T @ g,
            lambda g: g.sum(axis=0),
        ),
    )


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """2-D cross-correlation, stride 1, valid padding.

    x: (N, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _same_dtype("conv2d", x, w, b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input/kernel, got {x.data.shape} and {w.data.shape}")
    n, cin, h, width = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input has {cin} channels but kernel expects {cin_w}")
    if kh > h or kw > width:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{width}")
    if b.data.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.data.shape} != ({cout},)")

    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    # windows: (N, Cin, OH, OW, kh, kw)
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def grad_x(g):
        pad = ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1))
        gpad = np.pad(g, pad)
        gwin = np.lib.stride_tricks.sliding_window_view(gpad, (kh, kw), axis=(2, 3))
        wflip = w.data[:, :, ::-1, ::-1]
        dx = np.tensordot(gwin, wflip, axes=([1, 4, 5], [0, 2, 3]))
        return dx.transpose(0, 3, 1, 2)

    def grad_w(g):
        return np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))

    return Tensor(
        out,
        _parents=(x, w, b),
        _grad_fns=(grad_x, grad_w, lambda g: g.sum(axis=(0, 2, 3))),
    )


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return Tensor(out, _parents=(x,), _grad_fns=(lambda g: g * (x.data > 0),))


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties broken by first index in row-major order."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"max_pool2: expected (N, C, H, W), got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2: spatial dims must be even, got {h}x{w}")
    oh, ow = h // 2, w // 2
    win = (
        x.data.reshape(n, c, oh, 2, ow, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, 4)
    )
    idx = np.argmax(win, axis=-1)  # first max wins
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def grad_x(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (
            gw.reshape(n, c, oh, ow, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )

    return Tensor(out, _parents=(x,), _grad_fns=(grad_x,))


def flatten(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape
    out = x.data.reshape(shape[0], -1)
    return Tensor(out, _parents=(x,), _grad_fns=(lambda g: g.reshape(shape),))


def softmax_temperature(logits: Tensor, inverse_temperature: float = 1.0) -> Tensor:
    """Softmax of (logits * 1/T) along the last axis.

    1/T = 1 is the ordinary softmax; larger values sharpen the distribution,
    smaller values flatten it.
    """
    if not inverse_temperature > 0:
        raise ValueError(f"softmax_temperature: inverse temperature must be > 0, got {inverse_temperature}")
    z = as_tensor(logits)
    invt = float(inverse_temperature)
    scaled = z.data * z.data.dtype.type(invt)
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_z(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return z.data.dtype.type(invt) * p * (g - dot)

    return Tensor(p, _parents=(z,), _grad_fns=(grad_z,))


def cross_entropy(probabilities: Tensor, labels) -> Tensor:
    """Per-example -log p[label]; probabilities (N, C) or (C,), labels int.

    Returns shape (N,) for batched input, scalar for a single vector.
    """
    p = as_tensor(probabilities)
    labels = np.asarray(labels)
    single = p.data.ndim == 1
    pdata = p.data[None, :] if single else p.data
    lab = labels.reshape(-1).astype(np.int64)
    n, c = pdata.shape
    if lab.shape[0] != n:
        raise ValueError(f"cross_entropy: {n} rows but {lab.shape[0]} labels")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise ValueError(f"cross_entropy: label out of range [0, {c})")
    picked = pdata[np.arange(n), lab]
    clamped = np.clip(picked, PROB_FLOOR, 1.0)
    out = -np.log(clamped)

    def grad_p(g):
        g = np.asarray(g).reshape(-1)
        dp = np.zeros_like(pdata)
        inside = (picked >= PROB_FLOOR) & (picked <= 1.0)
        dp[np.arange(n), lab] = np.where(inside, -g / clamped, 0.0)
        return dp[0] if single else dp

    return Tensor(out[0] if single else out, _parents=(p,), _grad_fns=(grad_p,))


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Per-row KL(p || q) = sum p * (log p - log q); rows are probability vectors.

    Entries are clamped to [PROB_FLOOR, 1] before the logs, so exact zeros are
    tolerated rather than rejected.
    """
    p, q = as_tensor(p), as_tensor(q)
    _same_dtype("kl_divergence", p, q)
    if p.data.shape != q.data.shape:
        raise ValueError(f"kl_divergence: shapes {p.data.shape} and {q.data.shape} differ")
    single = p.data.ndim == 1
    pc = np.clip(p.data, PROB_FLOOR, 1.0)
    qc = np.clip(q.data, PROB_FLOOR, 1.0)
    logdiff = np.log(pc) - np.log(qc)
    out = (pc * logdiff).sum(axis=-1)
    p_inside = (p.data >= PROB_FLOOR) & (p.data <= 1.0)
    q_inside = (q.data >= PROB_FLOOR) & (q.data <= 1.0)

    def grad_p(g):
        g = np.asarray(g)[..., None]
        return g * (logdiff + 1.0) * p_inside

    def grad_q(g):
        g = np.asarray(g)[..., None]
        return -g * (pc / qc) * q_inside

    return Tensor(out, _parents=(p, q), _grad_fns=(grad_p, grad_q))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    return Tensor(a.data + b.data, _parents=(a, b), _grad_fns=(lambda g: g, lambda g: g))


def scale(x: Tensor, factor) -> Tensor:
    """Multiply by a constant scalar or a constant array (no gradient to the factor)."""
    x = as_tensor(x)
    f = np.asarray(factor, dtype=x.data.dtype)
    if f.ndim and f.shape != x.data.shape:
        raise ValueError(f"scale: factor shape {f.shape} does not match {x.data.shape}")
    return Tensor(x.data * f, _parents=(x,), _grad_fns=(lambda g: g * f,))


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out = x.data.mean()

    def grad_x(g):
        return np.full_like(x.data, np.asarray(g) / n)

    return Tensor(out, _parents=(x,), _grad_fns=(grad_x,))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents before children


def backward(loss: Tensor, wrt: list[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf.

    `loss` must be scalar.  If `wrt` is given, only gradients needed to reach
    those tensors are computed; everything else (typically the weight
    gradients during an input-only attack) is skipped.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = _topo_order(loss)
    if wrt is None:
        needed = {id(t) for t in order if t.requires_grad}
    else:
        wanted = {id(t) for t in wrt}
        needed = set()
        for t in order:  # parents come first
            if id(t) in wanted or any(id(p) in needed for p in t._parents):
                needed.add(id(t))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.grad is None or not node._parents:
            continue
        for parent, fn in zip(node._parents, node._grad_fns):
            if id(parent) not in needed or fn is None:
                continue
            g = fn(node.grad)
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


def zero_gradients(tensors) -> None:
    for t in tensors:
        t.grad = None
