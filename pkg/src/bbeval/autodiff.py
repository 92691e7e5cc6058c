"""Reverse-mode automatic differentiation over dense numpy arrays.

Provides exactly the operations the CNN classifiers and gradient attacks
need: conv2d, max pooling, dense layers, relu/tanh, k-winner-take-all,
softmax cross-entropy, and a handful of elementwise/reduction ops used by
attack objectives and ensemble regularizers.

Conventions:
  - Tie-breaking in argmax-like ops (maxpool, kwta) always picks the lowest
    flat index.
  - Elementwise binary ops require identical shapes; the only broadcasting
    is bias addition over the batch axis.
  - Reductions accumulate in float64 even when operands are float32.
  - A graph is single-use: calling ``backward`` twice on the same loss node
    is an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, NumericError, ParameterError, UsageError


class Tensor:
    """A dense array node in a computation graph.

    Leaf tensors are created directly; every op returns a new tensor that
    remembers its parents and how to push gradients back to them.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def _result(data, parents, backward_fn, op):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward_fn if needs else None, op=op)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g.astype(t.data.dtype, copy=False)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ "
                             "(only bias-add broadcasts)")


# ---------------------------------------------------------------------------
# elementwise / arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _result(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), bwd, "mul")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), bwd, "neg")


def affine(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * a + shift with scalar constants."""

    def bwd(g):
        _accumulate(a, g * scale)

    return _result(a.data * scale + shift, (a,), bwd, "affine")


def powc(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    if not np.all(np.isfinite(out)):
        raise NumericError(f"powc: non-finite result for exponent {p}")

    def bwd(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _result(out, (a,), bwd, "powc")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    out = np.log(a.data)

    def bwd(g):
        _accumulate(a, g / a.data)

    return _result(out, (a,), bwd, "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp: overflow")

    def bwd(g):
        _accumulate(a, g * out)

    return _result(out, (a,), bwd, "exp")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        _accumulate(a, g * (1.0 - out * out))

    return _result(out, (a,), bwd, "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        _accumulate(a, g * mask)

    return _result(a.data * mask, (a,), bwd, "relu")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _result(a.data.reshape(shape), (a,), bwd, "reshape")


def concat_cols(parts) -> Tensor:
    parts = list(parts)
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def bwd(g):
        at = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                _accumulate(p, g[:, at:at + w])
            at += w

    return _result(out, tuple(parts), bwd, "concat_cols")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bwd, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Bias broadcast over the batch axis: (N,D)+(D,) or (N,F,H,W)+(F,)."""
    if x.data.ndim == 2 and b.data.shape == (x.data.shape[1],):
        out = x.data + b.data
        axes = (0,)
        view = b.data
    elif x.data.ndim == 4 and b.data.shape == (x.data.shape[1],):
        view = b.data[:, None, None]
        out = x.data + view
        axes = (0, 2, 3)
    else:
        raise DimensionError(f"add_bias: cannot add bias {b.data.shape} to {x.data.shape}")

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g)
        if b.requires_grad:
            _accumulate(b, np.sum(g, axis=axes, dtype=np.float64))

    return _result(out, (x, b), bwd, "add_bias")


# ---------------------------------------------------------------------------
# convolution / pooling / kwta

def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int):
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride, :, :]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with FCkk kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError("conv2d: input must be NCHW and kernel FCkk")
    n, c, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise DimensionError(f"conv2d: kernel expects {ck} channels, input has {c}")
    if stride < 1 or padding < 0:
        raise ParameterError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = _conv_windows(xp, kh, kw, stride)  # (N,C,Ho,Wo,kh,kw)
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # (N,Ho,Wo,F)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bwd(g):
        if kernel.requires_grad:
            dk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            _accumulate(kernel, dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    part = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        part.transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            _accumulate(x, dxp)

    return _result(out, (x, kernel), bwd, "conv2d")


def maxpool2d(x: Tensor, window: int) -> Tensor:
    """Pad-free max pooling; gradient goes to the first max in each window."""
    if x.data.ndim != 4:
        raise DimensionError("maxpool2d: input must be NCHW")
    n, c, h, w = x.data.shape
    if window < 1:
        raise ParameterError("maxpool2d: window must be >= 1")
    if h % window or w % window:
        raise DimensionError(f"maxpool2d: extents {h}x{w} not divisible by window {window}")
    ho, wo = h // window, w // window
    tiles = x.data.reshape(n, c, ho, window, wo, window)
    tiles = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window)
    idx = np.argmax(tiles, axis=-1)  # first occurrence = lowest flat index
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dt = np.zeros_like(tiles)
        np.put_along_axis(dt, idx[..., None], g[..., None], axis=-1)
        dx = dt.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        _accumulate(x, dx.reshape(n, c, h, w))

    return _result(out, (x,), bwd, "maxpool2d")


def kwta(x: Tensor, k: int) -> Tensor:
    """Keep the k largest entries per sample, zero the rest.

    Works on (N, D) directly and on higher-rank inputs by flattening all
    non-batch axes. Ties keep the lowest index.
    """
    if x.data.ndim < 2:
        raise DimensionError("kwta: input must have a batch axis")
    n = x.data.shape[0]
    d = int(np.prod(x.data.shape[1:]))
    if not 1 <= k <= d:
        raise ParameterError(f"kwta: k={k} out of range [1, {d}]")
    flat = x.data.reshape(n, d)
    order = np.argsort(-flat, axis=1, kind="stable")
    mask = np.zeros((n, d), dtype=x.data.dtype)
    np.put_along_axis(mask, order[:, :k], 1.0, axis=1)
    mask = mask.reshape(x.data.shape)

    def bwd(g):
        _accumulate(x, g * mask)

    return _result(x.data * mask, (x,), bwd, "kwta")


# ---------------------------------------------------------------------------
# softmax family

def _softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True, dtype=np.float64).astype(z.dtype)


def softmax(z: Tensor) -> Tensor:
    if z.data.ndim != 2:
        raise DimensionError("softmax: input must be (N, K)")
    s = _softmax_np(z.data)

    def bwd(g):
        inner = np.sum(g * s, axis=1, keepdims=True, dtype=np.float64).astype(s.dtype)
        _accumulate(z, s * (g - inner))

    return _result(s, (z,), bwd, "softmax")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy: logits must be (N, K)")
    y = np.asarray(labels)
    n, k = logits.data.shape
    if y.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: labels shape {y.shape} != ({n},)")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ParameterError(f"softmax_cross_entropy: label out of range [0, {k})")
    z = logits.data
    zmax = np.max(z, axis=1, keepdims=True)
    log_z = zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=1, dtype=np.float64)).astype(z.dtype)
    picked = z[np.arange(n), y]
    loss = np.mean(log_z - picked, dtype=np.float64)

    def bwd(g):
        p = _softmax_np(z)
        p[np.arange(n), y] -= 1.0
        _accumulate(logits, p * (g / n))

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), bwd, "softmax_ce")


# ---------------------------------------------------------------------------
# gather / per-row ops / reductions

def take_per_row(x: Tensor, idx) -> Tensor:
    """out[i, j] = x[i, idx[i, j]] for a 2-D integer index array."""
    if x.data.ndim != 2:
        raise DimensionError("take_per_row: input must be (N, K)")
    ind = np.asarray(idx)
    if ind.ndim != 2 or ind.shape[0] != x.data.shape[0]:
        raise DimensionError("take_per_row: index must be (N, m)")
    if ind.size and (ind.min() < 0 or ind.max() >= x.data.shape[1]):
        raise ParameterError("take_per_row: index out of range")
    rows = np.arange(x.data.shape[0])[:, None]
    out = x.data[rows, ind]

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, ind), g)
        _accumulate(x, dx)

    return _result(out, (x,), bwd, "take_per_row")


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of (N, D) by the matching scalar of (N,)."""
    if x.data.ndim != 2 or s.data.shape != (x.data.shape[0],):
        raise DimensionError("row_scale: expects (N, D) and (N,)")
    sv = s.data[:, None]

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * sv)
        if s.requires_grad:
            _accumulate(s, np.sum(g * x.data, axis=1, dtype=np.float64))

    return _result(x.data * sv, (x, s), bwd, "row_scale")


def sum_all(a: Tensor) -> Tensor:
    out = np.sum(a.data, dtype=np.float64)

    def bwd(g):
        _accumulate(a, np.broadcast_to(np.asarray(g, dtype=a.data.dtype), a.data.shape))

    return _result(np.asarray(out, dtype=a.data.dtype), (a,), bwd, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    return affine(sum_all(a), 1.0 / a.data.size)


def sum_rows(a: Tensor) -> Tensor:
    """(N, D) -> (N,) row sums."""
    if a.data.ndim != 2:
        raise DimensionError("sum_rows: input must be (N, D)")
    out = np.sum(a.data, axis=1, dtype=np.float64).astype(a.data.dtype)

    def bwd(g):
        _accumulate(a, np.repeat(g[:, None], a.data.shape[1], axis=1))

    return _result(out, (a,), bwd, "sum_rows")


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor):
    """Populate .grad on every requires_grad tensor reachable from ``loss``.

    The root must be scalar; a second call on the same root raises.
    """
    if loss.data.shape != ():
        raise UsageError(f"backward: root must be scalar, got shape {loss.data.shape}")
    if loss._consumed:
        raise UsageError("backward: already called on this graph; rebuild it first")
    loss._consumed = True

    order = []
    visited = set()
    stack = [(loss, iter(loss._parents))]
    visited.add(id(loss))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited and p.requires_grad:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], t=0)


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adam_step: params/grads/state lengths differ")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise DimensionError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    """Convenience wrapper binding params to an AdamState."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self):
        grads = []
        for p in self.params:
            grads.append(np.zeros_like(p.data) if p.grad is None else p.grad)
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        zero_grad(self.params)


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    num_coords: int
    tolerance: float
    worst: tuple

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def check_gradients(build_loss, tensors, num_coords=60, h=1e-3, seed=0,
                    tolerance=1e-4) -> GradCheckReport:
    """Compare backward gradients against central finite differences.

    ``build_loss`` must rebuild the scalar loss from the current ``.data`` of
    the given tensors. Coordinates are sampled uniformly across all tensors.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    zero_grad(tensors)
    loss = build_loss()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad) for t in tensors]

    sizes = np.array([t.data.size for t in tensors])
    total = int(sizes.sum())
    count = min(num_coords, total)
    flat_choice = rng.choice(total, size=count, replace=False)
    bounds = np.cumsum(sizes)

    rels = []
    worst = (0.0, "", 0)
    for flat in flat_choice:
        ti = int(np.searchsorted(bounds, flat, side="right"))
        local = int(flat - (bounds[ti - 1] if ti else 0))
        t = tensors[ti]
        view = t.data.reshape(-1)
        keep = view[local]
        view[local] = keep + h
        up = float(build_loss().data)
        view[local] = keep - h
        down = float(build_loss().data)
        view[local] = keep
        fd = (up - down) / (2.0 * h)
        an = float(analytic[ti].reshape(-1)[local])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        rels.append(rel)
        if rel > worst[0]:
            worst = (rel, f"tensor{ti}", local)
    rels = np.array(rels)
    return GradCheckReport(float(rels.max()), float(rels.mean()), count, tolerance, worst)


def gradient_check(model, x, tolerance=1e-4, num_coords=60, h=1e-3, seed=0,
                   labels=None, loss_kind="cross_entropy") -> GradCheckReport:
    """Finite-difference check of a model's input and parameter gradients.

    The model is copied to float64 first so the comparison is not dominated
    by storage precision. Coordinates whose +-h perturbation flips a relu
    sign, a pool argmax, or a kwta survivor set straddle a kink where
    central differences are meaningless; those are resampled. ``loss_kind``
    is "cross_entropy" (random labels unless given) or "sum" (exact for
    linear models).
    """
    m64 = model.cast(np.float64)
    x64 = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    k = m64.num_classes
    if labels is None:
        rng_lab = np.random.Generator(np.random.PCG64(seed + 1))
        labels = rng_lab.integers(0, k, size=x64.data.shape[0])

    def forward():
        logits = m64.logits_t(x64)
        if loss_kind == "sum":
            return sum_all(logits)
        return softmax_cross_entropy(logits, labels)

    tensors = [x64] + m64.parameters()
    zero_grad(tensors)
    backward(forward())
    analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad)
                for t in tensors]

    pattern_fn = getattr(model, "activation_pattern", None)

    def pattern():
        if pattern_fn is None:
            return None
        return pattern_fn.__func__(m64, x64.data)

    def patterns_match(a, b):
        if a is None or b is None:
            return True
        return all(np.array_equal(pa, pb) for pa, pb in zip(a, b))

    base_pattern = pattern()
    rng = np.random.Generator(np.random.PCG64(seed))
    sizes = np.array([t.data.size for t in tensors])
    bounds = np.cumsum(sizes)
    total = int(sizes.sum())
    want = min(num_coords, total)

    rels = []
    worst = (0.0, "", 0)
    tried = set()
    attempts = 0
    while len(rels) < want and attempts < 50 * want:
        attempts += 1
        flat = int(rng.integers(0, total))
        if flat in tried:
            continue
        tried.add(flat)
        ti = int(np.searchsorted(bounds, flat, side="right"))
        local = int(flat - (bounds[ti - 1] if ti else 0))
        view = tensors[ti].data.reshape(-1)
        keep = view[local]
        view[local] = keep + h
        up = float(forward().data)
        up_pat = pattern()
        view[local] = keep - h
        down = float(forward().data)
        down_pat = pattern()
        view[local] = keep
        if not (patterns_match(base_pattern, up_pat) and patterns_match(base_pattern, down_pat)):
            continue
        fd = (up - down) / (2.0 * h)
        an = float(analytic[ti].reshape(-1)[local])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        rels.append(rel)
        if rel > worst[0]:
            worst = (rel, f"tensor{ti}", local)
    rels = np.array(rels) if rels else np.array([np.inf])
    return GradCheckReport(float(rels.max()), float(rels.mean()), len(rels), tolerance, worst)
