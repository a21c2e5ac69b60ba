"""Minimal dense-tensor reverse-mode autodiff engine.

Tensors wrap numpy arrays and remember the op that produced them plus
references to their parents, so the computation graph is the linked
tensor structure itself.  ``backward(loss)`` topologically orders that
graph and runs each node's backward closure exactly once, accumulating
(summing) gradients into every tensor that requires them.

Training runs in float32; gradient checking switches everything to
float64 because 32-bit central differences are too noisy for tight
tolerances.  Ops inherit the dtype of their inputs, so the switch is
just a matter of building float64 leaves.
"""

import numpy as np


class ConfigError(ValueError):
    """Shape or configuration mismatch between tensors/layers."""


class InputError(ValueError):
    """Invalid runtime input (bad labels, non-scalar loss, ...)."""


BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Tensor:
    """Dense n-d float array with optional gradient and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), name=""):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=np.float32, name=""):
    """Build a leaf tensor with an explicit dtype."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, name=name)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, op, parents):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), op=op, parents=parents)
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ConfigError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = _make(a.data + b.data, "add", (a, b))

    def _bw():
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    out._backward = _bw
    return out


def sub(a, b):
    if a.shape != b.shape:
        raise ConfigError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = _make(a.data - b.data, "sub", (a, b))

    def _bw():
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad)

    out._backward = _bw
    return out


def mul(a, b):
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise ConfigError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = _make(a.data * b.data, "mul", (a, b))

    def _bw():
        _accumulate(a, out.grad * b.data)
        _accumulate(b, out.grad * a.data)

    out._backward = _bw
    return out


def scale(x, c):
    """Multiply by a python scalar constant."""
    c = x.data.dtype.type(c)
    out = _make(x.data * c, "scale", (x,))

    def _bw():
        _accumulate(x, out.grad * c)

    out._backward = _bw
    return out


def add_const(x, c):
    """Add a python scalar constant."""
    c = x.data.dtype.type(c)
    out = _make(x.data + c, "add_const", (x,))

    def _bw():
        _accumulate(x, out.grad)

    out._backward = _bw
    return out


def concat(parts):
    """Concatenate N x D_i tensors along the feature axis."""
    parts = list(parts)
    if not parts:
        raise InputError("concat: empty part list")
    lead = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != lead:
            raise ConfigError(f"concat: leading dim mismatch {p.shape[0]} vs {lead}")
    out = _make(np.concatenate([p.data for p in parts], axis=1), "concat", tuple(parts))
    widths = [p.shape[1] for p in parts]

    def _bw():
        off = 0
        for p, w in zip(parts, widths):
            _accumulate(p, out.grad[:, off:off + w])
            off += w

    out._backward = _bw
    return out


def take_rows(x, idx):
    """Gather rows by integer index; backward scatters with accumulation."""
    idx = np.asarray(idx, dtype=np.int64)
    out = _make(x.data[idx], "take_rows", (x,))

    def _bw():
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, idx, out.grad)

    out._backward = _bw
    return out


def sum_rows(x):
    """Sum over the feature axis of an N x D tensor -> shape (N,)."""
    out = _make(x.data.sum(axis=1), "sum_rows", (x,))

    def _bw():
        _accumulate(x, np.repeat(out.grad[:, None], x.shape[1], axis=1))

    out._backward = _bw
    return out


def sum_all(x):
    out = _make(np.asarray(x.data.sum()).reshape(()), "sum_all", (x,))

    def _bw():
        _accumulate(x, np.broadcast_to(out.grad, x.data.shape).copy())

    out._backward = _bw
    return out


def mean_all(x):
    n = x.data.size
    out = _make(np.asarray(x.data.sum() / n).reshape(()), "mean_all", (x,))

    def _bw():
        _accumulate(x, np.broadcast_to(out.grad / n, x.data.shape).copy())

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x, kind):
    """Elementwise relu / tanh / sigmoid."""
    if kind == "relu":
        y = np.maximum(x.data, 0)
    elif kind == "tanh":
        y = np.tanh(x.data)
    elif kind == "sigmoid":
        y = _sigmoid(x.data)
    else:
        raise InputError(f"activation: unknown kind {kind!r}")
    out = _make(y, kind, (x,))

    def _bw():
        if kind == "relu":
            g = out.grad * (x.data > 0)
        elif kind == "tanh":
            g = out.grad * (1.0 - out.data * out.data)
        else:
            g = out.grad * out.data * (1.0 - out.data)
        _accumulate(x, g)

    out._backward = _bw
    return out


def relu(x):
    return activation(x, "relu")


def tanh(x):
    return activation(x, "tanh")


def sigmoid(x):
    return activation(x, "sigmoid")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(x, w):
    """N x D times D x E, no bias."""
    if x.shape[1] != w.shape[0]:
        raise ConfigError(f"matmul: inner dims {x.shape[1]} vs {w.shape[0]}")
    out = _make(x.data @ w.data, "matmul", (x, w))

    def _bw():
        _accumulate(x, out.grad @ w.data.T)
        _accumulate(w, x.data.T @ out.grad)

    out._backward = _bw
    return out


def linear(x, w, b):
    """Affine map: x @ w + b with x: N x D, w: D x E, b: E."""
    if x.shape[1] != w.shape[0]:
        raise ConfigError(f"linear: inner dims {x.shape[1]} vs {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ConfigError(f"linear: bias shape {b.shape} vs ({w.shape[1]},)")
    out = _make(x.data @ w.data + b.data, "linear", (x, w, b))

    def _bw():
        _accumulate(x, out.grad @ w.data.T)
        _accumulate(w, x.data.T @ out.grad)
        _accumulate(b, out.grad.sum(axis=0))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# convolution (im2col)
# ---------------------------------------------------------------------------

def _conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad, oh, ow):
    """Patch matrix of shape (C*Kh*Kw, N*OH*OW), one GEMM operand."""
    n, c, h, w = x.shape
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def _col2im(cols, x_shape, kh, kw, stride, pad, oh, ow):
    n, c, h, w = x_shape
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    xpad = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xpad[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    if pad > 0:
        return xpad[:, :, pad:pad + h, pad:pad + w]
    return xpad


def conv2d(x, w, bias=None, stride=1, pad=0):
    """2-d convolution, x: N C H W, w: O I Kh Kw, optional per-channel bias."""
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d: invalid stride={stride} pad={pad}")
    n, c, h, width = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ConfigError(f"conv2d: input channels {c} do not match kernel channels {ci}")
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(width, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ConfigError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{width} with pad {pad}")
    cols = _im2col(x.data, kh, kw, stride, pad, oh, ow)          # (c*kh*kw, n*oh*ow)
    wmat = w.data.reshape(o, c * kh * kw)
    y = np.ascontiguousarray((wmat @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3))
    if bias is not None:
        if bias.shape != (o,):
            raise ConfigError(f"conv2d: bias shape {bias.shape} vs ({o},)")
        y += bias.data[None, :, None, None]
    parents = (x, w) if bias is None else (x, w, bias)
    out = _make(y, "conv2d", parents)

    def _bw():
        gy = np.ascontiguousarray(out.grad.transpose(1, 0, 2, 3)).reshape(o, n * oh * ow)
        if w.requires_grad:
            _accumulate(w, (gy @ cols.T).reshape(w.data.shape))
        if x.requires_grad:
            _accumulate(x, _col2im(wmat.T @ gy, x.shape, kh, kw, stride, pad, oh, ow))
        if bias is not None:
            _accumulate(bias, out.grad.sum(axis=(0, 2, 3)))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def global_average_pool(x):
    """Mean over all spatial locations, N C H W -> N C."""
    n, c, h, w = x.shape
    out = _make(x.data.mean(axis=(2, 3)), "global_average_pool", (x,))

    def _bw():
        g = out.grad[:, :, None, None] / (h * w)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    out._backward = _bw
    return out


def weighted_average_pool(feat, mask):
    """Mask-weighted sum over locations divided by H*W (not by mask mass).

    feat: N C H W, mask: N 1 H W -> N C.
    """
    n, c, h, w = feat.shape
    if mask.shape != (n, 1, h, w):
        raise ConfigError(
            f"weighted_average_pool: mask shape {mask.shape} does not match feature map {(n, 1, h, w)}"
        )
    denom = feat.data.dtype.type(h * w)
    y = (feat.data * mask.data).sum(axis=(2, 3)) / denom
    out = _make(y, "weighted_average_pool", (feat, mask))

    def _bw():
        g = out.grad[:, :, None, None] / denom
        _accumulate(feat, g * mask.data)
        if mask.requires_grad:
            _accumulate(mask, (g * feat.data).sum(axis=1, keepdims=True))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running mean/var for one batch-norm site."""

    def __init__(self, dim, dtype=np.float32):
        self.mean = np.zeros(dim, dtype=dtype)
        self.var = np.ones(dim, dtype=dtype)

    def copy(self):
        s = BatchNormState(self.mean.shape[0], self.mean.dtype)
        s.mean = self.mean.copy()
        s.var = self.var.copy()
        return s


def batch_norm(x, gamma, beta, state, training):
    """Batch normalization over N x D or N x C x H x W input.

    Train mode normalizes by batch statistics (eps 1e-5) and updates the
    running stats with momentum 0.9; eval mode normalizes by the running
    stats.  4-d input is normalized per channel over (N, H, W).
    """
    four_d = x.data.ndim == 4
    axes = (0, 2, 3) if four_d else (0,)
    dim = x.shape[1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ConfigError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} vs ({dim},)")
    count = x.data.size // dim
    eps = x.data.dtype.type(BN_EPS)

    def _expand(v):
        return v[None, :, None, None] if four_d else v[None, :]

    if training:
        if count < 2:
            raise InputError("batch_norm: train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.mean = BN_MOMENTUM * state.mean + (1.0 - BN_MOMENTUM) * mean.astype(state.mean.dtype)
        unbiased = var * (count / (count - 1))
        state.var = BN_MOMENTUM * state.var + (1.0 - BN_MOMENTUM) * unbiased.astype(state.var.dtype)
    else:
        mean = state.mean.astype(x.data.dtype)
        var = state.var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - _expand(mean)) * _expand(inv_std)
    y = xhat * _expand(gamma.data) + _expand(beta.data)
    out = _make(y, "batch_norm", (x, gamma, beta))

    def _bw():
        gy = out.grad
        _accumulate(gamma, (gy * xhat).sum(axis=axes))
        _accumulate(beta, gy.sum(axis=axes))
        if x.requires_grad:
            gs = _expand(gamma.data * inv_std)
            if training:
                m1 = gy.mean(axis=axes)
                m2 = (gy * xhat).mean(axis=axes)
                gx = gs * (gy - _expand(m1) - xhat * _expand(m2))
            else:
                gx = gs * gy
            _accumulate(x, gx)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits, targets):
    """Mean over the batch of -log softmax(logits)[target]."""
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise InputError(f"softmax_cross_entropy: targets shape {targets.shape} vs ({n},)")
    if targets.min() < 0 or targets.max() >= c:
        raise InputError(f"softmax_cross_entropy: target out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), targets] - np.log(ez.sum(axis=1)))
    out = _make(np.asarray(nll.mean()).reshape(()), "softmax_cross_entropy", (logits,))

    def _bw():
        g = probs.copy()
        g[np.arange(n), targets] -= 1.0
        _accumulate(logits, g * (out.grad / n))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Reverse-mode sweep from a scalar loss; gradients accumulate by sum."""
    if loss.data.size != 1:
        raise InputError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn, inputs, seed=0, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` may return a tensor of any shape; the output is
    contracted against a fixed random projection so every output element
    influences the scalar being differentiated.  Relative error per
    element is |a - n| / max(1e-8, |a| + |n|).
    """
    rng = np.random.default_rng(seed)
    probe = fn(*inputs)
    weights = rng.standard_normal(probe.data.shape).astype(np.float64)

    def scalar_loss():
        return float((fn(*inputs).data.astype(np.float64) * weights).sum())

    # analytic gradients
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    loss = sum_all(mul(out, Tensor(weights.astype(out.data.dtype))))
    backward(loss)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lo_hi = scalar_loss()
            flat[i] = orig - step
            lo_lo = scalar_loss()
            flat[i] = orig
            numeric = (lo_hi - lo_lo) / (2.0 * step)
            a = float(aflat[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst


def _rand(rng, shape, requires_grad=True):
    return tensor(rng.standard_normal(shape), requires_grad=requires_grad, dtype=np.float64)


def _rand_nonzero(rng, shape, margin=1e-3):
    """Standard normal values kept away from zero (relu kink safety)."""
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, margin * np.sign(x) + (x == 0) * margin, x)
    return tensor(x, requires_grad=True, dtype=np.float64)


def _case_conv2d(rng):
    x = _rand(rng, (2, 3, 5, 4))
    w = _rand(rng, (4, 3, 3, 3))
    b = _rand(rng, (4,))
    return lambda x, w, b: conv2d(x, w, b, stride=2, pad=1), [x, w, b]


def _case_conv2d_1x1(rng):
    x = _rand(rng, (2, 5, 3, 3))
    w = _rand(rng, (2, 5, 1, 1))
    return lambda x, w: conv2d(x, w), [x, w]


def _case_linear(rng):
    x = _rand(rng, (2, 3))
    w = _rand(rng, (3, 4))
    b = _rand(rng, (4,))
    return linear, [x, w, b]


def _case_matmul(rng):
    return matmul, [_rand(rng, (3, 4)), _rand(rng, (4, 2))]


def _case_batch_norm_train(rng):
    x = _rand(rng, (5, 3))
    gamma = _rand(rng, (3,))
    beta = _rand(rng, (3,))
    state = BatchNormState(3, np.float64)
    return lambda x, g, b: batch_norm(x, g, b, state, training=True), [x, gamma, beta]


def _case_batch_norm_train_4d(rng):
    x = _rand(rng, (3, 2, 4, 3))
    gamma = _rand(rng, (2,))
    beta = _rand(rng, (2,))
    state = BatchNormState(2, np.float64)
    return lambda x, g, b: batch_norm(x, g, b, state, training=True), [x, gamma, beta]


def _case_batch_norm_eval(rng):
    x = _rand(rng, (4, 3))
    gamma = _rand(rng, (3,))
    beta = _rand(rng, (3,))
    state = BatchNormState(3, np.float64)
    state.mean = rng.standard_normal(3)
    state.var = 0.5 + rng.random(3)
    return lambda x, g, b: batch_norm(x, g, b, state, training=False), [x, gamma, beta]


def _case_relu(rng):
    return relu, [_rand_nonzero(rng, (4, 5))]


def _case_tanh(rng):
    return tanh, [_rand(rng, (4, 5))]


def _case_sigmoid(rng):
    return sigmoid, [_rand(rng, (4, 5))]


def _case_global_average_pool(rng):
    return global_average_pool, [_rand(rng, (2, 3, 4, 5))]


def _case_weighted_average_pool(rng):
    feat = _rand(rng, (1, 2, 3, 3))
    mask = _rand(rng, (1, 1, 3, 3))
    return weighted_average_pool, [feat, mask]


def _case_softmax_cross_entropy(rng):
    logits = _rand(rng, (5, 4))
    targets = rng.integers(0, 4, size=5)
    return lambda z: softmax_cross_entropy(z, targets), [logits]


def _case_concat(rng):
    return lambda a, b, c: concat([a, b, c]), [_rand(rng, (3, 2)), _rand(rng, (3, 4)), _rand(rng, (3, 1))]


def _case_add(rng):
    return add, [_rand(rng, (3, 4)), _rand(rng, (3, 4))]


def _case_sub(rng):
    return sub, [_rand(rng, (3, 4)), _rand(rng, (3, 4))]


def _case_mul(rng):
    return mul, [_rand(rng, (3, 4)), _rand(rng, (3, 4))]


def _case_scale(rng):
    return lambda x: scale(x, 0.37), [_rand(rng, (3, 4))]


def _case_add_const(rng):
    return lambda x: add_const(x, 1.25), [_rand(rng, (3, 4))]


def _case_take_rows(rng):
    x = _rand(rng, (5, 3))
    idx = rng.integers(0, 5, size=7)
    return lambda x: take_rows(x, idx), [x]


def _case_sum_rows(rng):
    return sum_rows, [_rand(rng, (4, 3))]


def _case_sum_all(rng):
    return sum_all, [_rand(rng, (3, 4))]


def _case_mean_all(rng):
    return mean_all, [_rand(rng, (3, 4))]


GRAD_CHECK_CASES = {
    "conv2d": _case_conv2d,
    "conv2d_1x1": _case_conv2d_1x1,
    "linear": _case_linear,
    "matmul": _case_matmul,
    "batch_norm_train": _case_batch_norm_train,
    "batch_norm_train_4d": _case_batch_norm_train_4d,
    "batch_norm_eval": _case_batch_norm_eval,
    "relu": _case_relu,
    "tanh": _case_tanh,
    "sigmoid": _case_sigmoid,
    "global_average_pool": _case_global_average_pool,
    "weighted_average_pool": _case_weighted_average_pool,
    "softmax_cross_entropy": _case_softmax_cross_entropy,
    "concat": _case_concat,
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "add_const": _case_add_const,
    "take_rows": _case_take_rows,
    "sum_rows": _case_sum_rows,
    "sum_all": _case_sum_all,
    "mean_all": _case_mean_all,
}


def check_op(name, seed=0, step=1e-5):
    """Run the registered gradient check for one op; returns max rel error."""
    if name not in GRAD_CHECK_CASES:
        raise InputError(f"check_op: unknown op {name!r}")
    rng = np.random.default_rng(seed)
    fn, inputs = GRAD_CHECK_CASES[name](rng)
    return grad_check(fn, inputs, seed=seed + 1, step=step)
