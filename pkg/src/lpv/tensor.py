"""Dense numpy-backed tensor with reverse-mode automatic differentiation.

Every differentiable op builds an output tensor holding its parents and a
closure mapping the output gradient to one gradient per parent. ``backward``
walks the graph in reverse topological order. Leaves created with
``requires_grad=True`` accumulate into ``.grad``; intermediate gradients are
freed as soon as they have been propagated.

Masked softmax uses a finite sentinel (``NEG_INF``) instead of -inf, then
zeroes the masked weights and renormalizes so masked entries are exactly 0.
"""

from __future__ import annotations

import numpy as np

NEG_INF = -1e9
# Mask entries at or below this are treated as masked.
_MASKED_BELOW = NEG_INF / 2


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when a caller breaks an op's documented precondition."""


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = None

    @classmethod
    def _make(cls, data, parents, backward, op):
        """Create an op output; ``backward(g)`` returns one grad (or None) per parent."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- autograd ----------------------------------------------------------
    def backward(self):
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ----------------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -self._coerce(other))

    def __rsub__(self, other):
        return add(self._coerce(other), -self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(self._coerce(other)))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# -- elementwise ---------------------------------------------------------------
def add(a, b):
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._make(ad * bd, (a, b), backward, "mul")


def scale(a, c):
    c = float(c)

    def backward(g):
        return (g * c,)

    return Tensor._make(a.data * a.dtype.type(c), (a,), backward, "scale")


def reciprocal(a):
    out = 1.0 / a.data

    def backward(g):
        return (-g * out * out,)

    return Tensor._make(out, (a,), backward, "reciprocal")


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor._make(out, (a,), backward, "exp")


def log(a):
    ad = a.data

    def backward(g):
        return (g / ad,)

    return Tensor._make(np.log(ad), (a,), backward, "log")


def relu(a):
    pos = a.data > 0

    def backward(g):
        return (g * pos,)

    return Tensor._make(a.data * pos, (a,), backward, "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """GELU, tanh approximation (smooth, so finite differences behave)."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    x2 = x * x
    inner = c * (x + k * x2 * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        d_inner = c * (1.0 + 3.0 * k * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return Tensor._make(out, (a,), backward, "gelu")


# -- shape ops -------------------------------------------------------------------
def reshape(a, shape):
    src = a.shape

    def backward(g):
        return (g.reshape(src),)

    return Tensor._make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return Tensor._make(a.data.transpose(axes), (a,), backward, "transpose")


def getitem(a, idx):
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(a.data[idx], (a,), backward, "getitem")


def concat(tensors, axis=-1):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis),
                        tuple(tensors), backward, "concat")


# -- reductions --------------------------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)),
                        (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# -- linear algebra -------------------------------------------------------------------
def _mm(a, b):
    """a @ b. float32 goes to BLAS; wider types accumulate over k in index order,
    matching a plain triple loop bit for bit."""
    if a.dtype == np.float32 and b.dtype == np.float32:
        return a @ b
    k = a.shape[-1]
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    out = np.zeros(shape, dtype=np.result_type(a, b))
    for p in range(k):
        out += a[..., :, p, None] * b[..., None, p, :]
    return out


def matmul(a, b):
    """Batched matrix product; a 2-D right operand is shared across the batch."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {ad.shape} and {bd.shape}")

    if bd.ndim == 2:
        lead = ad.shape[:-1]
        flat = ad.reshape(-1, ad.shape[-1])
        out = _mm(flat, bd).reshape(*lead, bd.shape[1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (_mm(g, bd.T), _mm(flat.T, g2))

        return Tensor._make(out, (a, b), backward, "matmul")

    def backward(g):
        ga = _mm(g, np.swapaxes(bd, -1, -2))
        gb = _mm(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(_mm(ad, bd), (a, b), backward, "matmul")


def softmax_lastdim(x, mask=None):
    """Softmax over the last axis with an optional additive {0, NEG_INF} mask.

    ``mask`` may be a Tensor or array broadcastable to ``x``. Masked weights
    are exactly zero. A row in which every entry is masked raises
    ``ContractError``.
    """
    z = x.data
    masked = None
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        masked = m <= _MASKED_BELOW
        if masked.any():
            full = np.broadcast_to(masked, z.shape) if masked.shape != z.shape else masked
            if full.all(axis=-1).any():
                raise ContractError("softmax: a row is fully masked")
            z = z + m.astype(z.dtype, copy=False)
        else:
            masked = None
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if masked is not None:
        e = np.where(masked, 0.0, e).astype(z.dtype, copy=False)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), backward, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply scale ``gamma`` and shift ``beta``."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = g * gamma.data
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return Tensor._make(out, (x, gamma, beta), backward, "layer_norm")


def cross_entropy(logits, labels, reduce=True):
    """Mean (or per-row) negative log-likelihood of integer ``labels`` under softmax(logits).

    ``logits`` has shape (..., C); ``labels`` integer array of shape (...).
    """
    z = logits.data
    labels = np.asarray(labels)
    c = z.shape[-1]
    if labels.shape != z.shape[:-1]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {z.shape}")
    if labels.size and (labels.max() >= c or labels.min() < 0):
        raise ValueError(f"cross_entropy: label index outside [0, {c})")
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    nll = -picked
    probs = np.exp(logp)

    if reduce:
        count = nll.size

        def backward(g):
            d = probs.copy()
            np.put_along_axis(d, labels[..., None],
                              np.take_along_axis(d, labels[..., None], axis=-1) - 1.0, axis=-1)
            return (d * (g / count),)

        return Tensor._make(np.asarray(nll.mean()), (logits,), backward, "cross_entropy")

    def backward_rows(g):
        d = probs.copy()
        np.put_along_axis(d, labels[..., None],
                          np.take_along_axis(d, labels[..., None], axis=-1) - 1.0, axis=-1)
        return (d * g[..., None],)

    return Tensor._make(nll, (logits,), backward_rows, "cross_entropy")


# -- gradient checking ----------------------------------------------------------------
def finite_diff_check(f, x, eps=1e-5):
    """Max relative error between autograd and central differences.

    ``f`` is called as ``f(x)`` and must return a scalar Tensor. ``x`` is a
    Tensor or a list of Tensors (e.g. model parameters) that ``f`` depends
    on; each is perturbed in place, one coordinate at a time. The error per
    coordinate is ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    loss = f(x)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    worst = 0.0
    for t, a in zip(xs, analytic):
        flat = t.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).data[()]
            flat[i] = orig - eps
            fm = f(x).data[()]
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(a_flat[i] - num) / (abs(a_flat[i]) + 1e-8)
            worst = max(worst, float(err))
    for t, (rg, g) in zip(xs, saved):
        t.requires_grad = rg
        t.grad = g
    return worst


class Rng:
    """Seeded, platform-independent random stream (PCG64)."""

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std=1.0, dtype=np.float64):
        return (self.gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self.gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=None):
        return self.gen.integers(low, high, shape)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, n, size=None, replace=True):
        return self.gen.choice(n, size=size, replace=replace)

    def spawn(self, key):
        """Independent child stream derived from (seed, key)."""
        return Rng(np.random.SeedSequence([self.seed, int(key)]).generate_state(1, np.uint64)[0])
