"""A small reverse-mode autodiff engine over numpy arrays.

Every differentiable op records its parents and a closure mapping the
output gradient to parent gradients. The hot kernels (layer norm, softmax,
GELU, binary cross-entropy) are fused with hand-derived backward passes so
a transformer step stays within a few hundred numpy calls.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import binfmt
from .errors import NonFiniteLoss, ShapeMismatch

LN_EPS = 1e-5
BCE_CLAMP = 1e-7


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: mul(self, -1.0)


def tensor(data, dtype=np.float64, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if bd.ndim > 1 else np.multiply.outer(g, bd)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def tabs(a: Tensor) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * d,)

    return _node(out, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _node(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis with biased variance, then scale/shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm over {d} features got gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _node(out, (x, gain, bias), back)


def l1_loss(target, pred: Tensor, axis=None) -> Tensor:
    """Sum of absolute differences (over ``axis`` if given)."""
    return tsum(tabs(sub(target, pred)), axis=axis)


def binary_cross_entropy(phi: Tensor, labels) -> Tensor:
    """Mean BCE with ``phi`` clamped to [1e-7, 1 - 1e-7]."""
    p = phi.data
    lab = np.asarray(labels, dtype=p.dtype).reshape(p.shape)
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (p >= BCE_CLAMP) & (p <= 1.0 - BCE_CLAMP)
    n = p.size
    loss = -(lab * np.log(pc) + (1.0 - lab) * np.log(1.0 - pc)).mean()

    def back(g):
        d = -(lab / pc - (1.0 - lab) / (1.0 - pc)) / n
        return (g * d * inside,)

    return _node(np.asarray(loss, dtype=p.dtype), (phi,), back)


# ---------------------------------------------------------------------------
# backward


def _topo(root: Tensor):
    order = []
    state = {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        st = state.get(key, 0)
        if st == 2:
            continue
        assert st != 1, "cycle in autodiff graph"
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and state.get(id(p), 0) != 2:
                assert state.get(id(p), 0) != 1, "cycle in autodiff graph"
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that
    requires gradients."""
    if not loss.requires_grad:
        return
    if grad is None:
        if loss.data.size != 1:
            raise ShapeMismatch("backward() without a seed needs a scalar loss")
        grad = np.ones_like(loss.data)
    grads = {id(loss): grad}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg


# ---------------------------------------------------------------------------
# parameters


class ParamSet:
    """Ordered mapping of parameter names to leaf tensors."""

    def __init__(self, dtype=np.float64):
        self._params = {}
        self.dtype = np.dtype(dtype)
        self.init_scheme = {}

    def add(self, name: str, data, scheme: str = "given") -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        self.init_scheme[name] = scheme
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self):
        return list(self._params)

    def scope(self, prefix: str) -> "ParamView":
        return ParamView(self, prefix)

    @property
    def count(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def zero_grad(self):
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def grads(self) -> dict:
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for n, p in self._params.items()}

    def state_dict(self) -> dict:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state_dict(self, state: dict):
        for n, p in self._params.items():
            if n not in state:
                raise KeyError(f"missing parameter {n!r}")
            arr = np.asarray(state[n])
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{n}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(self.dtype)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for n, p in self._params.items():
            h.update(n.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


class ParamView:
    """Prefix-scoped view used to hand a sub-block's parameters to a layer."""

    def __init__(self, base: ParamSet, prefix: str):
        self.base = base
        self.prefix = prefix

    def __getitem__(self, name) -> Tensor:
        return self.base[f"{self.prefix}.{name}"]

    def __contains__(self, name):
        return f"{self.prefix}.{name}" in self.base

    def scope(self, prefix: str) -> "ParamView":
        return ParamView(self.base, f"{self.prefix}.{prefix}")


class Initializer:
    """Seeded parameter factory: weights ~ N(0, std^2), gains 1, biases 0."""

    def __init__(self, params: ParamSet, seed: int, std: float = 0.02):
        self.params = params
        self.rng = np.random.default_rng(seed)
        self.std = std

    def normal(self, name, shape, std=None):
        s = self.std if std is None else std
        return self.params.add(name, self.rng.normal(0.0, s, size=shape), f"normal(0,{s}^2)")

    def zeros(self, name, shape):
        return self.params.add(name, np.zeros(shape), "zeros")

    def ones(self, name, shape):
        return self.params.add(name, np.ones(shape), "ones")

    def linear(self, name, fan_in, fan_out, std=None):
        self.normal(f"{name}.w", (fan_in, fan_out), std)
        self.zeros(f"{name}.b", (fan_out,))

    def layer_norm(self, name, d):
        self.ones(f"{name}.gain", (d,))
        self.zeros(f"{name}.bias", (d,))


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamSet, grads: dict, st: OptimizerState) -> OptimizerState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    st.step += 1
    t = st.step
    c1 = 1.0 - st.beta1 ** t
    c2 = 1.0 - st.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = st.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = st.v[name]
        m = st.beta1 * m + (1.0 - st.beta1) * g
        v = st.beta2 * v + (1.0 - st.beta2) * g * g
        st.m[name], st.v[name] = m, v
        p.data = p.data - st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
    return st


class Adam:
    def __init__(self, params: ParamSet, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        self.params.zero_grad()

    def step(self):
        adam_step(self.params, self.params.grads(), self.state)


def minimize(params: ParamSet, opt: Adam, loss_fn, steps: int = 1) -> float:
    """Run ``steps`` Adam updates on ``loss_fn()``; returns the last loss."""
    val = float("nan")
    for _ in range(steps):
        opt.zero_grad()
        loss = loss_fn()
        val = float(loss.data)
        if not math.isfinite(val):
            raise NonFiniteLoss(f"loss became {val}")
        backward(loss)
        opt.step()
    return val


def grad_check(f, params: ParamSet, h: float = 1e-5, samples: int = 100, seed: int = 0,
               names=None) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` is a zero-argument callable that rebuilds the scalar loss from the
    current parameter values. ``samples`` coordinates are drawn uniformly
    over all parameters (or those in ``names``).
    """
    if not h > 0:
        raise ValueError(f"step h must be > 0, got {h}")
    params.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss("loss is not finite at the check point")
    backward(loss)
    names = list(params.names() if names is None else names)
    sizes = np.array([params[n].data.size for n in names])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for k in np.sort(flat):
        i = int(np.searchsorted(bounds, k, side="right"))
        off = int(k - (bounds[i - 1] if i else 0))
        p = params[names[i]]
        analytic = float(p.grad.reshape(-1)[off])
        view = p.data.reshape(-1)
        orig = view[off]
        view[off] = orig + h
        up = float(f().data)
        view[off] = orig - h
        down = float(f().data)
        view[off] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NonFiniteLoss(f"loss not finite when perturbing {names[i]}[{off}]")
        numeric = (up - down) / (2.0 * h)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ParamSet) -> None:
    """Name table, shapes and float32 payloads after a ``TXSG`` v3 header."""
    with open(path, "wb") as fh:
        fh.write(binfmt.header(binfmt.CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.shape))
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict:
    r = binfmt.open_reader(path, binfmt.CHECKPOINT_VERSION)
    (count,) = r.unpack("I")
    table = []
    for _ in range(count):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("B")
        shape = r.unpack(f"{ndim}I") if ndim else ()
        table.append((name, tuple(shape)))
    out = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        out[name] = r.f32(size).reshape(shape)
    return out
