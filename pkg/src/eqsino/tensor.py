"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations the layers need are provided.  Every op records its
inputs and a closure that pushes the output gradient back to them; a
``backward`` call sweeps the recorded graph once in reverse topological
order and then releases it.
"""

from __future__ import annotations

import contextlib
import json
import struct
from typing import Callable, Iterator

import numpy as np
import scipy.sparse as sp

from .errors import FormatError, NumericalError, UsageError

_STATE = {"grad": True, "debug": False, "dtype": np.float64}


@contextlib.contextmanager
def no_grad():
    prev = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = prev


@contextlib.contextmanager
def debug_mode(on: bool = True):
    """Raise NumericalError as soon as any op produces a non-finite value."""
    prev = _STATE["debug"]
    _STATE["debug"] = on
    try:
        yield
    finally:
        _STATE["debug"] = prev


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype}")
    _STATE["dtype"] = dtype.type


def default_dtype():
    return _STATE["dtype"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_STATE["dtype"])
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A leaf tensor with a stable name used by checkpoints and the optimizer."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)

    def zero_grad(self):
        self.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    if _STATE["debug"] and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value produced by forward op")
    out = Tensor(data)
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        raise UsageError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    t.grad = g.copy() if t.grad is None else t.grad + g


def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    The graph is consumed: intermediate closures are dropped, and calling
    backward on the same loss again raises.
    """
    if loss._consumed:
        raise UsageError("backward called twice on the same graph")
    if loss.data.size != 1:
        raise UsageError("backward needs a scalar loss")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any parameter")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                _acc(node, g)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
    loss._consumed = True


# -- elementwise ------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise UsageError(f"add: shapes {a.shape} and {b.shape} differ")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise UsageError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise UsageError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a constant array broadcasting onto ``a``'s shape."""
    c = np.asarray(c, dtype=a.data.dtype)
    out = a.data * c
    if out.shape != a.shape:
        raise UsageError("mul_const may not change the tensor shape")
    return _node(out, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., C] + b[C]."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise UsageError("add_bias expects b of shape [C] matching the last axis")
    axes = tuple(range(x.data.ndim - 1))
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def swish(x: Tensor) -> Tensor:
    sig = _sigmoid(x.data)
    out = x.data * sig

    def bw(g):
        return (g * (sig + out * (1.0 - sig)),)

    return _node(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def square(x: Tensor) -> Tensor:
    return _node(x.data**2, (x,), lambda g: (2.0 * g * x.data,))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    sig = _sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * sig,))


# -- shape and reduction ----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def total(x: Tensor) -> Tensor:
    return _node(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _node(np.mean(x.data), (x,), lambda g: (np.broadcast_to(g / n, x.shape),))


def weighted_mean(z: Tensor, w: Tensor) -> Tensor:
    """sum_m w[m] z[n, m, :] / sum_m w[m] for z [N, M, C], w [M] > 0."""
    if z.data.ndim != 3 or w.shape != (z.shape[1],):
        raise UsageError("weighted_mean expects z [N, M, C] and w [M]")
    # summing sorted terms makes the result independent of point order
    W = np.sort(w.data).sum()
    out = np.sort(z.data * w.data[None, :, None], axis=1).sum(axis=1) / W

    def bw(g):
        gz = g[:, None, :] * (w.data / W)[None, :, None]
        gw = (np.einsum("nc,nmc->m", g, z.data) - np.sum(g * out)) / W
        return gz, gw

    return _node(out, (z, w), bw)


# -- linear algebra -----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., k] @ b[k, n]."""
    if b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise UsageError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _node(out, (a, b), bw)


def neighbor_conv(W: Tensor, K: Tensor, zg: Tensor, q: Tensor) -> Tensor:
    """out[n,j,o] = sum_{i,c,b} W[o,c,b] K[j,i,b] zg[n,j,i,c] q[j,i].

    The kernel basis ``K`` and weights ``q`` are shared across the batch
    axis ``n``; the contraction over the neighbor axis ``i`` happens first,
    which keeps the cost linear in the channel product.
    """
    Co, Ci, B = W.shape
    N, J, k, C = zg.shape
    if C != Ci or K.shape != (J, k, B) or q.shape != (J, k):
        raise UsageError("neighbor_conv: operand shapes are inconsistent")
    Kq = K.data * q.data[..., None]
    # batched over j: [B, k] @ [k, N*C]
    Z = zg.data.transpose(1, 2, 0, 3).reshape(J, k, N * C)
    U2 = np.matmul(Kq.transpose(0, 2, 1), Z)
    U = U2.reshape(J, B, N, C).transpose(2, 0, 1, 3)
    Wm = W.data.transpose(2, 1, 0).reshape(B * C, Co)
    out = U.reshape(N, J, B * C) @ Wm

    def bw(g):
        gU = (g @ Wm.T).reshape(N, J, B, C)
        gW = (U.reshape(-1, B * C).T @ g.reshape(-1, Co)).reshape(B, C, Co).transpose(2, 1, 0)
        gU2 = gU.transpose(1, 2, 0, 3).reshape(J, B, N * C)
        gKq = np.matmul(Z, gU2.transpose(0, 2, 1))
        gz = np.matmul(Kq, gU2).reshape(J, k, N, C).transpose(2, 0, 1, 3)
        gK = gKq * q.data[..., None]
        gq = np.sum(gKq * K.data, axis=-1)
        return gW, gK, gz, gq

    return _node(out, (W, K, zg, q), bw)


# -- indexing ---------------------------------------------------------------------


def gather(src: Tensor, idx, axis: int = 0) -> Tensor:
    """Index ``src`` along ``axis`` with an integer array of any shape."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take(src.data, idx, axis=axis)

    def bw(g):
        return (scatter_add_np(g, idx, src.shape, axis),)

    return _node(out, (src,), bw)


def scatter_add_np(g, idx, shape, axis: int = 0) -> np.ndarray:
    """Adjoint of np.take: accumulate ``g`` into zeros(shape) in index order."""
    flat = idx.reshape(-1)
    P = flat.size
    gm = np.moveaxis(g.reshape(g.shape[:axis] + (P,) + g.shape[axis + idx.ndim:]), axis, 0)
    S = sp.csr_matrix((np.ones(P, dtype=g.dtype), (flat, np.arange(P))), shape=(shape[axis], P))
    summed = np.asarray(S @ gm.reshape(P, -1)).reshape((shape[axis],) + gm.shape[1:])
    return np.ascontiguousarray(np.moveaxis(summed, 0, axis))


def scatter_sum(src: Tensor, idx, n_out: int, axis: int = 0) -> Tensor:
    """out[..., m, ...] = sum over positions p with idx[p] = m of src[..., p, ...]."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = src.shape[:axis] + (n_out,) + src.shape[axis + idx.ndim:]
    out = scatter_add_np(src.data, idx, shape, axis)
    return _node(out, (src,), lambda g: (np.take(g, idx, axis=axis),))


# -- normalization ------------------------------------------------------------------


BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var, training: bool) -> Tensor:
    """Per-channel normalization of x[R, C].

    In training mode the batch statistics are used and the running buffers
    are updated in place as ``running = momentum*running + (1-momentum)*batch``.
    """
    if x.data.ndim != 2:
        raise UsageError("batchnorm expects x of shape [R, C]")
    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= BN_MOMENTUM
        running_mean += (1.0 - BN_MOMENTUM) * mu
        n = x.shape[0]
        unbiased = var * n / (n - 1) if n > 1 else var
        running_var *= BN_MOMENTUM
        running_var += (1.0 - BN_MOMENTUM) * unbiased
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = np.sum(g * xhat, axis=0)
        gb = np.sum(g, axis=0)
        gxhat = g * gamma.data
        if training:
            gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * np.mean(gxhat * xhat, axis=0))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    return _node(out, (x, gamma, beta), bw)


# -- losses -------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    N = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    loss = -np.mean(logp[np.arange(N), labels])

    def bw(g):
        p = np.exp(logp)
        p[np.arange(N), labels] -= 1.0
        return (g * p / N,)

    return _node(loss, (logits,), bw)


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise UsageError("mse: prediction and target shapes differ")
    diff = pred.data - target
    n = diff.size
    return _node(np.mean(diff**2), (pred,), lambda g: (g * 2.0 * diff / n,))


# -- finite differences -------------------------------------------------------------


def grad_check(f: Callable[[], Tensor], inputs: list, eps: float = 1e-5) -> float:
    """Max relative error of reverse-mode gradients against central differences.

    ``f`` rebuilds the scalar output from scratch on each call, reading the
    current ``.data`` of ``inputs``.  The error for each input is the sup of
    the difference scaled by the sup of the reference gradient.
    """
    for t in inputs:
        t.grad = None
    backward(f())
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
        denom = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
        worst = max(worst, float(np.max(np.abs(analytic - numeric)) / denom))
    return worst


# -- modules ------------------------------------------------------------------------


class Module:
    """Container walking its attributes for parameters, buffers and submodules."""

    training = True

    def _children(self) -> Iterator[tuple]:
        for key, val in vars(self).items():
            if isinstance(val, (Parameter, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            else:
                yield from val.named_parameters(name + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def buffers(self) -> dict:
        """Non-trainable arrays registered by a module (e.g. running stats)."""
        return {}

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in self.buffers().items():
            yield f"{prefix}{key}", val
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")

    def train(self, mode: bool = True):
        self.training = mode
        for _, val in self._children():
            if isinstance(val, Module):
                val.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict:
        state = {f"param/{n}": p.data for n, p in self.named_parameters()}
        state.update({f"buffer/{n}": b for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = {f"param/{n}" for n in params} | {f"buffer/{n}" for n in buffers}
        if set(state) != expected:
            missing = sorted(expected - set(state))[:3]
            extra = sorted(set(state) - expected)[:3]
            raise FormatError(f"state mismatch: missing {missing}, unexpected {extra}")
        for n, p in params.items():
            arr = state[f"param/{n}"]
            if arr.shape != p.shape:
                raise FormatError(f"shape mismatch for {n}: {arr.shape} vs {p.shape}")
            p.data[...] = arr
        for n, b in buffers.items():
            b[...] = state[f"buffer/{n}"]


# -- checkpoint format ---------------------------------------------------------------

CKPT_MAGIC = b"EQCKPT\x00\x01"
CKPT_VERSION = 1


def write_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    """Binary layout (little-endian):

        magic[8] | version u32 | count u32 |
        count x (name_len u32 | name utf-8 | rank u32 | dims u64[rank] | f64[prod dims]) |
        meta_len u64 | meta JSON utf-8
    """
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(blob)) + blob)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path) -> tuple:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 16
    arrays = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            n = int(np.prod(dims, dtype=np.int64))
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * n
        (mlen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        meta = json.loads(buf[pos:pos + mlen].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated or corrupt checkpoint: {exc}") from exc
    return arrays, meta
