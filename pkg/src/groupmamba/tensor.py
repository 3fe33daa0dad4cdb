"""Dense-tensor core with deterministic reverse-mode differentiation.

Tensors wrap numpy arrays laid out row-major with the channel axis fastest,
so feature maps are (batch, height, width, channel) and sequence views are
plain reshapes. Every differentiable op records its parents and a
vector-Jacobian closure; `gradients` replays the graph in reverse
topological order. Traversal and accumulation order depend only on graph
structure, so backward is bit-deterministic for a fixed graph.

Multiply-accumulate accounting: inside a `count_macs()` block each op adds
its cost to the active counter. The rules, which the analytic model-level
counts mirror exactly, are:

  matmul            prod(batch dims) * m * k * n
  conv2d            B * Ho * Wo * kh * kw * Cin * Cout
  dwconv1d          B * L * k * C
  elementwise mul   output element count
  div / pow / mean  output element count
  layer_norm        3 * element count
  add / sub / transcendentals / reductions by sum   0

Dtype policy: float32 for training, float64 for every verification path
(gradient checks, oracle comparisons). Binary ops require matching dtypes.
"""

from __future__ import annotations

import contextlib
import math
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# Optional forward finiteness checking (debug builds). Enabled via the
# environment or `set_check_finite`; off by default for speed.
_CHECK_FINITE = os.environ.get("GROUPMAMBA_CHECK_FINITE", "0") not in ("0", "", "false")


def set_check_finite(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; forward values only."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class MacCounter:
    __slots__ = ("macs",)

    def __init__(self):
        self.macs = 0


def _active_counter() -> MacCounter | None:
    return getattr(_state, "mac_counter", None)


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of every op run inside the block."""
    counter = MacCounter()
    prev = _active_counter()
    _state.mac_counter = counter
    try:
        yield counter
    finally:
        _state.mac_counter = prev


def _add_macs(n: int) -> None:
    counter = _active_counter()
    if counter is not None:
        counter.macs += int(n)


class Tensor:
    """A node in the computation record: value, optional grad, parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[np.ndarray], tuple] | None = None,
        requires_grad: bool = False,
        name: str = "",
    ):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if _grad_enabled() and self.requires_grad else ()
        self._vjp = vjp if self._parents else None
        self.name = name
        if _CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor {name or '<anon>'}")

    # -- metadata ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Populate `.grad` on every grad-requiring node of this graph.

        Convenience for small graphs; the trainer uses `gradients`, which
        does not mutate shared state and is safe across threads.
        """
        grads = _accumulate(self)
        for node, g in grads.items():
            node.grad = g

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])


def parameter(data, name: str = "", dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=True, name=name)


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; parents expanded in tuple order so the ordering is a
    # pure function of graph structure.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _accumulate(loss: Tensor) -> dict:
    if loss.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                by_id[key] = p
    return {by_id[k]: v for k, v in grads.items()}


def gradients(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. `wrt`, without touching `.grad`.

    Returns zero arrays for parameters the loss does not depend on.
    """
    table = _accumulate(loss)
    return [table.get(p, np.zeros_like(p.data)) for p in wrt]


# -- broadcasting helpers -------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise ShapeError(f"dtype mismatch: {x.dtype} vs {like.dtype}")
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# -- arithmetic -----------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = a.data * b.data
    _add_macs(out.size)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return Tensor(out, (a, b), vjp)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = a.data / b.data
    _add_macs(out.size)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return Tensor(out, (a, b), vjp)


def powc(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    _add_macs(out.size)
    ad = a.data

    def vjp(g):
        return (g * exponent * ad ** (exponent - 1.0),)

    return Tensor(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """`a (..., m, k) @ b (k, n)` or general 2-D product."""
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data
    m, k = a.shape[-2] if a.ndim >= 2 else 1, a.shape[-1]
    batch = int(np.prod(a.shape[:-2], dtype=np.int64)) if a.ndim > 2 else 1
    _add_macs(batch * m * k * b.shape[1])
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, k).T @ g.reshape(-1, bd.shape[1])
        return ga.reshape(a.shape), gb

    return Tensor(out, (a, b), vjp)


# -- pointwise nonlinearities ----------------------------------------------


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return Tensor(out, (a,), vjp)


def tlog(a: Tensor) -> Tensor:
    out = np.log(a.data)
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return Tensor(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return Tensor(out, (a,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable in both tails: exp of a non-positive argument only.
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return Tensor(s, (a,), vjp)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s
    ad = a.data

    def vjp(g):
        return (g * s * (1.0 + ad * (1.0 - s)),)

    return Tensor(out, (a,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * d,)

    return Tensor(out, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)
    s = _sigmoid(a.data)

    def vjp(g):
        return (g * s,)

    return Tensor(out, (a,), vjp)


ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "exp": texp,
    "softplus": softplus,
    "silu": silu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "relu": relu,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch table for the pointwise ops the model uses."""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- reductions and shape ops ----------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, in_shape).copy(),)

    return Tensor(np.asarray(out), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    _add_macs(np.asarray(out).size)
    in_shape = a.shape
    n = a.size if axis is None else int(
        np.prod([a.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))])
    )

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, in_shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, in_shape).copy(),)

    return Tensor(np.asarray(out), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    in_shape = a.shape

    def vjp(g):
        return (g.reshape(in_shape),)

    return Tensor(out, (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    out = a.data.transpose(axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return Tensor(out, (a,), vjp)


def permute_tokens(a: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder axis 1 (sequence axis) by a bijective index array."""
    if a.ndim != 3:
        raise ShapeError(f"permute_tokens expects (B, L, D), got {a.shape}")
    if perm.shape[0] != a.shape[1]:
        raise ShapeError(f"permutation length {perm.shape[0]} != L {a.shape[1]}")
    out = a.data[:, perm, :]

    def vjp(g):
        ga = np.empty_like(g)
        ga[:, perm, :] = g
        return (ga,)

    return Tensor(out, (a,), vjp)


def take_labels(a: Tensor, labels: np.ndarray) -> Tensor:
    """Select one entry per row of a (B, K) tensor: out[i] = a[i, labels[i]]."""
    if a.ndim != 2:
        raise ShapeError(f"take_labels expects (B, K), got {a.shape}")
    idx = np.arange(a.shape[0])
    out = a.data[idx, labels]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[idx, labels] = g
        return (ga,)

    return Tensor(out, (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return Tensor(out, tuple(parts), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl]
    in_shape = a.shape

    def vjp(g):
        ga = np.zeros(in_shape, dtype=g.dtype)
        ga[sl] = g
        return (ga,)

    return Tensor(out, (a,), vjp)


# -- fused ops -------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis with learned scale/shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm params {gamma.shape} do not match channels {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    _add_macs(3 * out.size)
    n = x.shape[-1]

    def vjp(g):
        gy = g * gamma.data
        gxhat_mean = gy.mean(axis=-1, keepdims=True)
        gxhat_xhat_mean = (gy * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gy - gxhat_mean - xhat * gxhat_xhat_mean)
        ggamma = (g * xhat).reshape(-1, n).sum(axis=0)
        gbeta = g.reshape(-1, n).sum(axis=0)
        return gx.astype(x.dtype, copy=False), ggamma, gbeta

    return Tensor(out, (x, gamma, beta), vjp)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax of (B, K) logits, stable via max subtraction."""
    if a.ndim != 2:
        raise ShapeError(f"log_softmax expects (B, K), got {a.shape}")
    zmax = a.data.max(axis=1, keepdims=True)
    shifted = a.data - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return Tensor(out, (a,), vjp)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on (B, H, W, Cin) with kernel (kh, kw, Cin, Cout)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d shapes {x.shape} * {w.shape}")
    B, H, W, Cin = x.shape
    kh, kw, _, Cout = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((B, Ho, Wo, kh, kw, Cin), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + Ho * stride : stride, j : j + Wo * stride : stride, :]
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * Cin)
    wf = w.data.reshape(kh * kw * Cin, Cout)
    out = (cols2 @ wf).reshape(B, Ho, Wo, Cout) + b.data
    _add_macs(B * Ho * Wo * kh * kw * Cin * Cout)

    def vjp(g):
        gf = g.reshape(B * Ho * Wo, Cout)
        gw = (cols2.T @ gf).reshape(w.shape)
        gb = gf.sum(axis=0)
        gcols = (gf @ wf.T).reshape(B, Ho, Wo, kh, kw, Cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + Ho * stride : stride, j : j + Wo * stride : stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding : padding + H, padding : padding + W, :] if padding else gxp
        return gx, gw, gb

    return Tensor(out, (x, w, b), vjp)


def dwconv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise 1-D convolution over the sequence axis of (B, L, C).

    Kernel (C, k), same padding, non-causal: tap j sees offset j - k//2.
    """
    if x.ndim != 3 or w.ndim != 2 or w.shape[0] != x.shape[2]:
        raise ShapeError(f"dwconv1d shapes {x.shape} * {w.shape}")
    B, L, C = x.shape
    k = w.shape[1]
    half = k // 2
    xp = np.pad(x.data, ((0, 0), (half, k - 1 - half), (0, 0)))
    out = np.zeros((B, L, C), dtype=x.dtype)
    for j in range(k):
        out += xp[:, j : j + L, :] * w.data[:, j]
    out = out + b.data
    _add_macs(B * L * k * C)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for j in range(k):
            gxp[:, j : j + L, :] += g * w.data[:, j]
            gw[:, j] = (xp[:, j : j + L, :] * g).sum(axis=(0, 1))
        gb = g.sum(axis=(0, 1))
        return gxp[:, half : half + L, :], gw, gb

    return Tensor(out, (x, w, b), vjp)


# -- gradient checking ------------------------------------------------------


class GradCheckReport:
    """Per-parameter comparison of analytic gradients vs central differences.

    `rel_errors` maps parameter name to the max relative error over the
    sampled entries, where rel(a, n) = |a - n| / max(|a|, |n|, 1). `valid`
    is False when the objective evaluated non-finite at or around the point.
    """

    def __init__(self):
        self.rel_errors: dict[str, float] = {}
        self.valid = True

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors.values()) if self.rel_errors else 0.0

    def ok(self, tol: float) -> bool:
        return self.valid and self.max_rel_error < tol


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    eps: float = 1e-5,
    samples_per_param: int = 6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of scalar `f()` against central differences.

    Parameters are perturbed in place entry-by-entry; for large tensors a
    seeded sample of entries is checked. Run in float64.
    """
    params = list(params)
    report = GradCheckReport()
    loss = f()
    if not np.isfinite(loss.data).all():
        report.valid = False
        return report
    tensors = [p for _, p in params]
    analytic = gradients(loss, tensors)
    pick = np.random.Generator(np.random.Philox(key=seed))
    for (name, p), a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n_entries = flat.shape[0]
        if n_entries <= samples_per_param:
            idxs = np.arange(n_entries)
        else:
            idxs = pick.choice(n_entries, size=samples_per_param, replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                report.valid = False
                return report
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ana = float(a.reshape(-1)[i])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1.0)
            worst = max(worst, rel)
        report.rel_errors[name] = worst
    return report
