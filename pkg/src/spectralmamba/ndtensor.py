"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while any input requires a gradient are appended to the
calling thread's active :class:`DiffGraph`. :func:`backward` walks that tape
once, newest node first, then clears it. All ops accept optional leading
batch axes in front of the shapes documented on each function.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractError, DimensionError, NumericError, TargetIndexError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

SOFTPLUS_LINEAR_ABOVE = 30.0


class DiffTensor:
    """A float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_graph")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._graph: DiffGraph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffTensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents: tuple[DiffTensor, ...], backward_fn: BackwardFn):
        self.parents = parents
        self.backward_fn = backward_fn


class DiffGraph:
    """Append-only tape; node ids are insertion indices."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


_local = threading.local()


def active_graph() -> DiffGraph:
    graph = getattr(_local, "graph", None)
    if graph is None:
        graph = _local.graph = DiffGraph()
    return graph


def _recording() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording anything on the tape."""
    previous = _recording()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = previous


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value encountered in {where}")


def as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def record(out: np.ndarray, parents: Sequence[DiffTensor], backward_fn: BackwardFn,
           name: str = "op") -> DiffTensor:
    """Wrap ``out`` as the result of an op over ``parents``.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    (or None) per parent. Nothing is recorded unless a parent requires grad.
    """
    _check_finite(out, name)
    result = DiffTensor.__new__(DiffTensor)
    result.data = out
    result.grad = None
    result.node_id = None
    result._graph = None
    needs = _recording() and any(p.requires_grad for p in parents)
    result.requires_grad = needs
    if needs:
        graph = active_graph()
        result.node_id = len(graph.nodes)
        result._graph = graph
        graph.nodes.append(_Node(tuple(parents), backward_fn))
    return result


def backward(loss: DiffTensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.node_id is None:
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    graph = loss._graph
    if graph is None or loss.node_id >= len(graph.nodes):
        raise ContractError("loss does not belong to the active graph")

    grads: dict[int, np.ndarray] = {loss.node_id: seed}
    for node_id in range(loss.node_id, -1, -1):
        g = grads.pop(node_id, None)
        if g is None:
            continue
        node = graph.nodes[node_id]
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id is not None and parent._graph is graph:
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg
            else:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    graph.clear()
    if getattr(_local, "graph", None) is graph:
        _local.graph = None


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise plumbing


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot combine {a.shape} and {b.shape}") from exc
    return record(out, (a, b), lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)), "add")


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot combine {a.shape} and {b.shape}") from exc
    return record(out, (a, b),
                  lambda g: (_sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)), "mul")


def scale(x: DiffTensor, c: float) -> DiffTensor:
    return record(x.data * c, (x,), lambda g: (g * c,), "scale")


def tsum(x: DiffTensor) -> DiffTensor:
    return record(np.asarray(x.data.sum()), (x,),
                  lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def reshape(x: DiffTensor, shape: Sequence[int]) -> DiffTensor:
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take_last(x: DiffTensor, index: np.ndarray) -> DiffTensor:
    """Gather along the last axis: ``out[..., *idx] = x[..., index[*idx]]``."""
    index = np.asarray(index, dtype=np.intp)
    out = x.data[..., index]
    lead = x.shape[:-1]

    def _bw(g):
        gx = np.zeros(x.shape)
        flat = gx.reshape(-1, x.shape[-1])
        np.add.at(flat, (slice(None), index.ravel()), g.reshape(flat.shape[0], -1))
        return (gx,)

    return record(out, (x,), _bw, "take_last")


# ---------------------------------------------------------------------------
# network primitives


def linear(x: DiffTensor, w: DiffTensor, b: DiffTensor | None = None) -> DiffTensor:
    """``x[..., Din] @ w[Din, Dout] + b[Dout]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    # einsum keeps each row's reduction independent of how many rows there are
    # (BLAS does not), so a sequence split into chunks reproduces bit for bit
    out = np.einsum("...i,ij->...j", x.data, w.data)
    if b is not None:
        out = out + b.data

    def _bw(g):
        x2 = x.data.reshape(-1, w.shape[0])
        g2 = g.reshape(-1, w.shape[1])
        gb = g2.sum(axis=0) if b is not None else None
        return g @ w.data.T, x2.T @ g2, gb

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, _bw, "linear")


def depthwise_conv2d(x: DiffTensor, k: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Per-channel cross-correlation with zero same-padding.

    x: [..., Ch, H, W]; k: [Ch, Kh, Kw] with odd Kh, Kw; b: [Ch].
    """
    if k.ndim != 3 or k.shape[1] % 2 == 0 or k.shape[2] % 2 == 0:
        raise ConfigError(f"depthwise kernel must be [Ch, odd, odd], got {k.shape}")
    ch, kh, kw = k.shape
    if x.ndim < 3 or x.shape[-3] != ch or b.shape != (ch,):
        raise DimensionError(f"depthwise_conv2d: input {x.shape}, kernel {k.shape}, bias {b.shape}")
    h, w = x.shape[-2:]
    ph, pw = kh // 2, kw // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    xp = np.pad(x.data, pad)
    out = np.zeros(x.shape)
    for u in range(kh):
        for v in range(kw):
            out += k.data[:, u, v, None, None] * xp[..., u:u + h, v:v + w]
    out += b.data[:, None, None]

    def _bw(g):
        gxp = np.zeros(xp.shape)
        gk = np.zeros(k.shape)
        lead = tuple(range(g.ndim - 3))
        for u in range(kh):
            for v in range(kw):
                gxp[..., u:u + h, v:v + w] += k.data[:, u, v, None, None] * g
                gk[:, u, v] = (g * xp[..., u:u + h, v:v + w]).sum(axis=lead + (-2, -1))
        gb = g.sum(axis=lead + (-2, -1))
        return gxp[..., ph:ph + h, pw:pw + w], gk, gb

    return record(out, (x, k, b), _bw, "depthwise_conv2d")


def pointwise_conv2d(x: DiffTensor, w: DiffTensor, b: DiffTensor) -> DiffTensor:
    """1x1 convolution: x [..., Cin, H, W], w [Cin, Cout], b [Cout]."""
    if x.ndim < 3 or w.ndim != 2 or x.shape[-3] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"pointwise_conv2d: input {x.shape}, weight {w.shape}, bias {b.shape}")
    out = np.einsum("...chw,co->...ohw", x.data, w.data) + b.data[:, None, None]

    def _bw(g):
        gx = np.einsum("...ohw,co->...chw", g, w.data)
        gw = np.einsum("bchw,bohw->co", x.data.reshape(-1, *x.shape[-3:]), g.reshape(-1, *g.shape[-3:]))
        gb = g.reshape(-1, *g.shape[-3:]).sum(axis=(0, 2, 3))
        return gx, gw, gb

    return record(out, (x, w, b), _bw, "pointwise_conv2d")


def activation(x: DiffTensor, kind: str) -> DiffTensor:
    """Elementwise sigmoid, silu, softplus or exp."""
    z = x.data
    if kind == "sigmoid":
        s = expit(z)
        return record(s, (x,), lambda g: (g * s * (1.0 - s),), kind)
    if kind == "silu":
        s = expit(z)
        return record(z * s, (x,), lambda g: (g * (s + z * s * (1.0 - s)),), kind)
    if kind == "softplus":
        big = z > SOFTPLUS_LINEAR_ABOVE
        out = np.where(big, z, np.log1p(np.exp(np.minimum(z, SOFTPLUS_LINEAR_ABOVE))))
        return record(out, (x,), lambda g: (g * np.where(big, 1.0, expit(z)),), kind)
    if kind == "exp":
        with np.errstate(over="ignore"):
            e = np.exp(z)
        return record(e, (x,), lambda g: (g * e,), kind)
    raise ConfigError(f"unknown activation {kind!r}")


def layer_norm(x: DiffTensor, gamma: DiffTensor, beta: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: features {d}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    # second pass removes the rounding left in mu when |mean| >> spread
    xc = xc - xc.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def _bw(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return record(out, (x, gamma, beta), _bw, "layer_norm")


def softmax_cross_entropy(logits: DiffTensor, target: Sequence[int]) -> DiffTensor:
    """Mean negative log-likelihood of ``target`` under softmax(logits[B, K])."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [B, K] logits, got {logits.shape}")
    n, k = logits.shape
    t = np.asarray(target, dtype=np.intp).reshape(-1)
    if t.shape[0] != n:
        raise DimensionError(f"{t.shape[0]} targets for {n} rows of logits")
    bad = (t < 0) | (t >= k)
    if bad.any():
        raise TargetIndexError(f"target {int(t[bad][0])} outside [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(log_z - shifted[rows, t])

    def _bw(g):
        p = np.exp(shifted - log_z[:, None])
        p[rows, t] -= 1.0
        return (g * p / n,)

    return record(np.asarray(loss), (logits,), _bw, "softmax_cross_entropy")


def spatial_contract(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """``out[..., l] = sum_ij a[..., l, i, j] * b[..., l, i, j]``."""
    if a.shape != b.shape or a.ndim < 3:
        raise DimensionError(f"spatial_contract: shapes {a.shape} and {b.shape}")
    out = np.einsum("...ij,...ij->...", a.data, b.data)
    return record(out, (a, b),
                  lambda g: (g[..., None, None] * b.data, g[..., None, None] * a.data),
                  "spatial_contract")

