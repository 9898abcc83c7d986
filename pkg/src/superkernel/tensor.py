"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a row-major numpy array. Operations executed while a
:class:`Tape` is active (``with Tape() as tape:``) and touching at least one
tensor with ``requires_grad=True`` are recorded on that tape; calling
``tape.backward(loss)`` replays the records in reverse and returns a mapping
from every trainable leaf to its gradient.

Outside a tape no graph is built, so inference costs only the numpy work.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

logger = logging.getLogger(__name__)

_state = threading.local()

DTYPES = {"f32": np.float32, "f64": np.float64}


class NonFiniteError(FloatingPointError):
    """A forward operation on finite inputs produced NaN or Inf."""


def _contig(arr) -> np.ndarray:
    # unlike np.ascontiguousarray, keeps 0-d arrays 0-d
    arr = np.asarray(arr)
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


def default_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype) -> None:
    _state.dtype = DTYPES.get(dtype, dtype)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type ("f32" / "f64")."""
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind in "biuf" and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        elif arr.dtype.kind == "f" and not isinstance(data, np.ndarray):
            arr = arr.astype(default_dtype())
        self.data = _contig(arr)
        self.requires_grad = requires_grad
        self.name = name
        self.grad_id: int | None = None

    # -- basic properties -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

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

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype or default_dtype())
    return Tensor(arr)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class _Record:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one single-writer graph."""

    def __init__(self):
        self.records: list[_Record] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        out.requires_grad = True
        out.grad_id = len(self.records)
        self.records.append(_Record(out, parents, backward))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``loss`` for every trainable leaf (or for ``wrt``)."""
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if loss.grad_id is None or loss.grad_id >= len(self.records) or self.records[loss.grad_id].out is not loss:
            raise ValueError("loss is detached from this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records[: loss.grad_id + 1]):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            parent_grads = rec.backward(g)
            for parent, pg in zip(rec.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent.grad_id is None:
                    leaves[key] = parent
                grads[key] = grads[key] + pg if key in grads else pg
        out = {leaves[k]: grads[k] for k in leaves}
        if wrt is not None:
            out = {t: out.get(t, np.zeros_like(t.data)) for t in wrt}
        return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# primitive plumbing
# ---------------------------------------------------------------------------


def _check_finite(out: np.ndarray, inputs: Sequence[Tensor], op: str) -> None:
    if out.dtype.kind != "f" or np.isfinite(out).all():
        return
    if all(np.isfinite(t.data).all() for t in inputs):
        raise NonFiniteError(f"{op} produced non-finite values from finite inputs")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    _check_finite(data, parents, op)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _promote(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    return a, b


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _promote(a, b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a, b = _promote(a, b)
    out = a.data * b.data
    return _make(
        out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul"
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _make((x * cdf).astype(x.dtype), (a,), lambda g: ((g * (cdf + x * pdf)).astype(x.dtype),), "gelu")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------------------
# shape / reduction
# ---------------------------------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(_contig(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(_contig(out), (a,), bw, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _make(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to"
    )


# ---------------------------------------------------------------------------
# contraction
# ---------------------------------------------------------------------------


def parse_spec(spec: str, a_ndim: int, b_ndim: int) -> tuple[str, str, str]:
    """Validate a two-operand index expression and return (ia, ib, out)."""
    spec = spec.replace(" ", "")
    if spec.count("->") > 1:
        raise ValueError(f"malformed contraction spec {spec!r}")
    lhs, arrow, out = spec.partition("->")
    terms = lhs.split(",")
    if len(terms) != 2:
        raise ValueError(f"contraction spec must have two operands: {spec!r}")
    ia, ib = terms
    for term in (ia, ib, out):
        if not all(c.isalpha() for c in term):
            raise ValueError(f"malformed contraction spec {spec!r}")
        if len(set(term)) != len(term):
            raise ValueError(f"repeated index within one term in {spec!r}")
    if not arrow:
        counts = {c: (ia + ib).count(c) for c in set(ia + ib)}
        out = "".join(sorted(c for c, n in counts.items() if n == 1))
    if len(ia) != a_ndim or len(ib) != b_ndim:
        raise ValueError(f"spec {spec!r} does not match operand ranks {a_ndim}, {b_ndim}")
    missing = set(out) - set(ia) - set(ib)
    if missing:
        raise ValueError(f"output indices {sorted(missing)} absent from inputs in {spec!r}")
    return ia, ib, out


def _einsum_grad(g: np.ndarray, gi: str, other: np.ndarray, oi: str, target: str, shape) -> np.ndarray:
    present = "".join(c for c in target if c in gi or c in oi)
    r = np.einsum(f"{gi},{oi}->{present}", g, other, optimize=True)
    if present != target:
        # indices summed away in only one operand: gradient is constant along them
        expand = [target.index(c) for c in target if c not in present]
        r = np.expand_dims(r, expand)
        r = np.broadcast_to(r, shape).copy()
    return r


def contract(a: Tensor, b: Tensor, spec: str) -> Tensor:
    """Two-operand Einstein contraction, e.g. ``contract(a, b, "bij,bjk->bik")``."""
    a, b = _promote(a, b)
    ia, ib, io = parse_spec(spec, a.ndim, b.ndim)
    extents: dict[str, int] = {}
    for term, arr in ((ia, a.data), (ib, b.data)):
        for c, n in zip(term, arr.shape):
            if extents.setdefault(c, n) != n:
                raise ValueError(f"extent mismatch on index {c!r}: {extents[c]} vs {n}")
    out = np.einsum(f"{ia},{ib}->{io}", a.data, b.data, optimize=True)

    def bw(g):
        return (
            _einsum_grad(g, io, b.data, ib, ia, a.shape) if a.requires_grad else None,
            _einsum_grad(g, io, a.data, ia, ib, b.shape) if b.requires_grad else None,
        )

    return _make(_contig(out), (a, b), bw, "contract")


def matmul(a, b) -> Tensor:
    """Batched matmul with numpy broadcasting on leading axes."""
    a, b = _promote(a, b)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; a slice that is entirely -inf becomes uniform."""
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    data = x.data
    m = np.max(data, axis=axis, keepdims=True)
    dead = np.isneginf(m)
    if dead.any():
        logger.warning("softmax: %d slice(s) entirely -inf, using uniform weights", int(dead.sum()))
        data = np.where(np.broadcast_to(dead, data.shape), 0.0, data)
        m = np.where(dead, 0.0, m)
    e = np.exp(data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ValueError(f"layer_norm parameter shape {p.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_data = gamma.data if gamma is not None else 1.0
    out = xhat * g_data + (beta.data if beta is not None else 0.0)
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def bw(g):
        gx_hat = g * g_data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        res = [gx]
        if gamma is not None:
            res.append((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None:
            res.append(g.reshape(-1, d).sum(axis=0))
        return tuple(res)

    return _make(out.astype(x.dtype), parents, bw, "layer_norm")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d_strided(inp: Tensor, filt: Tensor, stride: tuple[int, int]) -> Tensor:
    """Valid cross-correlation of (B,1,H,W) with (C,1,kh,kw); tiling must be exact."""
    inp, filt = _promote(inp, filt)
    if inp.ndim != 4 or inp.shape[1] != 1 or filt.ndim != 4 or filt.shape[1] != 1:
        raise ValueError(f"expected (B,1,H,W) input and (C,1,kh,kw) filter, got {inp.shape}, {filt.shape}")
    _, _, H, W = inp.shape
    _, _, kh, kw = filt.shape
    sh, sw = stride
    if kh > H or kw > W:
        raise ValueError(f"filter {kh}x{kw} larger than input {H}x{W}")
    if (H - kh) % sh or (W - kw) % sw:
        raise ValueError(f"stride {stride} does not tile input {H}x{W} with filter {kh}x{kw}")
    ho, wo = (H - kh) // sh + 1, (W - kw) // sw + 1
    x = inp.data[:, 0]
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    f = filt.data[:, 0]
    # accumulate taps in (u, v) order so the result matches a plain loop nest bit for bit
    out = np.zeros((x.shape[0], f.shape[0], ho, wo), dtype=np.result_type(x, f))
    for u in range(kh):
        for v in range(kw):
            out += x[:, None, u : u + sh * ho : sh, v : v + sw * wo : sw] * f[None, :, u, v, None, None]

    def bw(g):
        gf = np.einsum("bcij,bijuv->cuv", g, windows, optimize=True)[:, None] if filt.requires_grad else None
        gi = None
        if inp.requires_grad:
            gi = np.zeros_like(inp.data)
            for u in range(kh):
                for v in range(kw):
                    gi[:, 0, u : u + sh * ho : sh, v : v + sw * wo : sw] += np.einsum(
                        "bcij,c->bij", g, filt.data[:, 0, u, v]
                    )
        return gi, gf

    return _make(out, (inp, filt), bw, "conv2d_strided")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - as_tensor(target, pred.dtype)
    return mean(diff * diff)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (N,C) logits against integer labels."""
    labels = np.asarray(labels)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")
