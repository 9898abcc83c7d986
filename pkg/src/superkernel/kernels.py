"""Scalar kernels, B-spline bases and the kernel tensor K(X, Ref).

The kernel tensor pairs every input coordinate with every reference
coordinate::

    K[b, s, r, d1, d2] = k(X[b, s, d1], Ref[b, r, d2])

Its size is B*S*R*D*D, which explodes quickly (B=100, S=64, D=256 in float32
is ~107 GB), so materialization is guarded by a byte budget and a streamed,
tile-by-tile mode is available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .tensor import Tensor, as_tensor, exp, mul

DEFAULT_BUDGET_BYTES = 2 * 1024**3


@dataclass(frozen=True)
class KernelSpec:
    """Choice of scalar kernel k(x, y).

    ``kind`` is one of ``"linear"``, ``"gaussian"`` (uses ``sigma``) or
    ``"bspline"`` (uses ``knots`` and ``degree``).
    """

    kind: str = "linear"
    sigma: float = 1.0
    knots: tuple[float, ...] = field(default=())
    degree: int = 3

    def __post_init__(self):
        if self.kind not in ("linear", "gaussian", "bspline"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ValueError(f"gaussian kernel needs sigma > 0, got {self.sigma}")
        if self.kind == "bspline":
            object.__setattr__(self, "knots", tuple(float(t) for t in self.knots))
            if self.degree < 0:
                raise ValueError("bspline degree must be nonnegative")
            if len(self.knots) < self.degree + 2:
                raise ValueError(f"bspline of degree {self.degree} needs at least {self.degree + 2} knots")
            if any(b < a for a, b in zip(self.knots, self.knots[1:])):
                raise ValueError("bspline knots must be nondecreasing")

    @classmethod
    def linear(cls) -> "KernelSpec":
        return cls("linear")

    @classmethod
    def gaussian(cls, sigma: float = 1.0) -> "KernelSpec":
        return cls("gaussian", sigma=sigma)

    @classmethod
    def bspline(cls, knots, degree: int = 3) -> "KernelSpec":
        return cls("bspline", knots=tuple(knots), degree=degree)

    @property
    def n_basis(self) -> int:
        return len(self.knots) - self.degree - 1


# ---------------------------------------------------------------------------
# B-splines
# ---------------------------------------------------------------------------


def bspline_basis(knots, degree: int, i: int, x: float) -> float:
    """Value of the i-th degree-``degree`` B-spline at ``x`` (Cox-de Boor).

    Supported on the half-open interval ``[knots[i], knots[i+degree+1])``.
    """
    knots = tuple(knots)
    if not 0 <= i < len(knots) - degree - 1:
        raise IndexError(f"basis index {i} out of range for {len(knots)} knots at degree {degree}")
    if degree == 0:
        return 1.0 if knots[i] <= x < knots[i + 1] else 0.0
    left = right = 0.0
    den = knots[i + degree] - knots[i]
    if den > 0:
        left = (x - knots[i]) / den * bspline_basis(knots, degree - 1, i, x)
    den = knots[i + degree + 1] - knots[i + 1]
    if den > 0:
        right = (knots[i + degree + 1] - x) / den * bspline_basis(knots, degree - 1, i + 1, x)
    return left + right


def bspline_basis_all(knots, degree: int, x) -> np.ndarray:
    """All basis functions at once: returns shape ``x.shape + (n_basis,)``."""
    t = np.asarray(knots, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)[..., None]
    B = ((x >= t[:-1]) & (x < t[1:])).astype(np.float64)
    for k in range(1, degree + 1):
        lo_den = t[k:-1] - t[: -k - 1]
        hi_den = t[k + 1 :] - t[1:-k]
        with np.errstate(divide="ignore", invalid="ignore"):
            lo = np.where(lo_den > 0, (x - t[: -k - 1]) / lo_den, 0.0)
            hi = np.where(hi_den > 0, (t[k + 1 :] - x) / hi_den, 0.0)
        B = lo * B[..., :-1] + hi * B[..., 1:]
    return B


def step(x) -> np.ndarray:
    """Right-continuous Heaviside step, step(0) = 1."""
    return (np.asarray(x) >= 0).astype(np.float64)


def bspline_degree0_from_steps(knots, i: int, x) -> np.ndarray:
    """Degree-0 basis as a difference of two translated steps."""
    return step(np.asarray(x) - knots[i]) - step(np.asarray(x) - knots[i + 1])


# ---------------------------------------------------------------------------
# scalar kernels
# ---------------------------------------------------------------------------


def kernel_values(spec: KernelSpec, x, y) -> np.ndarray:
    """Broadcasting numpy evaluation of k(x, y)."""
    x = np.asarray(x)
    y = np.asarray(y)
    if spec.kind == "linear":
        return x * y
    if spec.kind == "gaussian":
        d = x - y
        return np.exp(-(d * d) / (2.0 * spec.sigma**2))
    bx = bspline_basis_all(spec.knots, spec.degree, x)
    by = bspline_basis_all(spec.knots, spec.degree, y)
    return (bx * by).sum(axis=-1)


def kernel_eval(spec: KernelSpec, x: float, y: float) -> float:
    return float(kernel_values(spec, float(x), float(y)))


def kernel_apply(spec: KernelSpec, x: Tensor, y: Tensor) -> Tensor:
    """Differentiable broadcasting k(x, y) on tensors.

    B-spline kernels are evaluated as constants (no gradient is recorded).
    """
    if spec.kind == "linear":
        return mul(x, y)
    if spec.kind == "gaussian":
        d = x - y
        return exp(d * d * (-1.0 / (2.0 * spec.sigma**2)))
    return Tensor(kernel_values(spec, x.data, y.data).astype(x.dtype))


# ---------------------------------------------------------------------------
# kernel tensor
# ---------------------------------------------------------------------------


class KernelBudgetError(MemoryError):
    def __init__(self, estimate_bytes: int, budget_bytes: int, shape):
        self.estimate_bytes = estimate_bytes
        self.budget_bytes = budget_bytes
        self.shape = tuple(shape)
        super().__init__(
            f"kernel tensor {self.shape} needs {estimate_bytes} bytes, over the budget of {budget_bytes} bytes"
        )


@dataclass(frozen=True)
class KernelTensorPlan:
    block_rows: int = 16
    block_refs: int = 16
    materialize: bool = True

    def __post_init__(self):
        if self.block_rows < 1 or self.block_refs < 1:
            raise ValueError("tile extents must be >= 1")


class Tile(NamedTuple):
    rows: slice
    refs: slice
    values: Tensor  # (B, rows, refs, D, D')


def kernel_tensor_bytes(X_shape, Ref_shape, itemsize: int = 4) -> int:
    B, S, D = X_shape
    _, R, D2 = Ref_shape
    return B * S * R * D * D2 * itemsize


def _check_pair(X: Tensor, Ref: Tensor) -> None:
    if X.ndim != 3 or Ref.ndim != 3:
        raise ValueError(f"expected (B,S,D) and (B,R,D) arrays, got {X.shape} and {Ref.shape}")
    if X.shape[0] != Ref.shape[0]:
        raise ValueError(f"batch extents differ: {X.shape[0]} vs {Ref.shape[0]}")


def _block(spec: KernelSpec, X: Tensor, Ref: Tensor) -> Tensor:
    B, S, D = X.shape
    R, D2 = Ref.shape[1], Ref.shape[2]
    return kernel_apply(spec, X.reshape(B, S, 1, D, 1), Ref.reshape(B, 1, R, 1, D2))


def iter_kernel_tiles(X: Tensor, Ref: Tensor, spec: KernelSpec, plan: KernelTensorPlan) -> Iterator[Tile]:
    """Yield kernel-tensor tiles in (row-block, ref-block) order."""
    X, Ref = as_tensor(X), as_tensor(Ref)
    _check_pair(X, Ref)
    S, R = X.shape[1], Ref.shape[1]
    for s0 in range(0, S, plan.block_rows):
        rows = slice(s0, min(S, s0 + plan.block_rows))
        for r0 in range(0, R, plan.block_refs):
            refs = slice(r0, min(R, r0 + plan.block_refs))
            yield Tile(rows, refs, _block(spec, X[:, rows], Ref[:, refs]))


def kernel_tensor(
    X,
    Ref,
    spec: KernelSpec,
    plan: KernelTensorPlan | None = None,
    budget_bytes: int = DEFAULT_BUDGET_BYTES,
):
    """Build K(X, Ref) of shape (B,S,R,D,D), or an iterator of tiles when streaming.

    Raises :class:`KernelBudgetError` before allocating if the materialized
    tensor would exceed ``budget_bytes``.
    """
    plan = plan or KernelTensorPlan()
    X, Ref = as_tensor(X), as_tensor(Ref)
    _check_pair(X, Ref)
    if not plan.materialize:
        return iter_kernel_tiles(X, Ref, spec, plan)
    need = kernel_tensor_bytes(X.shape, Ref.shape, X.dtype.itemsize)
    if need > budget_bytes:
        raise KernelBudgetError(need, budget_bytes, (*X.shape[:2], Ref.shape[1], X.shape[2], Ref.shape[2]))
    return _block(spec, X, Ref)


# ---------------------------------------------------------------------------
# kernel statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelStats:
    mu: float
    var: float
    mu_se: float
    var_se: float
    trials: int


def layer_normalized(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    v -= v.mean(axis=1, keepdims=True)
    v /= v.std(axis=1, keepdims=True)
    return v


def sample_coordinate_pairs(rng: np.random.Generator, trials: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates of two independent layer-normalized random vectors."""
    a = layer_normalized(rng, trials, dim)
    b = layer_normalized(rng, trials, dim)
    i = rng.integers(dim, size=trials)
    j = rng.integers(dim, size=trials)
    return a[np.arange(trials), i], b[np.arange(trials), j]


def kernel_stats(spec: KernelSpec, trials: int = 100_000, rng_seed=0, dim: int = 64) -> KernelStats:
    """Monte-Carlo mean and variance of k(x, y) under layer-normalized inputs."""
    if trials < 10_000:
        raise ValueError(f"kernel_stats needs at least 1e4 trials, got {trials}")
    rng = np.random.default_rng(rng_seed)
    x, y = sample_coordinate_pairs(rng, trials, dim)
    k = kernel_values(spec, x, y)
    mu = float(k.mean())
    c = k - mu
    var = float((c * c).mean())
    m4 = float((c**4).mean())
    return KernelStats(
        mu=mu,
        var=var,
        mu_se=math.sqrt(var / trials),
        var_se=math.sqrt(max(m4 - var * var, 0.0) / trials),
        trials=trials,
    )
