"""Inner/outer kernel-superposition layers.

A function f: R^{B x S x D} -> R^{B x S x E} is written as f = outer(inner(X))
with both stages being contractions of a kernel tensor against weights::

    inner(X)[b,s,h]   = K(X, Ref_in)[b,s,r,d1,d2]   * W_in[h,r,d1,d2]
    outer(Z)[b,s,e]   = K(Z, Ref_out)[b,s,r,h1,h2]  * W_out[e,r,h1,h2]

References may be fixed tensors or resolved from the input at call time
(``Reference.SELF`` uses the stage input, ``Reference.INPUT_T`` uses the
layer input with token and feature axes swapped).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    DEFAULT_BUDGET_BYTES,
    KernelSpec,
    KernelTensorPlan,
    kernel_tensor,
    kernel_values,
)
from .tensor import Tensor, as_tensor, concat, conv2d_strided, contract


class Reference(enum.Enum):
    SELF = "self"
    INPUT_T = "input_transposed"


@dataclass
class ScaledIdentity:
    """Outer weights of the form W[e, r] = w[e, r] * I_H, with H taken from the input.

    Only the (E, R') scalar field is stored, so the layer does not depend on
    the sequence length.
    """

    w: Tensor  # (E, R')

    def expand(self, h: int) -> Tensor:
        eye = np.eye(h, dtype=self.w.dtype)
        return Tensor(self.w.data[:, :, None, None] * eye)


@dataclass
class SuperpositionLayer:
    W_inner: Tensor  # (H, R, D, D)
    W_outer: Tensor | ScaledIdentity | None = None  # (E, R', H, H)
    Ref_inner: Tensor | Reference = Reference.SELF  # (B, R, D)
    Ref_outer: Tensor | Reference = Reference.SELF  # (B, R', H)
    inner_spec: KernelSpec = field(default_factory=KernelSpec.linear)
    outer_spec: KernelSpec = field(default_factory=KernelSpec.linear)

    def __call__(self, X, plan: KernelTensorPlan | None = None, budget_bytes: int = DEFAULT_BUDGET_BYTES) -> Tensor:
        Z = inner_apply(self, X, plan, budget_bytes)
        return outer_apply(self, Z, X, plan, budget_bytes)


def _resolve(ref, stage_input: Tensor, layer_input: Tensor | None) -> Tensor:
    if ref is Reference.SELF:
        return stage_input
    if ref is Reference.INPUT_T:
        if layer_input is None:
            raise ValueError("INPUT_T reference needs the layer input")
        return layer_input.transpose(0, 2, 1)
    return as_tensor(ref)


def _superpose(
    X: Tensor,
    Ref: Tensor,
    W: Tensor,
    spec: KernelSpec,
    plan: KernelTensorPlan | None,
    budget_bytes: int,
    factored: bool,
) -> Tensor:
    if X.ndim != 3 or Ref.ndim != 3 or W.ndim != 4:
        raise ValueError(f"bad ranks: X{X.shape} Ref{Ref.shape} W{W.shape}")
    _, R, D2 = Ref.shape
    if W.shape[1] != R or W.shape[2] != X.shape[2] or W.shape[3] != D2:
        raise ValueError(f"weights {W.shape} inconsistent with input {X.shape} and reference {Ref.shape}")
    if factored:
        if spec.kind != "linear":
            raise ValueError("factored evaluation is only exact for the linear kernel")
        # sum_{r,d1,d2} x[s,d1] ref[r,d2] W[h,r,d1,d2] without forming K
        T = contract(Ref, W, "brj,hrij->bhi")
        return contract(X, T, "bsi,bhi->bsh")
    plan = plan or KernelTensorPlan()
    if plan.materialize:
        K = kernel_tensor(X, Ref, spec, plan, budget_bytes)
        return contract(K, W, "bsrij,hrij->bsh")
    rows: dict[int, Tensor] = {}
    order: list[int] = []
    for tile in kernel_tensor(X, Ref, spec, plan, budget_bytes):
        part = contract(tile.values, W[:, tile.refs], "bsrij,hrij->bsh")
        key = tile.rows.start
        if key in rows:
            rows[key] = rows[key] + part
        else:
            rows[key] = part
            order.append(key)
    return concat([rows[k] for k in sorted(order)], axis=1)


def inner_apply(
    layer: SuperpositionLayer,
    X,
    plan: KernelTensorPlan | None = None,
    budget_bytes: int = DEFAULT_BUDGET_BYTES,
    factored: bool = False,
) -> Tensor:
    """inner(X)[b,s,h] = sum_{r,d1,d2} k(X[b,s,d1], Ref[b,r,d2]) W_inner[h,r,d1,d2]."""
    X = as_tensor(X)
    Ref = _resolve(layer.Ref_inner, X, X)
    return _superpose(X, Ref, layer.W_inner, layer.inner_spec, plan, budget_bytes, factored)


def outer_apply(
    layer: SuperpositionLayer,
    Z,
    X=None,
    plan: KernelTensorPlan | None = None,
    budget_bytes: int = DEFAULT_BUDGET_BYTES,
    factored: bool = False,
) -> Tensor:
    """outer(Z)[b,s,e] = sum_{r,h1,h2} k(Z[b,s,h1], Ref[b,r,h2]) W_outer[e,r,h1,h2].

    ``X`` is the layer input, needed only when ``Ref_outer`` is ``INPUT_T``.
    """
    Z = as_tensor(Z)
    Ref = _resolve(layer.Ref_outer, Z, None if X is None else as_tensor(X))
    W = layer.W_outer
    if W is None:
        raise ValueError("layer has no outer weights")
    if isinstance(W, ScaledIdentity):
        if Ref.shape[2] != Z.shape[2]:
            raise ValueError(f"reference width {Ref.shape[2]} != input width {Z.shape[2]}")
        if layer.outer_spec.kind == "linear":
            # identity diagonal: sum_{r,h} z[s,h] ref[r,h] w[e,r]
            G = contract(Z, Ref, "bsh,brh->bsr")
            return contract(G, W.w, "bsr,er->bse")
        W = W.expand(Z.shape[2])
    return _superpose(Z, Ref, W, layer.outer_spec, plan, budget_bytes, factored)


def frobenius_fit(W, S_ref, spec: KernelSpec, x) -> float:
    """g(x) = sum_r <W_r, K(x, s_r)>_F with K(x, s_r)[d, d'] = k(x_d, s_{r,d'})."""
    W = np.asarray(W.data if isinstance(W, Tensor) else W, dtype=np.float64)
    S_ref = np.asarray(S_ref.data if isinstance(S_ref, Tensor) else S_ref, dtype=np.float64)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    R, D, D2 = W.shape
    if S_ref.shape != (R, D2) or x.shape != (D,):
        raise ValueError(f"inconsistent extents W{W.shape} S{S_ref.shape} x{x.shape}")
    K = kernel_values(spec, x[None, :, None], S_ref[:, None, :])  # (R, D, D')
    return float((W * K).sum())


# ---------------------------------------------------------------------------
# equivalence checks
# ---------------------------------------------------------------------------


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    reference: np.ndarray
    candidate: np.ndarray

    @property
    def scale(self) -> float:
        return float(np.abs(self.reference).max(initial=0.0))


def self_attention_layer(X, Wq, Wk, Wv) -> SuperpositionLayer:
    """Superposition weights reproducing X Wq Wk^T X^T X Wv (softmax omitted).

    Inner: linear kernel, Ref = X, W[h, r] = delta_{hr} Wq Wk^T (H = R = S).
    Outer: linear kernel, Ref = X^T, W'[e, r'] = Wv[r', e] * I_S (R' = D).
    """
    X = as_tensor(X)
    S = X.shape[-2]
    W_attn = as_tensor(Wq).data @ as_tensor(Wk).data.T
    W_inner = np.zeros((S, S) + W_attn.shape, dtype=W_attn.dtype)
    W_inner[np.arange(S), np.arange(S)] = W_attn
    return SuperpositionLayer(
        W_inner=Tensor(W_inner),
        W_outer=ScaledIdentity(Tensor(np.ascontiguousarray(as_tensor(Wv).data.T))),
        Ref_inner=Reference.SELF,
        Ref_outer=Reference.INPUT_T,
    )


def attention_as_superposition(X, Wq, Wk, Wv, dense_outer: bool = True) -> EquivalenceReport:
    """Compare X Wq Wk^T X^T X Wv against the inner/outer superposition route.

    ``dense_outer`` expands the scaled-identity outer weights into the full
    (E, D, S, S) tensor and goes through the kernel tensor, rather than the
    shortcut that never forms the identity.
    """
    X, Wq, Wk, Wv = (as_tensor(t) for t in (X, Wq, Wk, Wv))
    if X.ndim != 2:
        raise ValueError(f"expected a single (S, D) sequence, got {X.shape}")
    D = X.shape[1]
    if Wq.shape[0] != D or Wk.shape[0] != D or Wv.shape[0] != D or Wq.shape != Wk.shape:
        raise ValueError(f"extent mismatch: X{X.shape} Wq{Wq.shape} Wk{Wk.shape} Wv{Wv.shape}")
    x = X.data
    direct = x @ Wq.data @ Wk.data.T @ x.T @ x @ Wv.data
    layer = self_attention_layer(X, Wq, Wk, Wv)
    Xb = X.reshape(1, *X.shape)
    Z = inner_apply(layer, Xb)
    if dense_outer:
        layer = SuperpositionLayer(
            W_inner=layer.W_inner,
            W_outer=layer.W_outer.expand(Z.shape[2]),
            Ref_inner=layer.Ref_inner,
            Ref_outer=layer.Ref_outer,
        )
    Y = outer_apply(layer, Z, Xb).data[0]
    return EquivalenceReport(float(np.abs(Y - direct).max(initial=0.0)), direct, Y)


def conv_equivalence_check(X, W_attn, budget_bytes: int = DEFAULT_BUDGET_BYTES) -> EquivalenceReport:
    """Inner attention scores as a (D, D)-strided convolution over the reshaped kernel tensor."""
    X, W_attn = as_tensor(X), as_tensor(W_attn)
    B, S, D = X.shape
    if W_attn.shape != (D, D):
        raise ValueError(f"W_attn must be ({D}, {D}), got {W_attn.shape}")
    K = kernel_tensor(X, X, KernelSpec.linear(), budget_bytes=budget_bytes)  # (B,S,R,D,D)
    K_star = K.data.transpose(0, 1, 3, 2, 4).reshape(B, 1, S * D, S * D)
    conv = conv2d_strided(Tensor(K_star), W_attn.reshape(1, 1, D, D), (D, D)).data[:, 0]  # (B,S,R)
    W_inner = np.zeros((S, S, D, D), dtype=W_attn.dtype)
    W_inner[np.arange(S), np.arange(S)] = W_attn.data
    layer = SuperpositionLayer(W_inner=Tensor(W_inner), Ref_inner=Reference.SELF)
    psi = inner_apply(layer, X, budget_bytes=budget_bytes).data
    return EquivalenceReport(float(np.abs(conv - psi).max(initial=0.0)), psi, conv)
