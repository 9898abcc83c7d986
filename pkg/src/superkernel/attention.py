"""Multi-head self-attention variants.

Five blocks share the same outer shape (B, S, D) -> (B, S, D):

- ``standard``: softmax(Q_i K_i^T * scale) V_i per head, concat, W^O.
- ``pseudo``: in-projection U, per-head score X~_i A_i X~_i^T, head = map X~_i,
  fused out-projection P. Obtained from standard attention by factoring
  W^q_i (W^k_i)^T ~ U_i A_i U_i^T.
- ``semi``: pseudo with the per-head value map W~^v_i and W^O kept separate.
- ``gaussian``: pseudo with A fixed to ones and a Gaussian kernel on coordinates.
- ``linear_sim``: the attention map is the inner superposition function with
  output width equal to the sequence length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import KernelSpec, kernel_apply, kernel_stats, kernel_values, layer_normalized
from .nn import Module, param, xavier, zeros
from .superposition import Reference, SuperpositionLayer, inner_apply
from .tensor import Tensor, as_tensor, concat, contract, softmax

VARIANTS = ("standard", "pseudo", "semi", "gaussian", "linear_sim")


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    variant: str = "standard"
    scaling: str | None = None  # "inv_dhead" | "inv_sqrt_dhead"; None -> variant default
    sigma: float = 1.0
    seq_len: int | None = None
    bias: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.scaling not in (None, "inv_dhead", "inv_sqrt_dhead"):
            raise ValueError(f"unknown scaling {self.scaling!r}")
        if self.variant == "gaussian" and not self.sigma > 0:
            raise ValueError("gaussian attention needs sigma > 0")
        if self.variant == "linear_sim" and not self.seq_len:
            raise ValueError("linear_sim attention needs seq_len")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def scale(self) -> float:
        scaling = self.scaling or ("inv_sqrt_dhead" if self.variant == "standard" else "inv_dhead")
        return 1.0 / self.d_head if scaling == "inv_dhead" else 1.0 / np.sqrt(self.d_head)


@dataclass
class AttentionTrace:
    output: Tensor
    maps: Tensor  # (B, n, S, S) after softmax
    scores: Tensor  # (B, n, S, S) before softmax, already scaled


class AttentionParams(Module):
    """Weight bundle for one attention block; which tensors exist depends on the variant."""

    def __init__(self, config: AttentionConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        D, n, dh = config.d_model, config.n_heads, config.d_head
        v = config.variant
        bias = (lambda: zeros(D)) if config.bias else (lambda: None)
        if v == "standard":
            self.Wq, self.Wk, self.Wv, self.Wo = (xavier(rng, D, D) for _ in range(4))
            self.bq, self.bk, self.bv, self.bo = bias(), bias(), bias(), bias()
            return
        self.U, self.b1 = xavier(rng, D, D), bias()
        if v in ("pseudo", "semi"):
            self.A = xavier(rng, dh, dh, shape=(n, dh, dh))
        if v == "semi":
            self.Wv_tilde = xavier(rng, dh, dh, shape=(n, dh, dh))
            self.Wo, self.bo = xavier(rng, D, D), bias()
        else:
            self.P, self.b2 = xavier(rng, D, D), bias()
        if v == "linear_sim":
            S = config.seq_len
            self.W_inner = param(rng.normal(0.0, 1.0 / (S * dh), size=(n, S, S, dh, dh)))

    def __call__(self, X, return_trace: bool = False):
        return attention_forward(self, X, return_trace)


def _bias(x: Tensor, b: Tensor | None) -> Tensor:
    return x if b is None else x + b


def _split_heads(x: Tensor, n: int) -> Tensor:
    B, S, D = x.shape
    return x.reshape(B, S, n, D // n).transpose(0, 2, 1, 3)  # (B, n, S, dh)


def _merge_heads(x: Tensor) -> Tensor:
    B, n, S, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, S, n * dh)


def _finish(scores: Tensor, values: Tensor, out_w: Tensor, out_b, return_trace: bool):
    maps = softmax(scores, axis=-1)
    heads = maps @ values
    out = _bias(_merge_heads(heads) @ out_w, out_b)
    return AttentionTrace(out, maps, scores) if return_trace else out


def _check(p: AttentionParams, X, variant: str) -> Tensor:
    if p.config.variant != variant:
        raise ValueError(f"params are for {p.config.variant!r}, not {variant!r}")
    X = as_tensor(X)
    if X.ndim != 3 or X.shape[2] != p.config.d_model:
        raise ValueError(f"expected (B, S, {p.config.d_model}) input, got {X.shape}")
    return X


def standard_mhsa_forward(p: AttentionParams, X, return_trace: bool = False):
    X = _check(p, X, "standard")
    n, scale = p.config.n_heads, p.config.scale
    Q = _split_heads(_bias(X @ p.Wq, p.bq), n)
    K = _split_heads(_bias(X @ p.Wk, p.bk), n)
    V = _split_heads(_bias(X @ p.Wv, p.bv), n)
    scores = (Q @ K.transpose(0, 1, 3, 2)) * scale
    return _finish(scores, V, p.Wo, p.bo, return_trace)


def _in_projection(p: AttentionParams, X: Tensor) -> Tensor:
    return _split_heads(_bias(X @ p.U, p.b1), p.config.n_heads)


def _bilinear_scores(Xt: Tensor, A: Tensor, scale: float) -> Tensor:
    # X~_i A_i X~_i^T for every head i at once
    XA = contract(Xt, A, "bnsi,nij->bnsj")
    return (XA @ Xt.transpose(0, 1, 3, 2)) * scale


def pseudo_mhsa_forward(p: AttentionParams, X, return_trace: bool = False):
    X = _check(p, X, "pseudo")
    Xt = _in_projection(p, X)
    scores = _bilinear_scores(Xt, p.A, p.config.scale)
    return _finish(scores, Xt, p.P, p.b2, return_trace)


def semi_fusion_forward(p: AttentionParams, X, return_trace: bool = False):
    X = _check(p, X, "semi")
    Xt = _in_projection(p, X)
    scores = _bilinear_scores(Xt, p.A, p.config.scale)
    values = contract(Xt, p.Wv_tilde, "bnsi,nij->bnsj")
    return _finish(scores, values, p.Wo, p.bo, return_trace)


def gaussian_scores(Xt: Tensor, sigma: float) -> Tensor:
    """score[s, r] = sum_{d1, d2} exp(-(x[s, d1] - x[r, d2])^2 / (2 sigma^2)) per head."""
    B, n, S, dh = Xt.shape
    K = kernel_apply(
        KernelSpec.gaussian(sigma),
        Xt.reshape(B, n, S, 1, dh, 1),
        Xt.reshape(B, n, 1, S, 1, dh),
    )
    return K.sum(axis=(4, 5))


def gaussian_mhsa_forward(p: AttentionParams, X, sigma: float | None = None, return_trace: bool = False):
    X = _check(p, X, "gaussian")
    Xt = _in_projection(p, X)
    sigma = p.config.sigma if sigma is None else sigma
    scores = gaussian_scores(Xt, sigma) * p.config.scale
    return _finish(scores, Xt, p.P, p.b2, return_trace)


def linear_sim_forward(p: AttentionParams, X, return_trace: bool = False):
    X = _check(p, X, "linear_sim")
    B, S, _ = X.shape
    if S != p.config.seq_len:
        raise ValueError(f"linear_sim block was built for seq_len={p.config.seq_len}, got {S}")
    n = p.config.n_heads
    Xt = _in_projection(p, X)
    per_head = []
    for i in range(n):
        Xi = Xt[:, i]
        layer = SuperpositionLayer(W_inner=p.W_inner[i], Ref_inner=Reference.SELF)
        per_head.append(inner_apply(layer, Xi, factored=True).reshape(B, 1, S, S))
    scores = concat(per_head, axis=1) * p.config.scale
    return _finish(scores, Xt, p.P, p.b2, return_trace)


_FORWARDS = {
    "standard": standard_mhsa_forward,
    "pseudo": pseudo_mhsa_forward,
    "semi": semi_fusion_forward,
    "gaussian": gaussian_mhsa_forward,
    "linear_sim": linear_sim_forward,
}


def attention_forward(p: AttentionParams, X, return_trace: bool = False):
    fn = _FORWARDS[p.config.variant]
    return fn(p, X, return_trace=return_trace)


# ---------------------------------------------------------------------------
# factorization and embedding
# ---------------------------------------------------------------------------


@dataclass
class LowRankFactors:
    U: np.ndarray  # (D, dh), orthonormal columns
    A: np.ndarray  # (dh, dh)
    residual: float


def _captured(W: np.ndarray, U: np.ndarray) -> float:
    return float(np.linalg.norm(U.T @ W @ U) ** 2)


def _refine_basis(W: np.ndarray, U: np.ndarray, iters: int = 500) -> np.ndarray:
    """Monotone Riemannian ascent of ||U^T W U||_F^2 over orthonormal U (QR retraction, Armijo steps)."""
    step = 1.0 / max(np.linalg.norm(W, 2), 1e-300)
    value = _captured(W, U)
    for _ in range(iters):
        A = U.T @ W @ U
        G = 2.0 * (W @ U @ A.T + W.T @ U @ A)
        G -= U @ (U.T @ G)
        gnorm2 = float(np.sum(G * G))
        if gnorm2 <= 1e-24 * max(value, 1e-300):
            break
        t = step
        while t > 1e-14:
            cand = np.linalg.qr(U + t * G)[0]
            cand_value = _captured(W, cand)
            if cand_value >= value + 1e-4 * t * gnorm2:
                break
            t *= 0.5
        else:
            break
        U, value, step = cand, cand_value, 2.0 * t
    return U


def low_rank_factorize(Wq_i, Wk_i, refine: bool = True) -> LowRankFactors:
    """Symmetric-form approximation W^q_i (W^k_i)^T ~ U A U^T.

    W_attn = W^q_i (W^k_i)^T. U starts from the top left singular vectors of
    W_attn and A = U^T W_attn U. Because the residual equals
    ||W||^2 - ||U^T W U||^2, the singular basis is optimal only for symmetric
    W_attn; with ``refine`` the basis is improved by monotone ascent on
    ||U^T W U||, started from both the left and right singular bases.
    ``residual`` is the relative Frobenius error.
    """
    Wq_i = np.asarray(getattr(Wq_i, "data", Wq_i), dtype=np.float64)
    Wk_i = np.asarray(getattr(Wk_i, "data", Wk_i), dtype=np.float64)
    D, dh = Wq_i.shape
    if Wk_i.shape != (D, dh) or dh > D:
        raise ValueError(f"expected two (D, dh) matrices with dh <= D, got {Wq_i.shape}, {Wk_i.shape}")
    W = Wq_i @ Wk_i.T
    norm = np.linalg.norm(W)
    if norm == 0.0:
        return LowRankFactors(np.eye(D, dh), np.zeros((dh, dh)), 0.0)
    left, _, right_t = np.linalg.svd(W)
    U = left[:, :dh]
    if refine:
        starts = (U, right_t[:dh].T)
        U = max((_refine_basis(W, u) for u in starts), key=lambda u: _captured(W, u))
    A = U.T @ W @ U
    residual = float(np.linalg.norm(W - U @ A @ U.T) / norm)
    return LowRankFactors(U, A, residual)


def pseudo_to_standard_embed(p: AttentionParams) -> AttentionParams:
    """Standard-attention weights whose forward pass equals the given pseudo block.

    Head i uses W^q_i = U_i A_i, W^k_i = W^v_i = U_i and W^O_i = P_i; the
    in-projection bias b1 is routed through the same maps. The result uses
    1/D_head scaling so the pre-softmax scores agree too.
    """
    cfg = p.config
    if cfg.variant != "pseudo":
        raise ValueError("expected pseudo attention params")
    n, dh, D = cfg.n_heads, cfg.d_head, cfg.d_model
    out = AttentionParams(
        AttentionConfig(D, n, "standard", scaling="inv_dhead", bias=cfg.bias), np.random.default_rng(0)
    )
    U = p.U.data.reshape(D, n, dh)
    Wq = np.einsum("dni,nij->dnj", U, p.A.data).reshape(D, D)
    out.Wq.data = Wq.astype(p.U.dtype)
    out.Wk.data = p.U.data.copy()
    out.Wv.data = p.U.data.copy()
    out.Wo.data = p.P.data.copy()
    if cfg.bias:
        b1 = p.b1.data.reshape(n, dh)
        out.bq.data = np.einsum("ni,nij->nj", b1, p.A.data).reshape(D).astype(p.U.dtype)
        out.bk.data = p.b1.data.copy()
        out.bv.data = p.b1.data.copy()
        out.bo.data = p.b2.data.copy()
    return out


# ---------------------------------------------------------------------------
# variance law
# ---------------------------------------------------------------------------


@dataclass
class VarianceReport:
    empirical_var: float
    predicted_var: float
    ratio: float
    mu_k: float
    var_k: float


def variance_probe(
    spec: KernelSpec, d_head: int, sigma_w: float, trials: int = 100_000, seed=0, chunk: int = 20_000
) -> VarianceReport:
    """Monte-Carlo check of Var(a_sr) = d_head^2 (var_k + mu_k^2) sigma_w^2.

    a_sr = sum_{d1,d2} k(x_s[d1], x_r[d2]) w[d1,d2] with x_s, x_r independent
    layer-normalized tokens and w iid zero-mean with variance sigma_w^2.
    """
    if trials < 10_000:
        raise ValueError(f"variance_probe needs at least 1e4 trials, got {trials}")
    rng = np.random.default_rng(seed)
    samples = []
    for start in range(0, trials, chunk):
        m = min(chunk, trials - start)
        xs = layer_normalized(rng, m, d_head)
        xr = layer_normalized(rng, m, d_head)
        K = kernel_values(spec, xs[:, :, None], xr[:, None, :])
        w = rng.normal(0.0, 1.0, size=(m, d_head, d_head)) * sigma_w
        samples.append((K * w).sum(axis=(1, 2)))
    a = np.concatenate(samples)
    empirical = float(a.var())
    stats = kernel_stats(spec, trials, rng_seed=int(rng.integers(2**32)), dim=d_head)
    predicted = d_head**2 * (stats.var + stats.mu**2) * sigma_w**2
    if predicted == 0.0:
        ratio = 1.0 if empirical == 0.0 else float("inf")
    else:
        ratio = empirical / predicted
    return VarianceReport(empirical, predicted, ratio, stats.mu, stats.var)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


def count_params(config: AttentionConfig) -> int:
    """Exact number of trainable scalars in one attention block."""
    D, n, dh = config.d_model, config.n_heads, config.d_head
    b = D if config.bias else 0
    v = config.variant
    if v == "standard":
        return 4 * D * D + 4 * b
    base = 2 * D * D + 2 * b  # in-projection U, out-projection (P or W^O)
    if v == "pseudo":
        return base + n * dh * dh
    if v == "semi":
        return base + 2 * n * dh * dh
    if v == "gaussian":
        return base
    return base + n * config.seq_len**2 * dh * dh
