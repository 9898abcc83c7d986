"""Walk through the algebraic identities behind pseudo attention.

1. Unnormalized attention is an inner/outer kernel superposition.
2. Attention scores are a strided convolution over the kernel tensor.
3. A pseudo-attention layer embeds exactly into standard attention.
4. A per-head query/key product can be compressed to a symmetric low-rank form.

Run: python3 demos/equivalences.py
"""

import numpy as np

from superkernel.attention import (
    AttentionConfig,
    AttentionParams,
    low_rank_factorize,
    pseudo_mhsa_forward,
    pseudo_to_standard_embed,
    standard_mhsa_forward,
)
from superkernel.superposition import attention_as_superposition, conv_equivalence_check
from superkernel.tensor import Tensor, precision

rng = np.random.default_rng(0)

with precision("f64"):
    X = rng.normal(size=(5, 6))
    Wq, Wk, Wv = (rng.normal(size=(6, 4)) for _ in range(3))
    rep = attention_as_superposition(X, Wq, Wk, Wv)
    print(f"superposition vs (XWq)(XWk)^T(XWv): max diff {rep.max_abs_diff:.1e}")

    rep = conv_equivalence_check(rng.normal(size=(2, 5, 4)), rng.normal(size=(4, 4)))
    print(f"strided conv vs bilinear scores:     max diff {rep.max_abs_diff:.1e}")

    p = AttentionParams(AttentionConfig(16, 4, "pseudo"), rng)
    Xb = Tensor(rng.normal(size=(2, 8, 16)))
    a = pseudo_mhsa_forward(p, Xb, return_trace=True)
    b = standard_mhsa_forward(pseudo_to_standard_embed(p), Xb, return_trace=True)
    print(f"pseudo vs embedded standard:         output diff {np.abs(a.output.data - b.output.data).max():.1e}, "
          f"map diff {np.abs(a.maps.data - b.maps.data).max():.1e}")

# a rank-deficient symmetric product is recovered exactly; a generic one is approximated
M = rng.normal(size=(8, 2))
exact = low_rank_factorize(M, M)
generic_q, generic_k = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
plain = low_rank_factorize(generic_q, generic_k, refine=False)
refined = low_rank_factorize(generic_q, generic_k)
print(f"low-rank residual: symmetric PSD {exact.residual:.1e}; generic {plain.residual:.3f} "
      f"(singular basis) -> {refined.residual:.3f} (refined)")
