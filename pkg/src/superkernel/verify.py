"""Fixed-extent verification suites for the equivalences and counting rules.

Each suite returns a list of :class:`Check` records. A check with
``passed=None`` is informational: its value is reported but not judged.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .attention import (
    AttentionConfig,
    AttentionParams,
    count_params,
    pseudo_mhsa_forward,
    pseudo_to_standard_embed,
    standard_mhsa_forward,
    variance_probe,
)
from .kernels import KernelSpec, bspline_basis_all, bspline_degree0_from_steps
from .superposition import attention_as_superposition, conv_equivalence_check
from .tensor import Tensor, default_dtype
from .vit import REFERENCE_MODELS, REPORTED_TOTALS, count_model_params


@dataclass
class Check:
    name: str
    value: float
    threshold: str
    passed: bool | None
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _is_f64() -> bool:
    return default_dtype() == np.float64


def _scaled(rep) -> float:
    # absolute error in 64-bit; in 32-bit, relative to the magnitude of the result
    if _is_f64():
        return rep.max_abs_diff
    return rep.max_abs_diff / max(1.0, float(np.abs(rep.reference).max(initial=0.0)))


def _max_diff(rng: np.random.Generator, trials: int, draw: Callable[[np.random.Generator], float]) -> float:
    return max(draw(rng) for _ in range(trials))


def superposition_suite(seed: int = 0, trials: int = 100) -> list[Check]:
    """Attention written as an inner/outer kernel superposition, S, D, E <= 8."""
    tol = 1e-9 if _is_f64() else 1e-3

    def draw(rng):
        S, D, E = rng.integers(1, 9, size=3)
        X = rng.normal(size=(S, D))
        Wq, Wk = rng.normal(size=(D, E)), rng.normal(size=(D, E))
        Wv = rng.normal(size=(D, E))
        rep = attention_as_superposition(X, Wq, Wk, Wv, dense_outer=bool(rng.integers(2)))
        return _scaled(rep)

    t0 = time.perf_counter()
    worst = _max_diff(np.random.default_rng(seed), trials, draw)
    dt = time.perf_counter() - t0
    return [Check(f"attention_as_superposition[{trials}]", worst, f"<= {tol:g}", worst <= tol, dt)]


def conv_suite(seed: int = 0, trials: int = 50) -> list[Check]:
    """Attention scores as a strided convolution over the reshaped kernel tensor, S, D <= 6."""
    tol = 1e-9 if _is_f64() else 1e-3

    def draw(rng):
        S, D = rng.integers(1, 7, size=2)
        B = int(rng.integers(1, 3))
        rep = conv_equivalence_check(rng.normal(size=(B, S, D)), rng.normal(size=(D, D)))
        return _scaled(rep)

    t0 = time.perf_counter()
    worst = _max_diff(np.random.default_rng(seed), trials, draw)
    dt = time.perf_counter() - t0
    return [Check(f"conv_equivalence[{trials}]", worst, f"<= {tol:g}", worst <= tol, dt)]


def embed_suite(seed: int = 0, trials: int = 100) -> list[Check]:
    """Pseudo attention vs its standard-attention embedding at B=2, S=8, D=16, n=4."""
    tol = 1e-10 if _is_f64() else 1e-5
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(16, 4, "pseudo")
    out_diff = map_diff = 0.0
    t0 = time.perf_counter()
    for _ in range(trials):
        p = AttentionParams(cfg, rng)
        for _, t in p.named_parameters():
            t.data = rng.normal(0.0, 0.5, size=t.shape).astype(t.dtype)
        X = Tensor(rng.normal(size=(2, 8, 16)))
        a = pseudo_mhsa_forward(p, X, return_trace=True)
        b = standard_mhsa_forward(pseudo_to_standard_embed(p), X, return_trace=True)
        out_diff = max(out_diff, float(np.abs(a.output.data - b.output.data).max()))
        map_diff = max(map_diff, float(np.abs(a.maps.data - b.maps.data).max()))
    dt = time.perf_counter() - t0
    return [
        Check(f"embed_output[{trials}]", out_diff, f"<= {tol:g}", out_diff <= tol, dt),
        Check(f"embed_maps[{trials}]", map_diff, f"<= {tol:g}", map_diff <= tol, 0.0),
    ]


def variance_suite(seed: int = 0, trials: int = 100_000) -> list[Check]:
    checks = []
    for name, spec, d_head, lo, hi in (
        ("variance_linear_d8", KernelSpec.linear(), 8, 0.8, 1.25),
        ("variance_gaussian_d4", KernelSpec.gaussian(1.0), 4, 0.7, 1.4),
    ):
        t0 = time.perf_counter()
        rep = variance_probe(spec, d_head, 0.1, trials=trials, seed=seed)
        dt = time.perf_counter() - t0
        checks.append(Check(name, rep.ratio, f"in [{lo}, {hi}]", lo <= rep.ratio <= hi, dt))
    return checks


def params_suite(seed: int = 0) -> list[Check]:
    std = count_params(AttentionConfig(256, 8))
    pseudo = count_params(AttentionConfig(256, 8, "pseudo"))
    semi = count_params(AttentionConfig(256, 8, "semi"))
    checks = [
        Check("attn_block_standard", std, "== 263168", std == 263_168),
        Check("attn_block_pseudo", pseudo, "== 139776", pseudo == 139_776),
        Check("attn_block_semi", semi, "== 147968", semi == 147_968),
        Check("attn_ratio_pseudo_standard", pseudo / std, "in [0.52, 0.54]", 0.52 <= pseudo / std <= 0.54),
    ]
    totals = {k: count_model_params(cfg).total for k, cfg in REFERENCE_MODELS.items()}
    for name in ("standard", "pseudo", "semi"):
        rel = totals[name] / REPORTED_TOTALS[name] - 1.0
        checks.append(Check(f"model_total_{name}", totals[name], f"{REPORTED_TOTALS[name]} +/- 3%", abs(rel) <= 0.03))
    gap = totals["semi"] - totals["pseudo"]
    checks.append(Check("model_gap_semi_pseudo", gap, "== 49152", gap == 49_152))
    for name in ("gaussian", "linear_sim"):
        checks.append(Check(f"model_total_{name}", totals[name], f"reported {REPORTED_TOTALS[name]}", None))
    return checks


def bspline_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    knots = np.arange(-3.0, 11.0)
    worst = 0.0
    for degree in range(4):
        lo, hi = knots[degree], knots[-degree - 1]
        xs = rng.uniform(lo, hi, size=2000)
        worst = max(worst, float(np.abs(bspline_basis_all(knots, degree, xs).sum(axis=1) - 1.0).max()))
    grid = np.concatenate([np.linspace(-4.0, 12.0, 1601), knots])
    mismatches = 0
    table = bspline_basis_all(knots, 0, grid)
    for i in range(len(knots) - 1):
        mismatches += int(np.count_nonzero(bspline_degree0_from_steps(knots, i, grid) != table[:, i]))
    return [
        Check("partition_of_unity", worst, "<= 1e-12", worst <= 1e-12),
        Check("degree0_step_identity_mismatches", mismatches, "== 0", mismatches == 0),
    ]


SUITES: dict[str, Callable[..., list[Check]]] = {
    "superposition": superposition_suite,
    "conv": conv_suite,
    "embed": embed_suite,
    "variance": variance_suite,
    "params": params_suite,
    "bspline": bspline_suite,
}


def run_suites(names: list[str], seed: int = 0) -> dict[str, list[Check]]:
    if "all" in names:
        names = list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {sorted(SUITES) + ['all']}")
    return {n: SUITES[n](seed=seed) for n in names}


def all_passed(results: dict[str, list[Check]]) -> bool:
    return all(c.passed is not False for checks in results.values() for c in checks)
