"""Compare parameter budgets of the attention variants.

Prints the per-block attention count at D=256 with 8 heads and the full
model totals for the reference configurations.

Run: python3 demos/parameter_budget.py
"""

from superkernel.attention import AttentionConfig, count_params
from superkernel.vit import REFERENCE_MODELS, REPORTED_TOTALS, count_model_params

standard = count_params(AttentionConfig(256, 8))
for variant in ("standard", "pseudo", "semi"):
    n = count_params(AttentionConfig(256, 8, variant))
    print(f"attention block {variant:8s} {n:>9,d}  ({n / standard:.3f} of standard)")

print()
for name, cfg in REFERENCE_MODELS.items():
    total = count_model_params(cfg).total
    print(f"model {name:10s} {total:>13,d}   reported {REPORTED_TOTALS[name]:>13,.0f}")
