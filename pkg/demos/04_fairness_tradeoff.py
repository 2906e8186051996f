"""
Fair representations by aligning protected groups
=================================================

Treat the protected attribute as the "domain" and align the two groups'
latent distributions. A downstream classifier trained on the latents then has
less information about group membership, which shrinks the demographic-parity
gap at some cost in accuracy. The weight ``beta`` trades reconstruction for
alignment: larger ``beta`` means stronger alignment.

A shortened version of ``dm fairness --config configs/fairness.ini``.
"""

from pathlib import Path
import tempfile

from scoredm.config import load_config
from scoredm.experiments import run_fairness

config = Path(__file__).resolve().parents[1] / "configs" / "fairness.ini"
cfg = load_config(config).with_overrides(experiment={"seeds": [0, 1]}, fairness={"betas": [0.1, 0.5, 1.0]},
                                         train={"steps": 600})

with tempfile.TemporaryDirectory() as out:
    result = run_fairness(cfg, Path(out))

print(f"{'method':8s} {'beta':>5s} {'accuracy':>9s} {'dp_gap':>7s}")
print(f"{'unfair':8s} {'-':>5s} {result.mean_accuracy('unfair'):9.3f} {result.mean_dp('unfair'):7.3f}")
for beta in cfg.section("fairness")["betas"]:
    print(f"{'aligned':8s} {beta:5.1f} {result.mean_accuracy('aligned', beta):9.3f} "
          f"{result.mean_dp('aligned', beta):7.3f}")
print(f"Spearman(beta, dp_gap) = {result.spearman[0.0]:.2f}")
