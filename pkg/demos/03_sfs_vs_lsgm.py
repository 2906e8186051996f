"""
SFS vs. LSGM encoder gradients against a frozen score model
===========================================================

Both methods train the encoder against the same pretrained score network.
SFS uses the score at a single (lightly perturbed) point as a constant; the
LSGM-style estimator backpropagates a weighted denoising loss *through* the
score network over the whole noise range, which involves the network's input
Jacobian at very small noise levels.

We track the NLL of encoder samples under the true data mixture. This is a
shortened version of ``dm stability --config configs/stability.ini``.
"""

import numpy as np

from scoredm.data import gen_mog_target
from scoredm.networks import GaussianDecoder, GaussianEncoder, ScoreNetwork
from scoredm.objectives import LossConfig
from scoredm.trainer import DomainData, NoiseSchedule, TrainConfig, pretrain_score, stability_run

x, mixture = gen_mog_target(n=1000, seed=0)
data = DomainData([x])

sigma_min = 0.01
schedule = NoiseSchedule(sigma_min, 1.0, 10)
score = ScoreNetwork(2, [64, 64], np.random.default_rng(1))
score, final_dsm = pretrain_score(mixture, score, schedule, steps=1500, seed=0, batch_size=1024)
print(f"pretrained score model, final DSM loss {final_dsm:.4f}")

for mode in ("sfs", "lsgm"):
    rng = np.random.default_rng(0)
    enc = GaussianEncoder(2, 2, [64, 64], 1, rng)
    dec = GaussianDecoder(2, 2, [64, 64], 1, rng)
    cfg = TrainConfig(steps=400, batch_size=128, seed=0, loss=LossConfig(beta=0.1), schedule=schedule)
    trace = stability_run(data, enc, dec, mixture, score, mode, cfg)
    nll = trace.column("nll")
    print(f"{mode:5s}: NLL start {nll[0]:.3f}  max {np.max(nll):.3f}  final {nll[-1]:.3f}")
