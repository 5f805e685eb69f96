"""
Several scores per dive
=======================

Draw t latent samples per test video from the prior and look at how far the
sampled scores spread, next to the model's log-uncertainty and each sample's
injected ambiguity.
"""

import tempfile
from pathlib import Path

import numpy as np

from udaqa.data import SyntheticSpec, generate_synthetic, load_dataset, select_split
from udaqa.metrics import spearman
from udaqa.trainer import TrainConfig, evaluate, train

dest = Path(tempfile.mkdtemp()) / "dives"
generate_synthetic(SyntheticSpec(n_samples=300, seed=4), dest)
samples, manifest = load_dataset(dest)
tr, va, te = (select_split(samples, k) for k in ("train", "val", "test"))
params = train(tr, va, manifest, TrainConfig(epochs=30)).params

ev = evaluate(te, manifest, params, t=7, seed=0)
for p, s in list(zip(ev.predictions, te))[:5]:
    print(f"{p.sample_id}  label {s.final_score:6.2f}  point {p.deterministic_score:6.2f}  "
          f"samples {np.round(p.sampled_scores, 2)}  u {p.log_uncertainty:.3f}")

amb = [s.meta["ambiguity"] for s in te]
std = [p.sample_std for p in ev.predictions]
u = [p.log_uncertainty for p in ev.predictions]
print(f"spearman(ambiguity, sample std) {spearman(amb, std):.3f}")
print(f"spearman(ambiguity, u) {spearman(amb, u):.3f}")
