"""
Switching components off
========================

Compare the full model with the plain regressor (no attention, no latent
branch, no reweighting, no curriculum) over a few seeds.
"""

import tempfile
from pathlib import Path

import numpy as np

from udaqa.data import SyntheticSpec, generate_synthetic, load_dataset, select_split
from udaqa.trainer import TrainConfig, evaluate, train

dest = Path(tempfile.mkdtemp()) / "dives"
generate_synthetic(SyntheticSpec(n_samples=300, seed=5), dest)
samples, manifest = load_dataset(dest)
tr, va, te = (select_split(samples, k) for k in ("train", "val", "test"))

variants = {
    "full": {},
    "no attention": {"wa": False},
    "no reweighting": {"reweight": False},
    "no curriculum": {"curriculum": False},
    "baseline": {"wa": False, "cvae": False, "reweight": False, "curriculum": False},
}
for name, switches in variants.items():
    rhos = []
    for seed in range(3):
        params = train(tr, va, manifest, TrainConfig(seed=seed, epochs=30, **switches)).params
        rhos.append(evaluate(te, manifest, params, t=7, seed=0).spearman)
    print(f"{name:<15} mean rho {np.mean(rhos):.4f}  per seed {np.round(rhos, 4)}")
