"""
Training with the uncertainty curriculum
========================================

Train the full model on a small synthetic set, watch the curriculum grow the
active subset, then score the held-out split.
"""

import tempfile
from pathlib import Path

from udaqa.data import SyntheticSpec, generate_synthetic, load_dataset, select_split
from udaqa.trainer import TrainConfig, evaluate, train

dest = Path(tempfile.mkdtemp()) / "dives"
generate_synthetic(SyntheticSpec(n_samples=300, seed=2), dest)
samples, manifest = load_dataset(dest)
tr, va, te = (select_split(samples, k) for k in ("train", "val", "test"))

result = train(tr, va, manifest, TrainConfig(epochs=30))

print("epoch  phase    active  loss     val rho")
for r in result.log:
    print(f"{r['epoch']:5d}  {r['phase']:<7}  {r['active_size']:6d}  {r['loss_total']:.4f}  {r['val_spearman']:.4f}")
print("best epoch", result.best_epoch)

ev = evaluate(te, manifest, result.params, t=7, seed=0)
print(f"test spearman {ev.spearman:.4f}, R-l2 x100 {100 * ev.relative_l2:.3f}, mean u {ev.mean_u:.3f}")
