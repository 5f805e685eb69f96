"""
Synthetic diving scores
=======================

Generate a small dataset where each sample has seven judge marks, a
difficulty, and a hidden ambiguity that controls how much judges disagree.
"""

import tempfile
from pathlib import Path

import numpy as np

from udaqa.data import SyntheticSpec, generate_synthetic, load_dataset, middle_three_sum

dest = Path(tempfile.mkdtemp()) / "dives"
manifest = generate_synthetic(SyntheticSpec(n_samples=200, seed=1), dest)
samples, manifest = load_dataset(dest)
print("files:", sorted(p.name for p in dest.iterdir()))
print("score range per action:", manifest.score_range)

s = samples[0]
print("clip features", s.clip_features.shape, "video feature", s.video_feature.shape)
print("judges", np.round(s.judge_scores, 1), "difficulty", round(s.difficulty, 2))

# final score: the middle three sorted marks, summed, times difficulty
print("final", round(s.final_score, 3), "=", round(middle_three_sum(s.judge_scores) * s.difficulty, 3))

# judge spread grows with the injected ambiguity
amb = np.array([x.meta["ambiguity"] for x in samples])
spread = np.array([np.std(x.judge_scores) for x in samples])
lo, hi = spread[amb < np.median(amb)].mean(), spread[amb >= np.median(amb)].mean()
print(f"mean judge std: low ambiguity {lo:.3f}, high ambiguity {hi:.3f}")
