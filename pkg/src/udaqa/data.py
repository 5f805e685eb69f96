"""Feature-dataset format, loader, score normalization, and synthetic data.

A dataset is a directory holding ``manifest.json`` and one binary feature
file per sample. Feature files are float32 little-endian, row-major: the
``[K, M]`` clip features, then (when the manifest sets
``has_video_feature``) the ``[N]`` video-level vector.

Manifest schema (``format_version`` 1)::

    {
      "format_version": 1,
      "K": 10, "M": 64, "N": 32,            # N is null without video features
      "has_video_feature": true,
      "scoring_rule": "mtl_middle3" | "mean" | "final_only",
      "score_range": {"<action>": [y_min, y_max], ...},
      "samples": [
        {"id": "s000000", "features": "features/s000000.f32",
         "judge_scores": [...], "difficulty": 2.4, "final_score": 61.2,
         "action": "diving", "split": "train", "meta": {...}}, ...
      ]
    }

``meta`` is free-form and ignored by the loader; the synthetic generator
stores the latent quality and ambiguity there.

Any extractor can produce this format: write each sample's features with
:func:`write_feature_file` and the records with :func:`write_manifest`.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

FORMAT_VERSION = 1
SCORING_RULES = ("mtl_middle3", "mean", "final_only")
MTL_TOLERANCE = 1e-6


class DatasetError(ValueError):
    pass


@dataclass
class FeatureSample:
    id: str
    clip_features: np.ndarray
    judge_scores: tuple[float, ...]
    difficulty: float
    final_score: float
    action: str = "default"
    video_feature: np.ndarray | None = None
    split: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.clip_features.shape[0]

    @property
    def M(self) -> int:
        return self.clip_features.shape[1]


@dataclass
class Manifest:
    K: int
    M: int
    N: int | None
    scoring_rule: str
    score_range: dict[str, tuple[float, float]]
    records: list[dict]
    has_video_feature: bool = True
    format_version: int = FORMAT_VERSION
    root: Path | None = None

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "K": self.K,
            "M": self.M,
            "N": self.N,
            "has_video_feature": self.has_video_feature,
            "scoring_rule": self.scoring_rule,
            "score_range": {k: [float(a), float(b)] for k, (a, b) in sorted(self.score_range.items())},
            "samples": self.records,
        }

    def range_for(self, action: str) -> tuple[float, float]:
        try:
            return self.score_range[action]
        except KeyError:
            raise DatasetError(f"manifest has no score range for action {action!r}") from None


@dataclass
class SyntheticSpec:
    n_samples: int = 1000
    K: int = 10
    M: int = 64
    N: int = 32
    judges: int = 7
    sigma_lo: float = 0.1
    sigma_hi: float = 1.0
    difficulty_lo: float = 2.0
    difficulty_hi: float = 3.6
    clip_jitter: float = 0.02
    actions: tuple[str, ...] = ("diving",)
    split_fractions: tuple[tuple[str, float], ...] = (("train", 0.6), ("val", 0.2), ("test", 0.2))
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 1 or self.K < 1 or self.M < 1 or self.N < 1:
            raise ValueError("sample count and widths must be positive")
        if self.judges < 1:
            raise ValueError("need at least one judge")
        if not 0 <= self.sigma_lo <= self.sigma_hi:
            raise ValueError("need 0 <= sigma_lo <= sigma_hi")
        if not 0 < self.difficulty_lo <= self.difficulty_hi:
            raise ValueError("need 0 < difficulty_lo <= difficulty_hi")
        if not self.actions:
            raise ValueError("need at least one action")


def middle_three_sum(judge_scores: Sequence[float]) -> float:
    """Sum of the central three sorted marks (third to fifth of seven)."""
    s = sorted(judge_scores)
    if len(s) < 5:
        raise ValueError("middle-three rule needs at least 5 judges")
    start = (len(s) - 3) // 2
    return float(sum(s[start:start + 3]))


def final_score_from_judges(judge_scores: Sequence[float], difficulty: float, rule: str) -> float:
    if rule == "mtl_middle3":
        return middle_three_sum(judge_scores) * difficulty
    if rule == "mean":
        return float(np.mean(judge_scores)) * difficulty
    raise ValueError(f"rule {rule!r} does not derive finals from judges")


def judge_to_final_scale(judge_score: float, difficulty: float, rule: str) -> float:
    """The final score implied if every counted judge gave ``judge_score``."""
    if rule == "mtl_middle3":
        return 3.0 * judge_score * difficulty
    if rule == "mean":
        return judge_score * difficulty
    raise ValueError(f"rule {rule!r} has no judge scale")


def normalize_scores(scores, y_min: float, y_max: float, direction: str = "to-unit"):
    if not y_max > y_min:
        raise ValueError(f"score range is empty: y_min={y_min}, y_max={y_max}")
    scores = np.asarray(scores, dtype=np.float64)
    if direction == "to-unit":
        return (scores - y_min) / (y_max - y_min)
    if direction == "from-unit":
        return scores * (y_max - y_min) + y_min
    raise ValueError(f"direction must be 'to-unit' or 'from-unit', got {direction!r}")


def unit_labels(sample: FeatureSample, manifest: Manifest) -> tuple[np.ndarray, float]:
    """Training labels (one per judge) and the final score, on the unit scale.

    Judge marks are first mapped onto the final-score scale so both live in
    the action's ``[y_min, y_max]`` range. ``final_only`` datasets yield the
    final score as their single label.
    """
    lo, hi = manifest.range_for(sample.action)
    final = float(normalize_scores(sample.final_score, lo, hi))
    if manifest.scoring_rule == "final_only" or not sample.judge_scores:
        return np.array([final]), final
    implied = [judge_to_final_scale(j, sample.difficulty, manifest.scoring_rule) for j in sample.judge_scores]
    return normalize_scores(implied, lo, hi), final


def write_feature_file(path: str | os.PathLike, clip_features: np.ndarray,
                       video_feature: np.ndarray | None = None) -> None:
    blob = np.ascontiguousarray(clip_features, dtype="<f4").tobytes()
    if video_feature is not None:
        blob += np.ascontiguousarray(video_feature, dtype="<f4").tobytes()
    Path(path).write_bytes(blob)


def read_feature_file(path: Path, K: int, M: int, N: int | None) -> tuple[np.ndarray, np.ndarray | None]:
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read feature file {path}: {exc}") from exc
    expected = 4 * K * M + (4 * N if N else 0)
    if len(blob) != expected:
        raise DatasetError(f"feature file {path} has {len(blob)} bytes, expected {expected}")
    values = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    clips = values[:K * M].reshape(K, M)
    video = values[K * M:] if N else None
    return clips, video


def write_manifest(path: str | os.PathLike, manifest: Manifest) -> None:
    text = json.dumps(manifest.to_json(), indent=1, sort_keys=True) + "\n"
    Path(path).write_text(text)


def _check_record(rec: dict, manifest: Manifest) -> None:
    sid = rec.get("id", "<missing id>")
    judges = rec.get("judge_scores", [])
    if manifest.scoring_rule != "final_only" and not judges:
        raise DatasetError(f"sample {sid}: empty judge score set")
    if rec.get("action") not in manifest.score_range:
        raise DatasetError(f"sample {sid}: no score range for action {rec.get('action')!r}")
    if manifest.scoring_rule == "mtl_middle3" and len(judges) >= 5:
        expected = final_score_from_judges(judges, rec["difficulty"], "mtl_middle3")
        if abs(expected - rec["final_score"]) > MTL_TOLERANCE:
            raise DatasetError(f"sample {sid}: final score {rec['final_score']} inconsistent with "
                               f"middle-three rule ({expected})")


def load_dataset(manifest_path: str | os.PathLike) -> tuple[list[FeatureSample], Manifest]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        raw = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    version = raw.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported manifest format version {version!r}")
    rule = raw.get("scoring_rule")
    if rule not in SCORING_RULES:
        raise DatasetError(f"unknown scoring rule {rule!r}")
    has_video = bool(raw.get("has_video_feature", False))
    manifest = Manifest(
        K=int(raw["K"]), M=int(raw["M"]), N=int(raw["N"]) if raw.get("N") else None,
        scoring_rule=rule,
        score_range={k: (float(v[0]), float(v[1])) for k, v in raw["score_range"].items()},
        records=raw["samples"], has_video_feature=has_video, format_version=version,
        root=manifest_path.parent,
    )
    if has_video and not manifest.N:
        raise DatasetError("manifest declares video features but no N")
    for action, (lo, hi) in manifest.score_range.items():
        if not hi > lo:
            raise DatasetError(f"action {action!r}: empty score range [{lo}, {hi}]")

    samples = []
    seen = set()
    for rec in manifest.records:
        _check_record(rec, manifest)
        if rec["id"] in seen:
            raise DatasetError(f"duplicate sample id {rec['id']}")
        seen.add(rec["id"])
        try:
            clips, video = read_feature_file(manifest.root / rec["features"], manifest.K, manifest.M,
                                             manifest.N if has_video else None)
        except DatasetError as exc:
            raise DatasetError(f"sample {rec['id']}: {exc}") from None
        if not (np.all(np.isfinite(clips)) and (video is None or np.all(np.isfinite(video)))):
            raise DatasetError(f"sample {rec['id']}: non-finite feature values")
        samples.append(FeatureSample(
            id=rec["id"], clip_features=clips, video_feature=video,
            judge_scores=tuple(float(j) for j in rec.get("judge_scores", [])),
            difficulty=float(rec["difficulty"]), final_score=float(rec["final_score"]),
            action=rec["action"], split=rec.get("split"), meta=rec.get("meta", {}),
        ))
    return samples, manifest


def split_dataset(
    ids: Sequence[str],
    scheme: str = "fixed-fraction",
    seed: int = 0,
    fractions: Sequence[tuple[str, float]] = (("train", 0.75), ("test", 0.25)),
    folds: int = 4,
) -> dict[str, str]:
    """Assign every id to exactly one split, deterministically from ``seed``.

    ``fixed-fraction`` rounds counts by largest remainder; ``k-fold`` names
    splits ``fold0`` .. ``fold{k-1}`` with sizes balanced within one.
    """
    ids = list(ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    if scheme == "k-fold":
        if folds < 1 or folds > len(ids):
            raise ValueError(f"cannot make {folds} folds from {len(ids)} samples")
        return {ids[j]: f"fold{pos % folds}" for pos, j in enumerate(perm)}
    if scheme != "fixed-fraction":
        raise ValueError(f"unknown split scheme {scheme!r}")
    names = [n for n, _ in fractions]
    weights = np.array([f for _, f in fractions], dtype=np.float64)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("split fractions must be nonnegative with positive total")
    exact = weights / weights.sum() * len(ids)
    counts = np.floor(exact + 1e-9).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: len(ids) - counts.sum()]:
        counts[i] += 1
    out = {}
    pos = 0
    for name, n in zip(names, counts):
        for j in perm[pos:pos + n]:
            out[ids[j]] = name
        pos += n
    return out


def apply_split(manifest: Manifest, assignment: Mapping[str, str]) -> None:
    for rec in manifest.records:
        rec["split"] = assignment[rec["id"]]


def select_split(samples: Sequence[FeatureSample], name: str) -> list[FeatureSample]:
    chosen = [s for s in samples if s.split == name]
    if not chosen:
        raise DatasetError(f"split {name!r} is empty")
    return chosen


def generate_synthetic(spec: SyntheticSpec, dest: str | os.PathLike) -> Manifest:
    """Write a seeded multi-judge dataset to ``dest``.

    Each sample has a latent quality q in [0, 1], an ambiguity sigma_a in
    [sigma_lo, sigma_hi] and a difficulty. Clip features are one fixed
    random affine map of (q + per-clip jitter, ambiguity, difficulty); the
    video feature is a second, independent map of (q, ambiguity,
    difficulty). Judges mark ``clip(10 q + N(0, sigma_a), 0, 10)``.
    """
    spec.validate()
    dest = Path(dest)
    rng = np.random.default_rng(spec.seed)
    clip_map = rng.normal(size=(spec.M, 3))
    clip_offset = rng.normal(scale=0.1, size=spec.M)
    video_map = rng.normal(size=(spec.N, 3))
    video_offset = rng.normal(scale=0.1, size=spec.N)
    rule = "mtl_middle3" if spec.judges >= 5 else "mean"
    sigma_span = spec.sigma_hi - spec.sigma_lo
    diff_span = spec.difficulty_hi - spec.difficulty_lo

    if dest.exists() and not (dest.is_dir() and ((dest / "manifest.json").is_file() or not any(dest.iterdir()))):
        raise OSError(f"refusing to overwrite {dest}: it exists and is not a dataset directory")
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{dest.name}.", dir=dest.parent))
    try:
        (tmp / "features").mkdir()
        records = []
        for i in range(spec.n_samples):
            q = rng.uniform(0.0, 1.0)
            sigma = rng.uniform(spec.sigma_lo, spec.sigma_hi)
            difficulty = rng.uniform(spec.difficulty_lo, spec.difficulty_hi)
            amb = (sigma - spec.sigma_lo) / sigma_span if sigma_span > 0 else 0.0
            dn = (difficulty - spec.difficulty_lo) / diff_span if diff_span > 0 else 0.0
            jitter = rng.normal(scale=spec.clip_jitter, size=spec.K)
            latent = np.stack([q + jitter, np.full(spec.K, amb), np.full(spec.K, dn)], axis=1)
            clips = latent @ clip_map.T + clip_offset
            video = video_map @ np.array([q, amb, dn]) + video_offset
            judges = np.clip(10.0 * q + rng.normal(scale=sigma, size=spec.judges), 0.0, 10.0) \
                if sigma > 0 else np.full(spec.judges, 10.0 * q)
            judges = [float(j) for j in judges]
            final = final_score_from_judges(judges, difficulty, rule)
            sid = f"s{i:06d}"
            write_feature_file(tmp / "features" / f"{sid}.f32", clips, video)
            records.append({
                "id": sid, "features": f"features/{sid}.f32", "judge_scores": judges,
                "difficulty": float(difficulty), "final_score": final,
                "action": spec.actions[i % len(spec.actions)], "split": None,
                "meta": {"quality": float(q), "ambiguity": float(sigma)},
            })
        score_range = {}
        for action in spec.actions:
            finals = [r["final_score"] for r in records if r["action"] == action]
            lo, hi = min(finals), max(finals)
            if not hi > lo:
                hi = lo + 1.0
            score_range[action] = (lo, hi)
        manifest = Manifest(K=spec.K, M=spec.M, N=spec.N, scoring_rule=rule,
                            score_range=score_range, records=records, has_video_feature=True)
        apply_split(manifest, split_dataset([r["id"] for r in records], "fixed-fraction",
                                            seed=spec.seed, fractions=spec.split_fractions))
        write_manifest(tmp / "manifest.json", manifest)
        if dest.exists():
            shutil.rmtree(dest)
        os.replace(tmp, dest)
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise OSError(f"cannot write synthetic dataset to {dest}: {exc}") from exc
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    manifest.root = dest
    return manifest
