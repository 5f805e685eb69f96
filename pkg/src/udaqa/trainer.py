"""Training with uncertainty-ordered curriculum, and evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics
from .autodiff import backward
from .data import FeatureSample, Manifest, normalize_scores, unit_labels
from .layers import AdamState, adam_step
from .model import ModelConfig, ModelParams, PredictionSet, predict_batch, training_loss

logger = logging.getLogger(__name__)


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    alpha: float = 1.0
    beta: float = 10.0
    epochs: int = 60
    batch_size: int = 8
    curriculum: bool = True
    start_percent: float = 40.0
    step_percent: float = 20.0
    patience: int = 3
    wa: bool = True
    cvae: bool = True
    reweight: bool = True
    squared_error: bool = False
    shuffle: bool = False
    latent_dim: int = 6
    wa_hidden: tuple[int, ...] | None = None
    prior_hidden: tuple[int, ...] | None = None
    map_hidden: tuple[int, ...] = (16,)
    regressor_hidden: tuple[int, ...] = (256, 64)
    logvar_bias_init: float = 0.0
    seed: int = 0
    t_eval: int = 7
    log_subsets: bool = False

    def validate(self) -> None:
        if not 0 < self.start_percent <= 100:
            raise ValueError("start_percent must be in (0, 100]")
        if not 0 < self.step_percent <= 100:
            raise ValueError("step_percent must be in (0, 100]")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay nonnegative")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.latent_dim < 1 or self.t_eval < 0:
            raise ValueError("latent_dim must be positive and t_eval nonnegative")

    def effective(self) -> "TrainConfig":
        """Resolve switch dependencies: reweighting needs the CVAE branch and
        the curriculum needs reweighting (it orders by the learned u)."""
        cfg = dataclasses.replace(self)
        if cfg.reweight and not cfg.cvae:
            logger.warning("reweight requires the CVAE branch; disabling reweight")
            cfg.reweight = False
        if cfg.curriculum and not cfg.reweight:
            logger.warning("curriculum orders by learned uncertainty; disabling curriculum")
            cfg.curriculum = False
        return cfg

    def model_config(self, manifest: Manifest) -> ModelConfig:
        return ModelConfig(
            M=manifest.M, N=manifest.N or max(1, manifest.M // 2), K=manifest.K, D=self.latent_dim,
            use_video_feature=manifest.has_video_feature, wa=self.wa, cvae=self.cvae,
            wa_hidden=self.wa_hidden, prior_hidden=self.prior_hidden,
            map_hidden=self.map_hidden, regressor_hidden=self.regressor_hidden,
            logvar_bias_init=self.logvar_bias_init,
        )


@dataclass
class PreparedSplit:
    """Arrays for one split with labels on the unit scale."""

    ids: list[str]
    clips: np.ndarray
    video: np.ndarray | None
    judge_labels: list[np.ndarray]
    final_unit: np.ndarray
    samples: list[FeatureSample]

    @classmethod
    def build(cls, samples: Sequence[FeatureSample], manifest: Manifest) -> "PreparedSplit":
        if not samples:
            raise ValueError("empty split")
        labels = [unit_labels(s, manifest) for s in samples]
        video = None
        if manifest.has_video_feature:
            video = np.stack([s.video_feature for s in samples])
        return cls(
            ids=[s.id for s in samples],
            clips=np.stack([s.clip_features for s in samples]),
            video=video,
            judge_labels=[j for j, _ in labels],
            final_unit=np.array([f for _, f in labels]),
            samples=list(samples),
        )

    def __len__(self):
        return len(self.ids)


def sample_judge_label(labels: Sequence[float], rng: np.random.Generator) -> float:
    """Uniform draw from one sample's (normalized) judge labels."""
    if len(labels) == 0:
        raise ValueError("empty judge score set")
    return float(labels[rng.integers(len(labels))])


@dataclass
class CurriculumState:
    n: int
    percent: float
    u: np.ndarray | None = None
    best: float = -math.inf
    since_improvement: int = 0

    def record(self, indices: np.ndarray, values: np.ndarray) -> None:
        if self.u is None:
            self.u = np.full(self.n, np.nan)
        self.u[indices] = values

    @property
    def has_order(self) -> bool:
        return self.u is not None and not np.any(np.isnan(self.u))


def active_count(percent: float, size: int) -> int:
    return min(size, max(1, math.ceil(percent * size / 100.0 - 1e-9)))


def curriculum_subset(state: CurriculumState, dataset_size: int) -> list[int]:
    """Lowest-u ``percent`` of the data, ascending in u, ties by index.

    ``train`` sorts its split by sample id, so index ties are id ties.

    Before any u has been recorded the whole set is returned in index order.
    """
    if not state.has_order:
        return list(range(dataset_size))
    order = np.lexsort((np.arange(dataset_size), state.u))
    return [int(i) for i in order[:active_count(state.percent, dataset_size)]]


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    best_epoch: int
    best_val: float
    config: TrainConfig
    final_u: np.ndarray | None = None
    last_params: ModelParams | None = None


def _val_spearman(params: ModelParams, val: PreparedSplit) -> float | None:
    preds = predict_batch(val.samples, params, t=0)
    try:
        return metrics.spearman([p.deterministic_score for p in preds], val.final_unit)
    except metrics.UndefinedMetricError:
        return None


def train(
    train_samples: Sequence[FeatureSample],
    val_samples: Sequence[FeatureSample],
    manifest: Manifest,
    config: TrainConfig,
    log_file=None,
) -> TrainResult:
    """Train and return the parameters with the best validation Spearman.

    Each epoch walks the active subset in ascending recorded u (or id order
    when the curriculum is off), one Adam step per minibatch. The active
    percentage grows by ``step_percent`` once validation Spearman has not
    improved on the stage's best for ``patience`` epochs, and training stops
    when that happens at 100%.
    """
    config.validate()
    cfg = config.effective()
    # Index order is id order, so index tie-breaks are id tie-breaks.
    tr = PreparedSplit.build(sorted(train_samples, key=lambda s: s.id), manifest)
    val = PreparedSplit.build(val_samples, manifest)
    params = ModelParams.initialize(cfg.model_config(manifest), cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    adam = AdamState()
    n = len(tr)
    state = CurriculumState(n=n, percent=cfg.start_percent if cfg.curriculum else 100.0)
    best_params, best_val, best_epoch = params.copy(), -math.inf, 0
    log: list[dict] = []
    D = params.config.D

    for epoch in range(1, cfg.epochs + 1):
        warmup = cfg.curriculum and not state.has_order
        if cfg.curriculum and not warmup:
            subset = curriculum_subset(state, n)
        else:
            subset = list(range(n))
        order = np.array(subset)
        u_before = None if state.u is None else state.u.copy()
        if cfg.shuffle:
            order = rng.permutation(order)

        sums = dict(total=0.0, raqa=0.0, latent=0.0, u_loss=0.0)
        u_seen = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            y = np.array([sample_judge_label(tr.judge_labels[i], rng) for i in idx])
            noise = rng.standard_normal((len(idx), D)) if cfg.cvae else None
            bound = params.bind()
            terms = training_loss(
                bound, tr.clips[idx], None if tr.video is None else tr.video[idx], y, noise,
                alpha=cfg.alpha, beta=cfg.beta, reweight=cfg.reweight, squared=cfg.squared_error,
            )
            value = terms.total.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, samples {[tr.ids[i] for i in idx]}")
            backward(terms.total, bound.leaves.values())
            grads = {name: leaf.grad for name, leaf in bound.leaves.items()}
            adam_step(dict(params.named_arrays()), grads, adam, cfg.learning_rate, cfg.weight_decay)
            w = len(idx)
            sums["total"] += value * w
            sums["raqa"] += terms.raqa.item() * w
            sums["latent"] += terms.latent.item() * w
            sums["u_loss"] += terms.u_loss.item() * w
            if terms.u_train is not None:
                state.record(idx, terms.u_train)
                u_seen.append(terms.u_train)

        rho = _val_spearman(params, val)
        improved = rho is not None and rho > state.best
        if rho is not None and rho > best_val:
            best_val, best_epoch, best_params = rho, epoch, params.copy()

        advanced = converged = False
        if not warmup:
            if improved:
                state.best, state.since_improvement = rho, 0
            else:
                state.since_improvement += 1
        record = {
            "epoch": epoch,
            "phase": "warmup" if warmup else ("curriculum" if cfg.curriculum else "full"),
            "active_percent": 100.0 if warmup else state.percent,
            "active_size": len(subset),
            "loss_total": sums["total"] / len(order),
            "loss_raqa": sums["raqa"] / len(order),
            "loss_latent": sums["latent"] / len(order),
            "loss_u": sums["u_loss"] / len(order),
            "val_spearman": rho,
            "mean_u": float(np.mean(np.concatenate(u_seen))) if u_seen else None,
            "stage_best": None if warmup or not math.isfinite(state.best) else state.best,
            "epochs_since_improvement": 0 if warmup else state.since_improvement,
        }
        if not warmup and state.since_improvement >= cfg.patience:
            if state.percent < 100.0:
                state.percent = min(100.0, state.percent + cfg.step_percent)
                state.best, state.since_improvement = -math.inf, 0
                advanced = True
            else:
                converged = True
        record["advanced"] = advanced
        record["converged"] = converged
        if cfg.log_subsets:
            record["subset"] = [int(i) for i in subset]
            record["u_before"] = None if u_before is None else [float(v) for v in u_before]
        log.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
        logger.info("epoch %d %s %.1f%% loss %.5f val rho %s", epoch, record["phase"],
                    record["active_percent"], record["loss_total"],
                    "n/a" if rho is None else f"{rho:.4f}")
        if converged:
            break

    return TrainResult(best_params, log, best_epoch, best_val, cfg,
                       None if state.u is None else state.u.copy(), params)


@dataclass
class EvalResult:
    spearman: float | None
    spearman_error: str | None
    relative_l2: float
    mean_u: float | None
    per_action: dict[str, dict] = field(default_factory=dict)
    fisher_z: float | None = None
    predictions: list[PredictionSet] = field(default_factory=list)

    @property
    def r_l2_x100(self) -> float:
        return 100.0 * self.relative_l2

    def summary(self) -> dict:
        out = {
            "spearman": self.spearman,
            "relative_l2": self.relative_l2,
            "r_l2_x100": self.r_l2_x100,
            "mean_u": self.mean_u,
            "n_samples": len(self.predictions),
            "per_action": self.per_action,
        }
        if self.spearman_error:
            out["spearman_error"] = self.spearman_error
        if self.fisher_z is not None:
            out["fisher_z_average"] = self.fisher_z
        return out


def denormalize_prediction(p: PredictionSet, lo: float, hi: float) -> PredictionSet:
    def f(v):
        return float(normalize_scores(v, lo, hi, "from-unit"))
    return dataclasses.replace(p, deterministic_score=f(p.deterministic_score),
                               sampled_scores=tuple(f(v) for v in p.sampled_scores))


def evaluate(
    samples: Sequence[FeatureSample],
    manifest: Manifest,
    params: ModelParams,
    t: int = 7,
    seed: int = 0,
) -> EvalResult:
    """Metrics on raw-score units from the deterministic (zero-noise) scores.

    Sampled scores are attached per sample for reporting only.
    """
    preds = [denormalize_prediction(p, *manifest.range_for(s.action))
             for s, p in zip(samples, predict_batch(samples, params, t, seed))]
    y_hat = np.array([p.deterministic_score for p in preds])
    y = np.array([s.final_score for s in samples])
    actions = sorted({s.action for s in samples})

    def rho_or_error(a, b):
        try:
            return metrics.spearman(a, b), None
        except metrics.UndefinedMetricError as exc:
            return None, str(exc)

    rho, err = rho_or_error(y_hat, y)
    per_action = {}
    for action in actions:
        mask = np.array([s.action == action for s in samples])
        lo, hi = manifest.range_for(action)
        a_rho, a_err = rho_or_error(y_hat[mask], y[mask])
        per_action[action] = {
            "spearman": a_rho,
            "relative_l2": metrics.relative_l2(y_hat[mask], y[mask], hi, lo),
            "n_samples": int(mask.sum()),
        }
        if a_err:
            per_action[action]["spearman_error"] = a_err
    rl2 = float(np.mean([v["relative_l2"] for v in per_action.values()]))
    fisher = None
    if len(actions) > 1 and all(v["spearman"] is not None for v in per_action.values()):
        clamp = 1 - 1e-9
        fisher = metrics.fisher_z_average([float(np.clip(v["spearman"], -clamp, clamp))
                                           for v in per_action.values()])
    us = [p.log_uncertainty for p in preds if p.log_uncertainty is not None]
    return EvalResult(rho, err, rl2, float(np.mean(us)) if us else None, per_action, fisher, preds)
