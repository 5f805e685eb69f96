"""The single-branch uncertainty-driven AQA network.

Clip features are pooled by a weight-attention MLP, a CVAE prior/posterior
pair describes a D-dimensional latent Gaussian, a shared MapNet turns a
log-variance into a scalar log-uncertainty, and a regressor scores the
concatenation of the pooled feature and a latent sample.

All forward functions take batched Tensors (leading batch axis) and a list
of bound ``(weight, bias)`` pairs per subnetwork.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import objectives
from .autodiff import Tensor
from .data import FeatureSample
from .layers import (CheckpointError, LinearLayer, Mlp, atomic_write_bytes, init_params, load_checkpoint,
                     mlp_forward, save_checkpoint)

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

SUBNETS = ("wa_net", "x_proj", "prior_net", "posterior_net", "map_net", "regressor")


@dataclass
class ModelConfig:
    M: int
    N: int
    K: int
    D: int = 6
    use_video_feature: bool = True
    wa: bool = True
    cvae: bool = True
    wa_hidden: tuple[int, ...] | None = None
    prior_hidden: tuple[int, ...] | None = None
    map_hidden: tuple[int, ...] = (16,)
    regressor_hidden: tuple[int, ...] = (256, 64)
    logvar_bias_init: float = 0.0

    def __post_init__(self):
        if self.wa_hidden is None:
            self.wa_hidden = (max(1, self.M // 2),) * 3
        if self.prior_hidden is None:
            self.prior_hidden = (max(1, self.N // 2),) * 2
        self.wa_hidden = tuple(self.wa_hidden)
        self.prior_hidden = tuple(self.prior_hidden)
        self.map_hidden = tuple(self.map_hidden)
        self.regressor_hidden = tuple(self.regressor_hidden)

    def widths(self) -> dict[str, list[int]]:
        out = {}
        if self.wa:
            out["wa_net"] = [self.M, *self.wa_hidden, self.M]
        if self.cvae:
            if not self.use_video_feature:
                out["x_proj"] = [self.M, self.N]
            out["prior_net"] = [self.N, *self.prior_hidden, 2 * self.D]
            out["posterior_net"] = [self.N + 1, *self.prior_hidden, 2 * self.D]
            out["map_net"] = [self.D, *self.map_hidden, 1]
            out["regressor"] = [self.M + self.D, *self.regressor_hidden, 1]
        else:
            out["regressor"] = [self.M, *self.regressor_hidden, 1]
        return out


@dataclass
class ModelParams:
    config: ModelConfig
    nets: dict[str, Mlp]

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        nets = {name: Mlp(init_params(w, rng)) for name, w in config.widths().items()}
        for name in ("prior_net", "posterior_net"):
            if name in nets:
                nets[name].layers[-1].bias[config.D:] = config.logvar_bias_init
        return cls(config, nets)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name in SUBNETS:
            if name in self.nets:
                out.extend(self.nets[name].named_arrays(name))
        return out

    def copy(self) -> "ModelParams":
        nets = {k: Mlp([LinearLayer(l.weight.copy(), l.bias.copy()) for l in net.layers])
                for k, net in self.nets.items()}
        return ModelParams(self.config, nets)

    def bind(self, requires_grad: bool = True) -> "BoundParams":
        leaves = {name: Tensor(arr, requires_grad=requires_grad, name=name)
                  for name, arr in self.named_arrays()}
        pairs = {
            net: [(leaves[f"{net}.{i}.weight"], leaves[f"{net}.{i}.bias"])
                  for i in range(len(self.nets[net].layers))]
            for net in self.nets
        }
        return BoundParams(self.config, leaves, pairs)


@dataclass
class BoundParams:
    config: ModelConfig
    leaves: dict[str, Tensor]
    pairs: dict[str, list[tuple[Tensor, Tensor]]]

    def get(self, net: str):
        return self.pairs.get(net)


@dataclass
class DiagGaussian:
    mean: Tensor
    log_variance: Tensor

    def __iter__(self):
        return iter((self.mean, self.log_variance))


@dataclass
class PredictionSet:
    sample_id: str
    deterministic_score: float
    sampled_scores: tuple[float, ...]
    log_uncertainty: float | None

    @property
    def sample_mean(self) -> float:
        return float(np.mean(self.sampled_scores)) if self.sampled_scores else self.deterministic_score

    @property
    def sample_std(self) -> float:
        return float(np.std(self.sampled_scores, ddof=1)) if len(self.sampled_scores) > 1 else 0.0


def aggregate_clips(clip_features, wa_net) -> Tensor:
    """Softmax-over-clips weighted sum of clip features.

    ``clip_features`` is [B, K, M] (or [K, M]). Without ``wa_net`` the clips
    are averaged.
    """
    clips = ad.as_tensor(clip_features)
    if clips.data.ndim not in (2, 3) or clips.shape[-2] == 0:
        raise ad.ShapeError(f"aggregate_clips: need [B, K, M] with K >= 1, got {clips.shape}")
    clip_axis = clips.data.ndim - 2
    if wa_net is None:
        return ad.mean(clips, axis=clip_axis)
    logits = mlp_forward(wa_net, clips)
    weights = ad.softmax(logits, axis=clip_axis)
    return ad.tsum(weights * clips, axis=clip_axis)


def _split_gaussian(out: Tensor, D: int) -> DiagGaussian:
    if out.shape[-1] != 2 * D:
        raise ad.ShapeError(f"latent head must emit 2D={2 * D} values, got {out.shape[-1]}")
    mean = ad.slice_(out, 0, D)
    logvar = ad.clip(ad.slice_(out, D, 2 * D), LOGVAR_MIN, LOGVAR_MAX)
    return DiagGaussian(mean, logvar)


def prior_forward(X, prior_net, D: int) -> DiagGaussian:
    return _split_gaussian(mlp_forward(prior_net, X), D)


def posterior_forward(X, y, posterior_net, D: int) -> DiagGaussian:
    """Latent Gaussian given the input feature and the normalized label ``y``."""
    if y is None:
        raise ValueError("posterior needs a label; use the prior at test time")
    X = ad.as_tensor(X)
    y = ad.as_tensor(y)
    if y.data.ndim == X.data.ndim - 1:
        y = ad.apply("reshape", y, shape=y.shape + (1,))
    return _split_gaussian(mlp_forward(posterior_net, ad.concat([X, y], axis=-1)), D)


def map_uncertainty(log_variance, map_net) -> Tensor:
    return mlp_forward(map_net, log_variance)


def reparameterize(dist: DiagGaussian, noise) -> Tensor:
    """mean + noise * exp(log_variance / 2); noise is a constant (None means zero)."""
    if noise is None:
        return dist.mean
    noise = Tensor(np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64))
    if noise.shape != dist.mean.shape:
        if noise.data.size == 1 and float(noise.data.reshape(-1)[0]) == 0.0:
            return dist.mean
        raise ad.ShapeError(f"reparameterize: noise shape {noise.shape} vs mean {dist.mean.shape}")
    return dist.mean + noise * ad.exp(ad.scale(dist.log_variance, 0.5))


def fuse_and_regress(f_v, f_u, regressor) -> Tensor:
    feats = ad.as_tensor(f_v) if f_u is None else ad.concat([ad.as_tensor(f_v), ad.as_tensor(f_u)], axis=-1)
    return mlp_forward(regressor, feats)


def cvae_input(bound: BoundParams, clips: Tensor, video) -> Tensor:
    if bound.config.use_video_feature:
        if video is None:
            raise ValueError("model expects dataset video features but none were given")
        return ad.as_tensor(video)
    return mlp_forward(bound.get("x_proj"), ad.mean(clips, axis=clips.data.ndim - 2))


@dataclass
class LossTerms:
    total: Tensor
    raqa: Tensor
    latent: Tensor
    u_loss: Tensor
    u_train: np.ndarray | None
    y_hat: np.ndarray


def training_loss(
    bound: BoundParams,
    clips: np.ndarray,
    video: np.ndarray | None,
    y: np.ndarray,
    noise: np.ndarray | None,
    alpha: float = 1.0,
    beta: float = 10.0,
    reweight: bool = True,
    squared: bool = False,
) -> LossTerms:
    """Batch-mean total loss on the posterior path.

    ``y`` is [B] normalized labels, ``noise`` is [B, D] standard normal
    draws. With the CVAE disabled the loss is the plain regression error.
    """
    cfg = bound.config
    clips_t = Tensor(clips)
    y_t = Tensor(np.asarray(y, dtype=np.float64).reshape(-1, 1))
    f_v = aggregate_clips(clips_t, bound.get("wa_net"))
    zero = Tensor(0.0)
    if not cfg.cvae:
        y_hat = fuse_and_regress(f_v, None, bound.get("regressor"))
        raqa = ad.mean(objectives.regression_error(y_hat, y_t, squared))
        total = objectives.total_loss(raqa, zero, zero, 0.0, 0.0)
        return LossTerms(total, raqa, zero, zero, None, y_hat.data[:, 0].copy())

    X = cvae_input(bound, clips_t, video)
    prior = prior_forward(X, bound.get("prior_net"), cfg.D)
    post = posterior_forward(X, y_t, bound.get("posterior_net"), cfg.D)
    f_u = reparameterize(post, noise)
    y_hat = fuse_and_regress(f_v, f_u, bound.get("regressor"))
    latent = ad.mean(objectives.kl_diag_gaussian(post, prior))
    u2 = map_uncertainty(post.log_variance, bound.get("map_net"))
    if reweight:
        u1 = map_uncertainty(prior.log_variance, bound.get("map_net"))
        raqa = ad.mean(objectives.reweighted_aqa_loss(y_hat, y_t, u2, squared))
        u_loss = ad.mean(objectives.uncertainty_alignment_loss(u1, u2))
        total = objectives.total_loss(raqa, latent, u_loss, alpha, beta)
    else:
        raqa = ad.mean(objectives.regression_error(y_hat, y_t, squared))
        u_loss = zero
        total = objectives.total_loss(raqa, latent, zero, alpha, 0.0)
    return LossTerms(total, raqa, latent, u_loss, u2.data[:, 0].copy(), y_hat.data[:, 0].copy())


def sample_noise_rng(seed: int, sample_id: str) -> np.random.Generator:
    """Per-sample stream so results do not depend on batch composition."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(sample_id.encode())]))


def predict_batch(
    samples: Sequence[FeatureSample],
    params: ModelParams,
    t: int,
    seed: int = 0,
) -> list[PredictionSet]:
    """Deterministic and t sampled scores (normalized) plus u from the prior."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if not samples:
        return []
    cfg = params.config
    bound = params.bind(requires_grad=False)
    clips = Tensor(np.stack([s.clip_features for s in samples]))
    f_v = aggregate_clips(clips, bound.get("wa_net"))
    if not cfg.cvae:
        y_hat = fuse_and_regress(f_v, None, bound.get("regressor")).data[:, 0]
        return [PredictionSet(s.id, float(v), (), None) for s, v in zip(samples, y_hat)]

    video = np.stack([s.video_feature for s in samples]) if cfg.use_video_feature else None
    X = cvae_input(bound, clips, video)
    prior = prior_forward(X, bound.get("prior_net"), cfg.D)
    u1 = map_uncertainty(prior.log_variance, bound.get("map_net")).data[:, 0]
    B, D = len(samples), cfg.D
    noise = np.zeros((B, t + 1, D))
    for i, s in enumerate(samples):
        if t:
            noise[i, 1:] = sample_noise_rng(seed, s.id).standard_normal((t, D))
    mu = prior.mean.data[:, None, :]
    sigma = np.exp(0.5 * prior.log_variance.data)[:, None, :]
    f_u = Tensor((mu + noise * sigma).reshape(B * (t + 1), D))
    f_v_rep = Tensor(np.repeat(f_v.data, t + 1, axis=0))
    scores = fuse_and_regress(f_v_rep, f_u, bound.get("regressor")).data.reshape(B, t + 1)
    return [
        PredictionSet(s.id, float(scores[i, 0]), tuple(float(v) for v in scores[i, 1:]), float(u1[i]))
        for i, s in enumerate(samples)
    ]


def predict_scores(sample: FeatureSample, params: ModelParams, t: int, seed: int = 0) -> PredictionSet:
    if t < 1:
        raise ValueError("t must be a positive integer")
    return predict_batch([sample], params, t, seed)[0]


def save_model(params: ModelParams, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Binary checkpoint at ``path`` plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    cfg = asdict(params.config)
    sidecar = {
        "version": 1,
        "config": cfg,
        "widths": params.config.widths(),
        **(extra or {}),
    }
    save_checkpoint(path, params.named_arrays())
    atomic_write_bytes(sidecar_path(path), (json.dumps(sidecar, indent=1, sort_keys=True) + "\n").encode())


def sidecar_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_model(path: str | os.PathLike) -> tuple[ModelParams, dict]:
    path = Path(path)
    try:
        sidecar = json.loads(sidecar_path(path).read_text())
    except OSError as exc:
        raise CheckpointError(f"missing checkpoint sidecar {sidecar_path(path)}: {exc}") from exc
    cfg = ModelConfig(**sidecar["config"])
    arrays = dict(load_checkpoint(path))
    params = ModelParams.initialize(cfg, seed=0)
    for name, arr in params.named_arrays():
        if name not in arrays or arrays[name].shape != arr.shape:
            raise CheckpointError(f"{path}: parameter {name!r} missing or mis-shaped")
        arr[...] = arrays[name]
    return params, sidecar
