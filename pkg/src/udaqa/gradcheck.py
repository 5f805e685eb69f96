"""Whole-model finite-difference check, independent of the autodiff engine.

``reference_loss`` re-derives the training objective in plain numpy with a
leading *copy* axis on every parameter, so thousands of perturbed parameter
sets run as one broadcasted forward pass. ``check_model_gradients`` compares
central differences computed this way with the engine's backward pass.

Coordinates whose perturbation flips a relu mask, a log-variance clamp side
or the sign inside an absolute value are excluded, matching
:func:`udaqa.autodiff.finite_diff_check`.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckResult
from .model import LOGVAR_MAX, LOGVAR_MIN, ModelParams, training_loss


def _layers(params: Mapping[str, np.ndarray], net: str) -> list[tuple[np.ndarray, np.ndarray]]:
    out, i = [], 0
    while f"{net}.{i}.weight" in params:
        out.append((params[f"{net}.{i}.weight"], params[f"{net}.{i}.bias"]))
        i += 1
    return out


def _linear(x, w, b):
    # x: [P, *lead, in]; w: [Pw, out, in]; b: [Pw, out]
    lead = x.ndim - 2
    wt = np.swapaxes(w, -1, -2)
    wt = wt.reshape(wt.shape[:1] + (1,) * (lead - 1) + wt.shape[1:])
    return x @ wt + b.reshape((b.shape[0],) + (1,) * lead + b.shape[1:])


def _mlp(x, layers, kinks):
    for i, (w, b) in enumerate(layers):
        x = _linear(x, w, b)
        if i < len(layers) - 1:
            kinks.append(x > 0)
            x = np.maximum(x, 0.0)
    return x


def _gaussian(out, D, kinks):
    lv = out[..., D:]
    kinks.append(np.sign(np.clip(lv - LOGVAR_MIN, None, 0) + np.clip(lv - LOGVAR_MAX, 0, None)))
    return out[..., :D], np.clip(lv, LOGVAR_MIN, LOGVAR_MAX)


def _cat(a, b):
    lead = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    return np.concatenate([np.broadcast_to(a, lead + a.shape[-1:]), np.broadcast_to(b, lead + b.shape[-1:])], axis=-1)


def _abs(x, kinks):
    kinks.append(np.sign(x))
    return np.abs(x)


def reference_loss(
    params: Mapping[str, np.ndarray],
    config,
    clips: np.ndarray,
    video: np.ndarray | None,
    y: np.ndarray,
    noise: np.ndarray,
    alpha: float = 1.0,
    beta: float = 10.0,
    reweight: bool = True,
    squared: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Total loss for each parameter copy, plus a per-copy kink signature.

    Every array in ``params`` carries a leading copy axis (size 1 means
    shared). Returns ``(loss [P], kinks [P, L])``.
    """
    kinks: list[np.ndarray] = []
    P = max(v.shape[0] for v in params.values())
    x = clips[None]
    wa = _layers(params, "wa_net")
    if wa:
        logits = _mlp(x, wa, kinks)
        logits = logits - logits.max(axis=-2, keepdims=True)
        e = np.exp(logits)
        f_v = np.sum(e / e.sum(axis=-2, keepdims=True) * x, axis=-2)
    else:
        f_v = x.mean(axis=-2)
    y = y.reshape(-1, 1)[None]

    def err(y_hat):
        d = y_hat - y
        return d * d if squared else _abs(d, kinks)

    if not config.cvae:
        loss = err(_mlp(f_v, _layers(params, "regressor"), kinks)).mean(axis=(-2, -1))
        return np.broadcast_to(loss, (P,)), _flatten(kinks, P)

    if config.use_video_feature:
        X = video[None]
    else:
        X = _mlp(x.mean(axis=-2), _layers(params, "x_proj"), kinks)
    D = config.D
    mu1, lv1 = _gaussian(_mlp(X, _layers(params, "prior_net"), kinks), D, kinks)
    mu2, lv2 = _gaussian(_mlp(_cat(X, y), _layers(params, "posterior_net"), kinks), D, kinks)
    f_u = mu2 + noise[None] * np.exp(0.5 * lv2)
    y_hat = _mlp(_cat(f_v, f_u), _layers(params, "regressor"), kinks)
    kl = np.sum(0.5 * (lv1 - lv2) + 0.5 * (np.exp(lv2) + (mu2 - mu1) ** 2) * np.exp(-lv1) - 0.5, axis=-1)
    latent = kl.mean(axis=-1)
    if reweight:
        mapnet = _layers(params, "map_net")
        u2 = _mlp(lv2, mapnet, kinks)
        u1 = _mlp(lv1, mapnet, kinks)
        raqa = (np.exp(-u2) * err(y_hat) + u2).mean(axis=(-2, -1))
        u_loss = _abs(u1 - u2, kinks).mean(axis=(-2, -1))
        loss = raqa + alpha * latent + beta * u_loss
    else:
        loss = err(y_hat).mean(axis=(-2, -1)) + alpha * latent
    # Arrays the loss ignores (MapNet without reweighting) leave the copy axis at 1.
    return np.broadcast_to(loss, (P,)), _flatten(kinks, P)


def _flatten(kinks, P):
    return np.concatenate([np.broadcast_to(k, (P,) + k.shape[1:]).reshape(P, -1) for k in kinks], axis=1)


def numeric_gradients(
    params: ModelParams,
    clips, video, y, noise,
    step: float = 1e-5,
    chunk: int = 512,
    **loss_kw,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Central-difference gradient of every parameter and a mask of kink-free coordinates."""
    base = {name: arr[None] for name, arr in params.named_arrays()}
    grads, valid = {}, {}
    for name, arr in params.named_arrays():
        flat = arr.reshape(-1)
        g = np.empty(flat.size)
        ok = np.empty(flat.size, dtype=bool)
        for lo in range(0, flat.size, chunk):
            idx = np.arange(lo, min(lo + chunk, flat.size))
            n = len(idx)
            stacked = np.repeat(flat[None], 2 * n, axis=0)
            stacked[np.arange(n), idx] += step
            stacked[n + np.arange(n), idx] -= step
            trial = dict(base)
            trial[name] = stacked.reshape((2 * n,) + arr.shape)
            loss, kinks = reference_loss(trial, params.config, clips, video, y, noise, **loss_kw)
            g[idx] = (loss[:n] - loss[n:]) / (2 * step)
            ok[idx] = np.all(kinks[:n] == kinks[n:], axis=1)
        grads[name] = g.reshape(arr.shape)
        valid[name] = ok.reshape(arr.shape)
    return grads, valid


def analytic_gradients(params: ModelParams, clips, video, y, noise, **loss_kw) -> tuple[float, dict[str, np.ndarray]]:
    bound = params.bind(requires_grad=True)
    terms = training_loss(bound, clips, video, y, noise, **loss_kw)
    ad.backward(terms.total)
    return terms.total.item(), {
        name: np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad for name, leaf in bound.leaves.items()
    }


def check_model_gradients(
    params: ModelParams,
    clips, video, y, noise,
    step: float = 1e-5,
    **loss_kw,
) -> tuple[GradCheckResult, dict[str, float]]:
    """Max relative error ``|a - n| / max(1, |a|)`` overall and per parameter array."""
    _, analytic = analytic_gradients(params, clips, video, y, noise, **loss_kw)
    numeric, valid = numeric_gradients(params, clips, video, y, noise, step=step, **loss_kw)
    per_param, checked, excluded = {}, 0, 0
    for name, a in analytic.items():
        rel = np.abs(a - numeric[name]) / np.maximum(1.0, np.abs(a))
        mask = valid[name]
        per_param[name] = float(rel[mask].max()) if mask.any() else 0.0
        checked += int(mask.sum())
        excluded += int((~mask).sum())
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckResult(worst, checked, excluded), per_param
