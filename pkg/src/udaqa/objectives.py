"""Training losses. Each works per sample on batched Tensors; callers reduce."""

from __future__ import annotations

from . import autodiff as ad
from .autodiff import Tensor


def _pair(a, b, what):
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ad.ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def kl_diag_gaussian(posterior, prior) -> Tensor:
    """KL(posterior || prior) for diagonal Gaussians, summed over the last axis.

    Both arguments are ``(mean, log_variance)`` pairs (or DiagGaussian).
    """
    mu2, lv2 = posterior
    mu1, lv1 = prior
    mu2, mu1 = _pair(mu2, mu1, "kl_diag_gaussian")
    lv2, lv1 = _pair(lv2, lv1, "kl_diag_gaussian")
    inv_var1 = ad.exp(-lv1)
    per_dim = (
        ad.scale(lv1 - lv2, 0.5)
        + ad.scale((ad.exp(lv2) + ad.square(mu2 - mu1)) * inv_var1, 0.5)
        - 0.5
    )
    return ad.tsum(per_dim, axis=-1, keepdims=True)


def uncertainty_alignment_loss(u1, u2) -> Tensor:
    """|u1 - u2|: the Euclidean norm of the scalar gap."""
    u1, u2 = _pair(u1, u2, "uncertainty_alignment_loss")
    return _abs(u1 - u2)


def regression_error(y_hat, y, squared: bool = False) -> Tensor:
    y_hat, y = _pair(y_hat, y, "regression_error")
    diff = y_hat - y
    return ad.square(diff) if squared else _abs(diff)


def reweighted_aqa_loss(y_hat, y, u, squared: bool = False) -> Tensor:
    """exp(-u) * |y_hat - y| + u, with u the log-uncertainty."""
    u = ad.as_tensor(u)
    err = regression_error(y_hat, y, squared)
    if u.shape != err.shape:
        raise ad.ShapeError(f"reweighted_aqa_loss: u shape {u.shape} vs error shape {err.shape}")
    return ad.exp(-u) * err + u


def total_loss(raqa, latent, u_loss, alpha: float = 1.0, beta: float = 10.0) -> Tensor:
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be nonnegative")
    return ad.as_tensor(raqa) + ad.scale(latent, alpha) + ad.scale(u_loss, beta)


def _abs(x: Tensor) -> Tensor:
    # A scalar per entry: the norm over a trailing singleton axis.
    if x.data.ndim == 0:
        return ad.apply("reshape", ad.l2_norm(ad.apply("reshape", x, shape=(1,))), shape=())
    if x.shape[-1] != 1:
        x = ad.apply("reshape", x, shape=x.shape + (1,))
        return ad.apply("reshape", ad.l2_norm(x, axis=-1), shape=x.shape[:-1])
    return ad.l2_norm(x, axis=-1)
