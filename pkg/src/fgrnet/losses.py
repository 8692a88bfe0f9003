"""Reconstruction and classification objectives.

All losses take and return :class:`~fgrnet.tensor.Tensor` so they sit on the
same tape as the network.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .exceptions import ContractError, DimensionError
from .tensor import Tensor

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
CE_FLOOR = 1e-12


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_pair(recon: Tensor, target: Tensor):
    if recon.shape != target.shape:
        raise DimensionError(f"shapes differ: {recon.shape} vs {target.shape}", axis="shape")


def mse_loss(recon, target) -> Tensor:
    recon = _as_tensor(recon)
    target = _as_tensor(target, recon)
    _check_pair(recon, target)
    diff = recon - target
    return (diff * diff).mean()


def mae_loss(recon, target) -> Tensor:
    recon = _as_tensor(recon)
    target = _as_tensor(target, recon)
    _check_pair(recon, target)
    return T.tabs(recon - target).mean()


def ssim(a, b) -> Tensor:
    """Single-window SSIM from whole-image means, variances and covariance.

    Statistics are taken over every element of each sample (channels and
    pixels together); a batched input returns the batch mean.
    """
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_pair(a, b)
    if a.ndim == 4:
        axes = (1, 2, 3)
    else:
        axes = None
    mu_a = a.mean(axis=axes, keepdims=True)
    mu_b = b.mean(axis=axes, keepdims=True)
    da = a - mu_a
    db = b - mu_b
    var_a = (da * da).mean(axis=axes, keepdims=True)
    var_b = (db * db).mean(axis=axes, keepdims=True)
    cov = (da * db).mean(axis=axes, keepdims=True)
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean()


def ssim_loss(a, b) -> Tensor:
    return 1.0 - ssim(a, b)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Batch mean of -log softmax(logits)[target], probabilities floored at 1e-12."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (batch, classes), got {logits.shape}", axis="rank")
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    B, K = logits.shape
    if target.shape[0] != B:
        raise DimensionError(f"{target.shape[0]} targets for a batch of {B}", axis="batch")
    if target.size and (target.min() < 0 or target.max() >= K):
        raise ContractError(f"target class out of range [0, {K})")
    probs = T.clamp_min(T.softmax(logits, axis=1), CE_FLOOR)
    picked = probs[np.arange(B), target]
    return -(T.log(picked).mean())


def combined_loss(rec_loss, cls_loss, alpha: float = 0.5):
    """alpha * reconstruction + (1 - alpha) * classification."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * rec_loss + (1.0 - alpha) * cls_loss


RECONSTRUCTION_LOSSES = {"mse": mse_loss, "mae": mae_loss, "ssim": ssim_loss}


def reconstruction_loss(name: str):
    try:
        return RECONSTRUCTION_LOSSES[name.lower()]
    except KeyError:
        raise ContractError(f"unknown reconstruction loss {name!r}; choose from {sorted(RECONSTRUCTION_LOSSES)}")
