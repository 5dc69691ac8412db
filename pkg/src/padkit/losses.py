"""Loss terms for binary, multi-task and adversarial-invariance PAD training.

All functions accept tensors (or array-likes) and return a scalar tensor, so
they can be used both for optimisation and for plain evaluation.  Batch
reduction is always the mean; the squared-error terms sum over the feature
dimensions of each sample first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

EPS = 1e-7


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.get_default_dtype())


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(EPS, 1.0 - EPS)


def bce(y, p) -> torch.Tensor:
    """Binary cross-entropy of attack probabilities ``p`` against labels ``y``."""
    p = _clamp(_t(p))
    y = _t(y).to(p.dtype)
    if y.shape != p.shape:
        raise ValueError(f"label shape {tuple(y.shape)} != probability shape {tuple(p.shape)}")
    per_sample = -(y * torch.log(p) + (1 - y) * torch.log(1 - p))
    return per_sample.mean()


def ce(y, p) -> torch.Tensor:
    """Categorical cross-entropy.

    ``p`` has shape ``(M,)`` or ``(B, M)``.  ``y`` is either one-hot with the
    same shape, or integer class indices of shape ``p.shape[:-1]``.
    """
    p = _t(p)
    y = _t(y)
    if not torch.is_floating_point(y):
        if y.shape != p.shape[:-1]:
            raise ValueError(f"index labels {tuple(y.shape)} do not match probabilities {tuple(p.shape)}")
        y = torch.nn.functional.one_hot(y.long(), p.shape[-1]).to(p.dtype)
    if y.shape != p.shape:
        raise ValueError(f"one-hot length {tuple(y.shape)} != probability length {tuple(p.shape)}")
    per_sample = -(y * torch.log(_clamp(p))).sum(dim=-1)
    return per_sample.mean()


def loss_multi(y1, p1, y2, p2) -> torch.Tensor:
    return bce(y1, p1) + ce(y2, p2)


def mse(x, y) -> torch.Tensor:
    """Squared error summed over feature dims; 1-D inputs are one sample."""
    x = _t(x)
    y = _t(y).to(x.dtype)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    sq = (x - y) ** 2
    if sq.dim() <= 1:
        return sq.sum()
    return sq.flatten(1).sum(dim=1).mean()


def loss_adv(e1, e2, e1_prime, e2_prime) -> torch.Tensor:
    """Negated disentangler reconstruction error (always <= 0).

    ``e1_prime`` is the reconstruction of ``e1`` (predicted from ``e2``) and
    ``e2_prime`` the reconstruction of ``e2`` (predicted from ``e1``).  The
    main network minimises this, i.e. it makes the reconstructions fail.
    """
    return -mse(e1, e1_prime) - mse(e2, e2_prime)


def adversary_objective(e1, e2, e1_prime, e2_prime) -> torch.Tensor:
    """What the disentanglers minimise: their own reconstruction error."""
    return mse(e1, e1_prime) + mse(e2, e2_prime)


def loss_class_bc(y, p, x, x_recon, alpha: float) -> torch.Tensor:
    return bce(y, p) + alpha * mse(x, x_recon)


def loss_class_mt(y1, p1, y2, p2, x, x_recon, alpha: float) -> torch.Tensor:
    return loss_multi(y1, p1, y2, p2) + alpha * mse(x, x_recon)


@dataclass(frozen=True)
class AlphaSchedule:
    alpha0: float = 0.025
    step: float = 0.025
    cap: Optional[float] = None

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("alpha step must be non-negative")


def alpha_at(schedule: AlphaSchedule, epoch: int) -> float:
    """Reconstruction weight used during ``epoch`` (0-based)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    # (epoch + 1) * step keeps the default schedule exact: 0.025 * (e + 1)
    if schedule.alpha0 == schedule.step:
        value = schedule.step * (epoch + 1)
    else:
        value = schedule.alpha0 + schedule.step * epoch
    if schedule.cap is not None:
        value = min(value, schedule.cap)
    return value
