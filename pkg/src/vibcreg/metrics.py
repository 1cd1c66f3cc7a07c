"""Feature-decorrelation (FD) and feature-component-expressiveness (FcE) metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .losses import CovarianceMode, covariance_matrix


@dataclass(frozen=True)
class MetricPair:
    fd: float
    fce: float


def _as_tensor(z) -> torch.Tensor:
    if isinstance(z, torch.Tensor):
        return z.detach()
    return torch.as_tensor(np.asarray(z, dtype=np.float64))


def fd_metric(z) -> float:
    """Mean absolute off-diagonal entry of the normalized covariance, over F**2 slots."""
    c = covariance_matrix(_as_tensor(z), CovarianceMode.NORMALIZED_VIBCREG)
    f = c.shape[0]
    off = c.abs().sum() - c.diagonal().abs().sum()
    return float(off / (f * f))


def fce_metric(z) -> float:
    """Mean over features of the per-feature std along the batch."""
    t = _as_tensor(z)
    if t.dim() != 2 or t.shape[0] < 2:
        raise ValueError("FcE metric needs a B x F matrix with B >= 2")
    return float(t.std(dim=0, unbiased=True).mean())


def metric_pair(z) -> MetricPair:
    return MetricPair(fd=fd_metric(z), fce=fce_metric(z))
