"""IterNorm whitening and the projector heads built on top of it."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .losses import ContractError


def newton_whitening(x: Tensor, group_size: int, num_iterations: int = 5, eps: float = 1e-5):
    """Whiten the columns of ``x`` (B x F) group by group.

    The group covariance is divided by its trace so its eigenvalues lie in
    (0, 1], then ``num_iterations`` Newton steps

        P <- 1.5 P - 0.5 P^3 Sigma_N

    starting from the identity approximate Sigma_N^{-1/2}. The whitening matrix
    is P / sqrt(trace).

    Returns:
        (output B x F, group means G x d x 1, whitening matrices G x d x d)
    """
    b, f = x.shape
    if f % group_size:
        raise ContractError(f"feature dim {f} is not divisible by group size {group_size}")
    g = f // group_size
    # G x d x B
    xg = x.T.reshape(g, group_size, b)
    mean = xg.mean(dim=-1, keepdim=True)
    xc = xg - mean
    eye = torch.eye(group_size, dtype=x.dtype, device=x.device).expand(g, group_size, group_size)
    sigma = torch.baddbmm(eye, xc, xc.transpose(1, 2), beta=eps, alpha=1.0 / b)
    if not bool(torch.isfinite(sigma).all()):
        raise FloatingPointError("non-finite covariance in IterNorm input")
    trace = sigma.diagonal(dim1=1, dim2=2).sum(-1).view(g, 1, 1)
    sigma_n = sigma / trace
    p = eye
    for _ in range(num_iterations):
        p = torch.baddbmm(p, torch.matrix_power(p, 3), sigma_n, beta=1.5, alpha=-0.5)
    wm = p / trace.sqrt()
    out = wm.bmm(xc).reshape(f, b).T
    return out, mean, wm


class IterNorm(nn.Module):
    """Iterative normalization layer for B x F inputs.

    No affine transform follows the whitening, so the decorrelated output
    reaches the loss unchanged. Running mean and whitening matrix are
    exponential moving averages used in eval mode.
    """

    def __init__(self, num_features: int, group_size: int = 64, num_iterations: int = 5,
                 momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        group_size = min(group_size, num_features)
        if num_features % group_size:
            raise ContractError(f"num_features={num_features} not divisible by group_size={group_size}")
        if not 0.0 < momentum < 1.0:
            raise ContractError("momentum must be in (0, 1)")
        self.num_features = num_features
        self.group_size = group_size
        self.num_groups = num_features // group_size
        self.num_iterations = num_iterations
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", torch.zeros(self.num_groups, group_size, 1))
        self.register_buffer(
            "running_whitening", torch.eye(group_size).repeat(self.num_groups, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 2 or x.shape[1] != self.num_features:
            raise ContractError(f"expected B x {self.num_features} input, got {tuple(x.shape)}")
        if self.training:
            if x.shape[0] < 2:
                raise ContractError("IterNorm needs a batch of at least 2 in training mode")
            out, mean, wm = newton_whitening(x, self.group_size, self.num_iterations, self.eps)
            with torch.no_grad():
                self.running_mean.lerp_(mean.detach().to(self.running_mean.dtype), self.momentum)
                self.running_whitening.lerp_(wm.detach().to(self.running_whitening.dtype), self.momentum)
            return out
        b = x.shape[0]
        xg = x.T.reshape(self.num_groups, self.group_size, b)
        out = self.running_whitening.to(x.dtype).bmm(xg - self.running_mean.to(x.dtype))
        return out.reshape(self.num_features, b).T

    def extra_repr(self) -> str:
        return (f"{self.num_features}, group_size={self.group_size}, "
                f"T={self.num_iterations}, momentum={self.momentum}")


def iternorm_forward(x: Tensor, state: IterNorm) -> Tensor:
    """Functional alias: apply ``state`` in whatever mode it is in."""
    return state(x)


class HeadStyle(str, enum.Enum):
    VIBCREG = "vibcreg"
    VICREG = "vicreg"
    VICREG_ITERN = "vicreg_itern"
    VICREG_NCM = "vicreg_ncm"

    @property
    def uses_iternorm(self) -> bool:
        return self in (HeadStyle.VIBCREG, HeadStyle.VICREG_ITERN)


@dataclass(frozen=True)
class ProjectorConfig:
    input_dim: int
    hidden_dim: int = 4096
    output_dim: int = 4096
    head_style: HeadStyle = HeadStyle.VIBCREG
    iternorm_group_size: int = 64
    iternorm_iterations: int = 5
    iternorm_momentum: float = 0.1


def build_projector(cfg: ProjectorConfig) -> nn.Sequential:
    """(Linear-BN-ReLU) x 2 followed by Linear, plus IterNorm for whitened styles."""
    style = HeadStyle(cfg.head_style)
    layers: list[nn.Module] = [
        nn.Linear(cfg.input_dim, cfg.hidden_dim),
        nn.BatchNorm1d(cfg.hidden_dim),
        nn.ReLU(inplace=True),
        nn.Linear(cfg.hidden_dim, cfg.hidden_dim),
        nn.BatchNorm1d(cfg.hidden_dim),
        nn.ReLU(inplace=True),
        nn.Linear(cfg.hidden_dim, cfg.output_dim),
    ]
    if style.uses_iternorm:
        layers.append(IterNorm(cfg.output_dim, cfg.iternorm_group_size,
                               cfg.iternorm_iterations, cfg.iternorm_momentum))
    return nn.Sequential(*layers)
