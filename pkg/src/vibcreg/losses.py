"""Loss terms for VIbCReg and the baseline SSL frameworks.

Every function here is a pure function of its tensor inputs, differentiable
with autograd and agnostic to dtype (tests run them in float64, training in
float32).
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

# Added to column / row norms so a degenerate (constant) feature does not
# turn into NaN.
NORM_STABILIZER = 1e-12


class ContractError(ValueError):
    """Raised when inputs violate a documented precondition."""


class CovarianceMode(str, enum.Enum):
    RAW_VICREG = "raw_vicreg"
    NORMALIZED_VIBCREG = "normalized_vibcreg"


@dataclass(frozen=True)
class LossWeights:
    """Weights of the invariance / variance / covariance objective.

    ``gamma`` is the target per-feature standard deviation and ``epsilon``
    keeps the square root in the variance hinge away from zero.
    """

    lambda_sim: float = 25.0
    mu_var: float = 25.0
    nu_cov: float = 200.0
    gamma: float = 1.0
    epsilon: float = 1e-4

    def __post_init__(self) -> None:
        if self.epsilon <= 0 or self.gamma <= 0:
            raise ContractError("gamma and epsilon must be positive")
        if min(self.lambda_sim, self.mu_var, self.nu_cov) < 0:
            raise ContractError("loss weights must be nonnegative")

    @classmethod
    def defaults(cls, mode: CovarianceMode, phase: str = "part1") -> "LossWeights":
        """Default weights for a covariance mode and evaluation phase."""
        if CovarianceMode(mode) is CovarianceMode.RAW_VICREG:
            return cls(nu_cov=1.0)
        return cls(nu_cov=200.0 if phase == "part1" else 100.0)


def _check_batch(z: Tensor, name: str = "z", min_rows: int = 2) -> None:
    if z.dim() != 2:
        raise ContractError(f"{name} must be a B x F matrix, got shape {tuple(z.shape)}")
    if z.shape[0] < min_rows:
        raise ContractError(f"{name} needs at least {min_rows} rows, got {z.shape[0]}")


def _check_pair(z: Tensor, z_prime: Tensor, min_rows: int = 2) -> None:
    _check_batch(z, "z", min_rows)
    _check_batch(z_prime, "z_prime", min_rows)
    if z.shape != z_prime.shape:
        raise ContractError(f"shape mismatch: {tuple(z.shape)} vs {tuple(z_prime.shape)}")


def _safe_norm(x: Tensor, dim: int) -> Tensor:
    # sqrt of a clamped sum of squares keeps the backward pass finite at zero
    sq = x.pow(2).sum(dim=dim, keepdim=True)
    if bool((sq == 0).any()):
        warnings.warn("zero-norm vector encountered; using stabilized norm", RuntimeWarning, stacklevel=3)
    return sq.clamp_min(torch.finfo(x.dtype).tiny).sqrt() + NORM_STABILIZER


def similarity_loss(z: Tensor, z_prime: Tensor, feature_mean: bool = False) -> Tensor:
    """Invariance term: mean over rows of the squared distance between paired rows.

    With ``feature_mean=True`` the squared distance is additionally averaged over
    the F features, which is the ``mse_loss`` normalization the training loop
    uses (it keeps the term on the same scale as the variance hinge when F is
    in the thousands).
    """
    _check_pair(z, z_prime, min_rows=1)
    per_row = (z - z_prime).pow(2).sum(dim=1)
    loss = per_row.mean()
    if feature_mean:
        loss = loss / z.shape[1]
    return loss


def variance_loss(z: Tensor, w: LossWeights | None = None) -> Tensor:
    """Hinge on the per-feature standard deviation (unbiased variance)."""
    w = w or LossWeights()
    _check_batch(z)
    std = torch.sqrt(z.var(dim=0, unbiased=True) + w.epsilon)
    return F.relu(w.gamma - std).mean()


def covariance_matrix(z: Tensor, mode: CovarianceMode = CovarianceMode.NORMALIZED_VIBCREG) -> Tensor:
    """F x F covariance of the columns of ``z``.

    RAW_VICREG is the unbiased covariance. NORMALIZED_VIBCREG centers each
    column and scales it to unit l2 norm along the batch before the product,
    so every entry lies in [-1, 1] and the diagonal is 1.
    """
    _check_batch(z)
    zc = z - z.mean(dim=0, keepdim=True)
    if CovarianceMode(mode) is CovarianceMode.RAW_VICREG:
        return zc.T @ zc / (z.shape[0] - 1)
    zn = zc / _safe_norm(zc, dim=0)
    return zn.T @ zn


def _off_diagonal(c: Tensor) -> Tensor:
    n = c.shape[0]
    return c.flatten()[:-1].view(n - 1, n + 1)[:, 1:].flatten()


def fd_loss(z: Tensor, mode: CovarianceMode = CovarianceMode.NORMALIZED_VIBCREG) -> Tensor:
    """Feature-decorrelation loss: sum of squared off-diagonal covariances.

    Divided by F for RAW_VICREG and by F**2 for NORMALIZED_VIBCREG.
    """
    c = covariance_matrix(z, mode)
    n = c.shape[0]
    if n == 1:
        return c.sum() * 0.0
    total = _off_diagonal(c).pow(2).sum()
    if CovarianceMode(mode) is CovarianceMode.RAW_VICREG:
        return total / n
    return total / (n * n)


def vibcreg_terms(
    z: Tensor,
    z_prime: Tensor,
    w: LossWeights,
    mode: CovarianceMode,
    feature_mean_similarity: bool = False,
) -> dict[str, Tensor]:
    """Unweighted terms of the objective, keyed by name."""
    _check_pair(z, z_prime)
    return {
        "similarity": similarity_loss(z, z_prime, feature_mean=feature_mean_similarity),
        "variance": variance_loss(z, w) + variance_loss(z_prime, w),
        "covariance": fd_loss(z, mode) + fd_loss(z_prime, mode),
    }


def vibcreg_total_loss(
    z: Tensor,
    z_prime: Tensor,
    w: LossWeights | None = None,
    mode: CovarianceMode = CovarianceMode.NORMALIZED_VIBCREG,
    feature_mean_similarity: bool = False,
) -> Tensor:
    """lambda * s(Z, Z') + mu * (v(Z) + v(Z')) + nu * (c(Z) + c(Z')).

    No stop-gradient: both branches receive gradients.
    """
    w = w or LossWeights()
    terms = vibcreg_terms(z, z_prime, w, mode, feature_mean_similarity)
    return w.lambda_sim * terms["similarity"] + w.mu_var * terms["variance"] + w.nu_cov * terms["covariance"]


def _standardize(z: Tensor) -> Tensor:
    zc = z - z.mean(dim=0, keepdim=True)
    var = zc.pow(2).mean(dim=0, keepdim=True)
    if bool((var == 0).any()):
        warnings.warn("zero-variance column in Barlow Twins input", RuntimeWarning, stacklevel=3)
    return zc / (var.clamp_min(torch.finfo(z.dtype).tiny).sqrt() + NORM_STABILIZER)


def cross_correlation(z: Tensor, z_prime: Tensor) -> Tensor:
    """Cross-correlation of batch-standardized columns (population std)."""
    _check_pair(z, z_prime)
    return _standardize(z).T @ _standardize(z_prime) / z.shape[0]


def barlow_twins_loss(z: Tensor, z_prime: Tensor, lam: float = 5e-3) -> Tensor:
    m = cross_correlation(z, z_prime)
    on_diag = (1.0 - torch.diagonal(m)).pow(2).sum()
    if m.shape[0] == 1:
        return on_diag
    return on_diag + lam * _off_diagonal(m).pow(2).sum()


def info_nce_loss(z: Tensor, z_prime: Tensor, tau: float = 0.1) -> Tensor:
    """Symmetric NT-Xent over the 2B views.

    Each of the 2B rows is an anchor; its positive is the paired view and the
    remaining 2B - 2 rows are negatives.
    """
    if z.dim() == 2 and z.shape[0] == 1:
        raise ContractError("InfoNCE needs B >= 2: a single pair has no negatives")
    _check_pair(z, z_prime)
    if tau <= 0:
        raise ContractError("tau must be positive")
    b = z.shape[0]
    h = torch.cat([z, z_prime], dim=0)
    h = h / _safe_norm(h, dim=1)
    logits = h @ h.T / tau
    self_mask = torch.eye(2 * b, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    targets = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)]).to(z.device)
    return F.cross_entropy(logits, targets)


def normalized_mse_loss(p: Tensor, z_target: Tensor) -> Tensor:
    """Mean over rows of 2 - 2 * cos(p_b, z_b); lies in [0, 4].

    The caller is responsible for detaching ``z_target``.
    """
    _check_pair(p, z_target, min_rows=1)
    pn = p / _safe_norm(p, dim=1)
    zn = z_target / _safe_norm(z_target, dim=1)
    return (2.0 - 2.0 * (pn * zn).sum(dim=1)).mean()


def tnc_loss(disc_pos: Tensor, disc_neg: Tensor, w: float = 0.05) -> Tensor:
    """Positive-unlabeled discriminator loss of TNC.

    Neighbors are label 1. Non-neighbors count as label 0 with weight 1 - w and
    as label 1 with weight w, since some of them may in fact be neighbors. The
    sum is halved as in the original TNC implementation.
    """
    if not 0.0 <= w <= 1.0:
        raise ContractError("w must lie in [0, 1]")
    ones_p = torch.ones_like(disc_pos)
    ones_n = torch.ones_like(disc_neg)
    p_loss = F.binary_cross_entropy_with_logits(disc_pos, ones_p)
    n_loss = F.binary_cross_entropy_with_logits(disc_neg, torch.zeros_like(disc_neg))
    n_loss_u = F.binary_cross_entropy_with_logits(disc_neg, ones_n)
    return (p_loss + w * n_loss_u + (1.0 - w) * n_loss) / 2.0
