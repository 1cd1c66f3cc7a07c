"""SSL frameworks: encoder + heads + loss + update rule behind one step interface."""

from __future__ import annotations

import copy
import enum
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
import torch
from torch import Tensor, nn

from .augment import SeriesBatch
from .encoder import EncoderConfig, ResNet1d
from .losses import (
    CovarianceMode,
    LossWeights,
    barlow_twins_loss,
    cross_correlation,
    info_nce_loss,
    normalized_mse_loss,
    tnc_loss,
    vibcreg_terms,
    _off_diagonal,
)
from .metrics import fce_metric, fd_metric
from .whitening import HeadStyle, ProjectorConfig, build_projector

logger = logging.getLogger(__name__)


class FrameworkName(str, enum.Enum):
    VIBCREG = "vibcreg"
    VICREG = "vicreg"
    VICREG_NCM = "vicreg_ncm"
    VICREG_ITERN = "vicreg_itern"
    BARLOW_TWINS = "barlow_twins"
    SIMCLR = "simclr"
    BYOL = "byol"
    SIMSIAM = "simsiam"
    TNC = "tnc"


VICREG_FAMILY = frozenset({FrameworkName.VIBCREG, FrameworkName.VICREG,
                           FrameworkName.VICREG_NCM, FrameworkName.VICREG_ITERN})


class DivergenceError(FloatingPointError):
    """A pretraining step produced a non-finite loss; no update was applied."""

    def __init__(self, breakdown: dict[str, float]):
        bad = sorted(k for k, v in breakdown.items() if not math.isfinite(v))
        super().__init__(f"non-finite loss terms {bad}; breakdown={breakdown}")
        self.breakdown = breakdown
        self.diverged_terms = bad


@dataclass(frozen=True)
class FrameworkSpec:
    """Declarative description of one SSL framework.

    ``loss_weights=None`` resolves to the defaults of the covariance mode and
    phase, so the VICReg/VIbCReg ablation specs differ only in
    ``covariance_mode`` and ``head_style``.
    """

    name: FrameworkName
    phase: str = "part1"
    projector_dim: int = 4096
    hidden_dim: int = 4096
    head_style: HeadStyle | None = None
    covariance_mode: CovarianceMode | None = None
    loss_weights: LossWeights | None = None
    nu_multiplier: float = 1.0
    temperature: float = 0.1
    bt_lambda: float = 5e-3
    target_momentum: float | None = None
    predictor_hidden_dim: int | None = None
    tnc_w: float = 0.05
    tnc_negative_band: float = 2.0
    iternorm_group_size: int = 64
    iternorm_iterations: int = 5

    @property
    def weights(self) -> LossWeights:
        base = self.loss_weights
        if base is None:
            base = LossWeights.defaults(self.covariance_mode or CovarianceMode.RAW_VICREG, self.phase)
        if self.nu_multiplier != 1.0:
            base = replace(base, nu_cov=base.nu_cov * self.nu_multiplier)
        return base

    @property
    def stop_gradient(self) -> bool:
        return self.name in (FrameworkName.BYOL, FrameworkName.SIMSIAM)


def default_spec(name: FrameworkName | str, phase: str = "part1", **overrides) -> FrameworkSpec:
    try:
        name = FrameworkName(name)
    except ValueError:
        raise ValueError(f"unknown framework {name!r}; choose from {[n.value for n in FrameworkName]}")
    kw: dict = {}
    if name is FrameworkName.VIBCREG:
        kw = dict(head_style=HeadStyle.VIBCREG, covariance_mode=CovarianceMode.NORMALIZED_VIBCREG)
    elif name is FrameworkName.VICREG:
        kw = dict(head_style=HeadStyle.VICREG, covariance_mode=CovarianceMode.RAW_VICREG)
    elif name is FrameworkName.VICREG_NCM:
        kw = dict(head_style=HeadStyle.VICREG, covariance_mode=CovarianceMode.NORMALIZED_VIBCREG)
    elif name is FrameworkName.VICREG_ITERN:
        kw = dict(head_style=HeadStyle.VICREG_ITERN, covariance_mode=CovarianceMode.RAW_VICREG)
    elif name is FrameworkName.BYOL:
        kw = dict(projector_dim=512, target_momentum=0.9)
    elif name is FrameworkName.SIMSIAM:
        kw = dict(projector_dim=2048, hidden_dim=2048, predictor_hidden_dim=512)
    kw.update(overrides)
    return FrameworkSpec(name=name, phase=phase, **kw)


@dataclass
class LossOutput:
    total: Tensor
    terms: dict[str, Tensor]
    weights: dict[str, float]
    projections: Tensor


@dataclass
class PretrainStepResult:
    total_loss: float
    term_breakdown: dict[str, float]
    weights: dict[str, float] = field(default_factory=dict)
    fd_metric: float = float("nan")
    fce_metric: float = float("nan")

    def weighted_total(self) -> float:
        return sum(self.weights[k] * v for k, v in self.term_breakdown.items())

    @classmethod
    def average(cls, results: Iterable["PretrainStepResult"]) -> "PretrainStepResult":
        results = list(results)
        n = len(results)
        keys = results[0].term_breakdown.keys()
        return cls(
            total_loss=sum(r.total_loss for r in results) / n,
            term_breakdown={k: sum(r.term_breakdown[k] for r in results) / n for k in keys},
            weights=dict(results[0].weights),
            fd_metric=sum(r.fd_metric for r in results) / n,
            fce_metric=sum(r.fce_metric for r in results) / n,
        )


def _mlp(dims: list[int], last_bn: bool = False) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(dims) - 2):
        layers += [nn.Linear(dims[i], dims[i + 1]), nn.BatchNorm1d(dims[i + 1]), nn.ReLU(inplace=True)]
    layers.append(nn.Linear(dims[-2], dims[-1], bias=not last_bn))
    if last_bn:
        layers.append(nn.BatchNorm1d(dims[-1], affine=False))
    return nn.Sequential(*layers)


def _as_input(x, dtype: torch.dtype) -> Tensor:
    values = x.values if isinstance(x, SeriesBatch) else x
    return torch.as_tensor(values, dtype=dtype)


class SSLFramework(nn.Module):
    """Base class. Subclasses implement ``compute_loss``.

    The instance owns its optimizer (set by ``configure_optimizer``); momentum
    targets are never handed to it.
    """

    def __init__(self, spec: FrameworkSpec, encoder: ResNet1d):
        super().__init__()
        self.spec = spec
        self.encoder = encoder
        self.optimizer: torch.optim.Optimizer | None = None
        self.scheduler = None

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def configure_optimizer(self, lr: float = 1e-3, weight_decay: float = 1e-5) -> torch.optim.Optimizer:
        self.optimizer = torch.optim.AdamW(self.trainable_parameters(), lr=lr, weight_decay=weight_decay)
        return self.optimizer

    @property
    def dtype(self) -> torch.dtype:
        return next(self.encoder.parameters()).dtype

    def compute_loss(self, view_a, view_b, view_neg=None) -> LossOutput:
        raise NotImplementedError

    def momentum_update(self) -> None:
        pass


class VICRegFamily(SSLFramework):
    """VICReg, VIbCReg and the two intermediate ablations."""

    def __init__(self, spec: FrameworkSpec, encoder: ResNet1d):
        super().__init__(spec, encoder)
        self.projector = build_projector(ProjectorConfig(
            input_dim=encoder.representation_dim, hidden_dim=spec.hidden_dim,
            output_dim=spec.projector_dim, head_style=spec.head_style,
            iternorm_group_size=spec.iternorm_group_size,
            iternorm_iterations=spec.iternorm_iterations))

    def compute_loss(self, view_a, view_b, view_neg=None) -> LossOutput:
        xa, xb = _as_input(view_a, self.dtype), _as_input(view_b, self.dtype)
        z = self.projector(self.encoder(xa))
        z_prime = self.projector(self.encoder(xb))
        w = self.spec.weights
        terms = vibcreg_terms(z, z_prime, w, self.spec.covariance_mode, feature_mean_similarity=True)
        weights = {"similarity": w.lambda_sim, "variance": w.mu_var, "covariance": w.nu_cov}
        total = sum(weights[k] * terms[k] for k in terms)
        return LossOutput(total, terms, weights, z)


class BarlowTwins(SSLFramework):
    def __init__(self, spec: FrameworkSpec, encoder: ResNet1d):
        super().__init__(spec, encoder)
        d = encoder.representation_dim
        self.projector = _mlp([d, spec.hidden_dim, spec.hidden_dim, spec.projector_dim])

    def compute_loss(self, view_a, view_b, view_neg=None) -> LossOutput:
        z = self.projector(self.encoder(_as_input(view_a, self.dtype)))
        z_prime = self.projector(self.encoder(_as_input(view_b, self.dtype)))
        m = cross_correlation(z, z_prime)
        terms = {"invariance": (1.0 - torch.diagonal(m)).pow(2).sum(),
                 "redundancy": _off_diagonal(m).pow(2).sum()}
        weights = {"invariance": 1.0, "redundancy": self.spec.bt_lambda}
        total = barlow_twins_loss(z, z_prime, self.spec.bt_lambda)
        return LossOutput(total, terms, weights, z)


class SimCLR(SSLFramework):
    def __init__(self, spec: FrameworkSpec, encoder: ResNet1d):
        super().__init__(spec, encoder)
        self.projector = _mlp([encoder.representation_dim, spec.hidden_dim, spec.projector_dim])

    def compute_loss(self, view_a, view_b, view_neg=None) -> LossOutput:
        z = self.projector(self.encoder(_as_input(view_a, self.dtype)))
        z_prime = self.projector(self.encoder(_as_input(view_b, self.dtype)))
        loss = info_nce_loss(z, z_prime, self.spec.temperature)
        return LossOutput(loss, {"info_nce": loss}, {"info_nce": 1.0}, z)


class SimSiam(SSLFramework):
    """Shared encoder/projector with a bottleneck predictor; targets are detached."""

    def __init__(self, spec: FrameworkSpec, encoder: ResNet1d):
        super().__init__(spec, encoder)
        d, h, p = encoder.representation_dim, spec.hidden_dim, spec.projector_dim
        self.projector = _mlp([d, h, h, p], last_bn=True)
        self.predictor = _mlp([p, spec.predictor_hidden_dim or p // 4, p])
        self.last_targets: tuple[Tensor, Tensor] | None = None

    def compute_loss(self, view_a, view_b, view_neg=None) -> LossOutput:
        z_a = self.projector(self.encoder(_as_input(view_a, self.dtype)))
        z_b = self.projector(self.encoder(_as_input(view_b, self.dtype)))
        p_a, p_b = self.predictor(z_a), self.predictor(z_b)
        target_a, target_b = z_a.detach(), z_b.detach()
        self.last_targets = (target_a, target_b)
        terms = {"similarity_ab": normalized_mse_loss(p_a, target_b),
                 "similarity_ba": normalized_mse_loss(p_b, target_a)}
        weights = {"similarity_ab": 0.5, "similarity_ba": 0.5}
        total = 0.5 * terms["similarity_ab"] + 0.5 * terms["similarity_ba"]
        return LossOutput(total, terms, weights, z_a)


class BYOL(SSLFramework):
    """Online network with predictor regressing an EMA target network."""

    def __init__(self, spec: FrameworkSpec, encoder: ResNet1d):
        super().__init__(spec, encoder)
        d, h, p = encoder.representation_dim, spec.hidden_dim, spec.projector_dim
        self.projector = _mlp([d, h, p])
        self.predictor = _mlp([p, spec.predictor_hidden_dim or h, p])
        self.target_encoder = copy.deepcopy(self.encoder)
        self.target_projector = copy.deepcopy(self.projector)
        for param in self._target_parameters():
            param.requires_grad_(False)

    def _target_parameters(self):
        yield from self.target_encoder.parameters()
        yield from self.target_projector.parameters()

    def compute_loss(self, view_a, view_b, view_neg=None) -> LossOutput:
        xa, xb = _as_input(view_a, self.dtype), _as_input(view_b, self.dtype)
        z_a = self.projector(self.encoder(xa))
        z_b = self.projector(self.encoder(xb))
        p_a, p_b = self.predictor(z_a), self.predictor(z_b)
        with torch.no_grad():
            t_a = self.target_projector(self.target_encoder(xa))
            t_b = self.target_projector(self.target_encoder(xb))
        terms = {"similarity_ab": normalized_mse_loss(p_a, t_b),
                 "similarity_ba": normalized_mse_loss(p_b, t_a)}
        weights = {"similarity_ab": 0.5, "similarity_ba": 0.5}
        total = 0.5 * terms["similarity_ab"] + 0.5 * terms["similarity_ba"]
        return LossOutput(total, terms, weights, z_a)

    @torch.no_grad()
    def momentum_update(self) -> None:
        m = self.spec.target_momentum
        online = list(self.encoder.parameters()) + list(self.projector.parameters())
        for t, o in zip(self._target_parameters(), online):
            t.mul_(m).add_(o.detach(), alpha=1.0 - m)


class TNC(SSLFramework):
    """Temporal neighborhood coding: a discriminator on representation pairs."""

    def __init__(self, spec: FrameworkSpec, encoder: ResNet1d):
        super().__init__(spec, encoder)
        d = encoder.representation_dim
        self.discriminator = nn.Sequential(
            nn.Linear(2 * d, 4 * d), nn.ReLU(inplace=True), nn.Dropout(0.5), nn.Linear(4 * d, 1))

    def compute_loss(self, view_a, view_b, view_neg=None) -> LossOutput:
        if view_neg is None:
            raise ValueError("TNC needs reference, positive and negative windows")
        ref = self.encoder(_as_input(view_a, self.dtype))
        pos = self.encoder(_as_input(view_b, self.dtype))
        neg = self.encoder(_as_input(view_neg, self.dtype))
        d_pos = self.discriminator(torch.cat([ref, pos], dim=1)).squeeze(1)
        d_neg = self.discriminator(torch.cat([ref, neg], dim=1)).squeeze(1)
        loss = tnc_loss(d_pos, d_neg, self.spec.tnc_w)
        return LossOutput(loss, {"tnc": loss}, {"tnc": 1.0}, ref)


_FRAMEWORK_CLASSES: dict[FrameworkName, type[SSLFramework]] = {
    FrameworkName.VIBCREG: VICRegFamily,
    FrameworkName.VICREG: VICRegFamily,
    FrameworkName.VICREG_NCM: VICRegFamily,
    FrameworkName.VICREG_ITERN: VICRegFamily,
    FrameworkName.BARLOW_TWINS: BarlowTwins,
    FrameworkName.SIMCLR: SimCLR,
    FrameworkName.BYOL: BYOL,
    FrameworkName.SIMSIAM: SimSiam,
    FrameworkName.TNC: TNC,
}


def build_framework(spec: FrameworkSpec | str, enc_cfg: EncoderConfig | None = None,
                    lr: float = 1e-3, weight_decay: float = 1e-5) -> SSLFramework:
    """Instantiate a framework with a fresh encoder and its own AdamW optimizer."""
    if not isinstance(spec, FrameworkSpec):
        spec = default_spec(spec)
    try:
        cls = _FRAMEWORK_CLASSES[FrameworkName(spec.name)]
    except (KeyError, ValueError):
        raise ValueError(f"unknown framework {spec.name!r}")
    framework = cls(spec, ResNet1d(enc_cfg or EncoderConfig()))
    framework.configure_optimizer(lr, weight_decay)
    return framework


def pretrain_step(framework: SSLFramework, view_a, view_b, view_neg=None) -> PretrainStepResult:
    """One optimizer update on a pair of views (plus negatives for TNC).

    Raises DivergenceError without touching the weights if any loss term is
    non-finite.
    """
    if framework.optimizer is None:
        framework.configure_optimizer()
    framework.train()
    out = framework.compute_loss(view_a, view_b, view_neg)
    breakdown = {k: float(v.detach()) for k, v in out.terms.items()}
    total = float(out.total.detach())
    if not math.isfinite(total) or not all(math.isfinite(v) for v in breakdown.values()):
        raise DivergenceError({**breakdown, "total": total})
    framework.optimizer.zero_grad(set_to_none=False)
    out.total.backward()
    framework.optimizer.step()
    if framework.scheduler is not None:
        framework.scheduler.step()
    framework.momentum_update()
    z = out.projections.detach().double()
    return PretrainStepResult(
        total_loss=total, term_breakdown=breakdown, weights=out.weights,
        fd_metric=fd_metric(z), fce_metric=fce_metric(z))


def _sample_triplets(length: int, crop_length: int, count: int, rng: np.random.Generator,
                     negative_band: float) -> tuple[np.ndarray, np.ndarray]:
    if crop_length >= length:
        raise ValueError(f"crop length {crop_length} leaves no room for a negative in a series of {length}")
    n = length - crop_length
    sigma = crop_length / 4.0
    band = negative_band * sigma
    if n <= band:
        raise ValueError(
            f"series of length {length} too short for crop {crop_length}: no offset lies outside the "
            f"+-{band:g} band around any reference")
    ref = rng.integers(0, n + 1, size=count)
    pos = np.clip(np.rint(rng.normal(ref, sigma)), 0, n).astype(np.int64)
    left = np.maximum(0, np.ceil(ref - band)).astype(np.int64)            # offsets 0..left-1
    right_start = np.floor(ref + band).astype(np.int64) + 1
    right = np.maximum(0, n - right_start + 1)
    total = left + right
    keep = total > 0
    if not keep.all():
        warnings.warn(f"skipped {int((~keep).sum())} TNC samples with no valid negative", RuntimeWarning)
    u = (rng.random(count) * np.maximum(total, 1)).astype(np.int64)
    neg = np.where(u < left, u, right_start + (u - left))
    return np.stack([ref, pos, neg], axis=1), keep


def tnc_sample_triplets(series, crop_length: int, count: int, seed=None,
                        negative_band: float = 2.0) -> np.ndarray:
    """Sample (reference, positive, negative) window start offsets.

    The reference start is uniform. The positive start is drawn from
    Normal(reference, crop_length / 4), rounded and clipped to the valid range.
    The negative start is uniform over valid offsets farther than
    ``negative_band`` standard deviations from the reference. References that
    leave no room for a negative are dropped with a warning.

    ``series`` may be an array (last axis is time) or a length.
    """
    length = int(series) if np.isscalar(series) else int(np.shape(series)[-1])
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    triples, keep = _sample_triplets(length, crop_length, count, rng, negative_band)
    return triples[keep]


def make_tnc_views(x: SeriesBatch, crop_length: int, rng: np.random.Generator,
                   negative_band: float = 2.0) -> tuple[SeriesBatch, SeriesBatch, SeriesBatch]:
    """Reference, neighbor and non-neighbor windows, one triple per series."""
    triples, keep = _sample_triplets(x.length, crop_length, len(x), rng, negative_band)
    rows = np.flatnonzero(keep)
    triples = triples[keep]
    idx = np.arange(crop_length)
    views = []
    for k in range(3):
        win = x.values[rows[:, None], :, (triples[:, k][:, None] + idx[None, :])]  # B x L' x C
        views.append(SeriesBatch(np.ascontiguousarray(win.transpose(0, 2, 1))))
    return views[0], views[1], views[2]
