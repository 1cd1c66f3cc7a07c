"""View generation for time series: random crop, amplitude resize, vertical shift."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import Callable, Sequence

import numpy as np

from .encoder import MIN_LENGTH

CROP = "crop"
AMPLITUDE = "amplitude_resize"
VSHIFT = "vertical_shift"

# Augmentations active in each phase of the evaluation protocol. Test-time
# feature extraction never augments.
PHASE_AUGMENTATIONS: dict[str, frozenset[str]] = {
    "part1_pretrain": frozenset({CROP, AMPLITUDE, VSHIFT}),
    "part1_linear_eval": frozenset({AMPLITUDE, VSHIFT}),
    "part2_pretrain": frozenset({CROP, AMPLITUDE}),
    "part2_eval": frozenset(),
    "test": frozenset(),
}

PTBXL_CROP_LENGTH = 250


class ScheduleError(ValueError):
    pass


@dataclass
class SeriesBatch:
    """A batch of (possibly multivariate) series.

    ``values`` is B x C x L. ``labels`` is a length-B integer vector for
    single-label data or a B x K binary matrix for multi-label data.
    """

    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim == 2:
            values = values[:, None, :]
        if values.ndim != 3:
            raise ValueError(f"values must be B x C x L, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("series values must be finite")
        self.values = values
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if len(self.labels) != len(values):
                raise ValueError(f"{len(self.labels)} labels for {len(values)} series")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def length(self) -> int:
        return self.values.shape[2]

    @property
    def multilabel(self) -> bool:
        return self.labels is not None and self.labels.ndim == 2

    def subset(self, idx) -> "SeriesBatch":
        labels = None if self.labels is None else self.labels[idx]
        return SeriesBatch(self.values[idx], labels)

    def with_values(self, values: np.ndarray) -> "SeriesBatch":
        return SeriesBatch(values, self.labels)


class AmplitudeMode(str, enum.Enum):
    UNIFORM_P1 = "uniform_p1"
    GAUSSIAN_P2 = "gaussian_p2"


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation hyperparameters.

    ``amplitude_center`` only matters in GAUSSIAN_P2 mode, where the multiplier
    is drawn from Normal(amplitude_center, alpha_rar). The default of 0 is the
    distribution as printed for the part-2 protocol; set it to 1 for a
    multiplier centred on the identity.
    """

    crop_length: int | None = None
    alpha_rar: float = 0.3
    beta_rvs: float = 0.5
    amplitude_mode: AmplitudeMode = AmplitudeMode.UNIFORM_P1
    amplitude_center: float = 0.0
    enabled: frozenset[str] = field(default_factory=lambda: PHASE_AUGMENTATIONS["part1_pretrain"])

    @classmethod
    def for_phase(cls, phase: str, crop_length: int | None = None, **overrides) -> "AugmentConfig":
        if phase.startswith("part2"):
            base = cls(crop_length=crop_length, alpha_rar=0.1,
                       amplitude_mode=AmplitudeMode.GAUSSIAN_P2, enabled=PHASE_AUGMENTATIONS[phase])
        else:
            base = cls(crop_length=crop_length, enabled=PHASE_AUGMENTATIONS[phase])
        return replace(base, **overrides)


@lru_cache(maxsize=1)
def crop_size_table() -> dict[str, dict]:
    """Per-dataset crop sizes for the 15 part-1 UCR datasets."""
    text = resources.files("vibcreg.resources").joinpath("crop_sizes.json").read_text()
    return json.loads(text)


def crop_length_for(name: str, length: int | None = None) -> int | None:
    """Tabulated crop size for ``name``; None means use the two-crop schedule."""
    if name.upper().replace("-", "") == "PTBXL":
        return PTBXL_CROP_LENGTH
    entry = crop_size_table().get(name)
    if entry is None:
        return None
    if length is not None and entry["length"] != length:
        raise ValueError(f"{name}: table length {entry['length']} != data length {length}")
    return entry["crop_size"]


def random_crop(x: SeriesBatch, crop_length: int, rng: np.random.Generator) -> SeriesBatch:
    """One uniformly placed window of ``crop_length`` per sample."""
    b, c, length = x.values.shape
    if crop_length > length:
        raise ValueError(f"crop length {crop_length} exceeds series length {length}")
    if crop_length < 1:
        raise ValueError("crop length must be positive")
    if crop_length == length:
        return x.with_values(x.values.copy())
    starts = rng.integers(0, length - crop_length + 1, size=b)
    idx = starts[:, None] + np.arange(crop_length)[None, :]
    out = np.take_along_axis(x.values, np.broadcast_to(idx[:, None, :], (b, c, crop_length)), axis=2)
    return x.with_values(out)


def amplitude_multipliers(n: int, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if AmplitudeMode(cfg.amplitude_mode) is AmplitudeMode.UNIFORM_P1:
        return rng.uniform(1.0 - cfg.alpha_rar, 1.0 + cfg.alpha_rar, size=n)
    # alpha_rar is used as the standard deviation
    return rng.normal(cfg.amplitude_center, cfg.alpha_rar, size=n)


def random_amplitude_resize(x: SeriesBatch, cfg: AugmentConfig, rng: np.random.Generator) -> SeriesBatch:
    """Scale each whole series (all channels, all steps) by one random multiplier."""
    m = amplitude_multipliers(len(x), cfg, rng).astype(x.values.dtype)
    return x.with_values(x.values * m[:, None, None])


def random_vertical_shift(x: SeriesBatch, cfg: AugmentConfig, rng: np.random.Generator,
                          reference: SeriesBatch | None = None) -> SeriesBatch:
    """Add s ~ U(-a, a) with a = beta_rvs * Std(reference).

    ``reference`` is the series before any augmentation (defaults to ``x``).
    Each channel gets its own shift, scaled by that channel's std.
    """
    ref = x if reference is None else reference
    if len(ref) != len(x) or ref.channels != x.channels:
        raise ValueError("reference batch does not match the batch being shifted")
    alpha = cfg.beta_rvs * ref.values.std(axis=2)
    s = rng.uniform(-1.0, 1.0, size=alpha.shape) * alpha
    return x.with_values(x.values + s[:, :, None].astype(x.values.dtype))


def augment(x: SeriesBatch, cfg: AugmentConfig, rng: np.random.Generator,
            crop_length: int | None = None) -> SeriesBatch:
    """Apply the enabled augmentations in order crop -> resize -> shift."""
    original = x
    crop_length = crop_length if crop_length is not None else cfg.crop_length
    if CROP in cfg.enabled and crop_length is not None:
        x = random_crop(x, crop_length, rng)
    if AMPLITUDE in cfg.enabled:
        x = random_amplitude_resize(x, cfg, rng)
    if VSHIFT in cfg.enabled:
        x = random_vertical_shift(x, cfg, rng, reference=original)
    return x


def make_view_pair(x: SeriesBatch, cfg: AugmentConfig, rng: np.random.Generator,
                   crop_length: int | None = None) -> tuple[SeriesBatch, SeriesBatch]:
    return augment(x, cfg, rng, crop_length), augment(x, cfg, rng, crop_length)


def ratio_crop_length(length: int, ratio: float) -> int:
    return int(math.ceil(ratio * length))


def two_crop_schedule(
    x: SeriesBatch,
    step_fn: Callable,
    rng: np.random.Generator,
    cfg: AugmentConfig | None = None,
    ratios: Sequence[float] = (0.5, 1.0),
    min_length: int = MIN_LENGTH,
    dataset_name: str = "<unnamed>",
):
    """Run one update per crop ratio on the same batch and average the results.

    ``step_fn(view_a, view_b)`` must perform the optimizer update and return a
    result object whose type provides an ``average`` classmethod.
    """
    if x.length < 2:
        raise ScheduleError(f"{dataset_name}: series of length {x.length} cannot be cropped")
    cfg = cfg or AugmentConfig.for_phase("part2_pretrain")
    lengths = [ratio_crop_length(x.length, r) for r in ratios]
    too_short = [n for n in lengths if n < min_length]
    if too_short:
        raise ScheduleError(
            f"{dataset_name}: crop length {too_short[0]} (series length {x.length}) is below "
            f"the encoder minimum of {min_length}")
    results = []
    for crop_length in lengths:
        view_a, view_b = make_view_pair(x, cfg, rng, crop_length)
        results.append(step_fn(view_a, view_b))
    return type(results[0]).average(results)
