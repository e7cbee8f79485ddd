import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .tissue import TissueMap

logger = logging.getLogger(__name__)

DEFAULT_ECHO_COUNT = 8
DEFAULT_TE_RANGE_MS = (3.15, 37.45)


def default_te_list() -> List[float]:
    """Uniformly spaced echo times over the acquisition range (4.9 ms apart)."""
    first, last = DEFAULT_TE_RANGE_MS
    return np.linspace(first, last, DEFAULT_ECHO_COUNT).tolist()


def _check_echo_times(te_ms: Sequence[float]):
    if len(te_ms) == 0:
        raise ValueError("Echo time list is empty")
    if not all(math.isfinite(te) and te > 0 for te in te_ms):
        raise ValueError(f"Echo times must be finite and positive: {list(te_ms)}")
    if any(b <= a for a, b in zip(te_ms, te_ms[1:])):
        raise ValueError(f"Echo times must be strictly increasing: {list(te_ms)}")


@dataclass
class EchoSeries:
    images: np.ndarray  # (N, H, W)
    te_ms: List[float]
    mask: np.ndarray  # (H, W) uint8, shared by every echo
    subject_id: str = ''
    slice_id: int = 0
    noise_sigma: float = 0.0
    pixel_spacing: tuple = field(default=(1.0, 1.0))

    def __post_init__(self):
        _check_echo_times(self.te_ms)
        if self.images.ndim != 3 or self.images.shape[0] != len(self.te_ms):
            raise ValueError(
                f"Expected {len(self.te_ms)} images of shape HxW, got array of shape {self.images.shape}"
            )
        if self.mask.shape != self.images.shape[1:]:
            raise ValueError(f"Mask shape {self.mask.shape} does not match images {self.images.shape[1:]}")
        if not np.all(np.isfinite(self.images)) or self.images.min() < 0:
            raise ValueError("Echo intensities must be finite and non-negative")

    @property
    def echo_count(self) -> int:
        return len(self.te_ms)

    def echo(self, index: int) -> np.ndarray:
        """Image at a 1-based echo index."""
        return self.images[index - 1]


def simulate_echo(tissue: TissueMap, te_ms: float, noise_sigma: float, seed: int) -> np.ndarray:
    """Mono-exponential T2* decay S0 * exp(-TE / T2*) with additive Gaussian noise.

    Noise is added inside the body only so the background stays exactly zero,
    which is what background exclusion during normalization relies on.
    """
    if not (math.isfinite(te_ms) and math.isfinite(noise_sigma)):
        raise ValueError(f"Non-finite simulation input: te_ms={te_ms}, noise_sigma={noise_sigma}")
    if te_ms <= 0:
        raise ValueError(f"Echo time must be positive, got {te_ms}")
    if noise_sigma < 0:
        raise ValueError(f"Noise sigma must be non-negative, got {noise_sigma}")

    t2star = tissue.t2star_grid
    decay = np.exp(-np.divide(te_ms, t2star, out=np.zeros_like(t2star), where=t2star > 0))
    signal = tissue.s0_grid * decay

    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, noise_sigma, size=signal.shape)
        body = tissue.s0_grid > 0
        signal = np.where(body, np.clip(signal + noise, 0.0, None), 0.0)
    return signal


def _echo_seed(seed: int, echo_index: int) -> int:
    return int(np.random.SeedSequence([seed, echo_index]).generate_state(1)[0])


def make_series(tissue: TissueMap, te_list: Sequence[float], noise_sigma: float, seed: int,
                subject_id: str = '', slice_id: int = 0, pixel_spacing=(1.0, 1.0)) -> EchoSeries:
    _check_echo_times(te_list)
    images = np.stack([
        simulate_echo(tissue, te, noise_sigma, _echo_seed(seed, index))
        for index, te in enumerate(te_list, start=1)
    ])
    return EchoSeries(
        images=images,
        te_ms=[float(te) for te in te_list],
        mask=tissue.placenta_mask,
        subject_id=subject_id,
        slice_id=slice_id,
        noise_sigma=float(noise_sigma),
        pixel_spacing=tuple(pixel_spacing),
    )


def fit_t2star(series: EchoSeries) -> np.ndarray:
    """Per-pixel log-linear least-squares T2* estimate (0 where any echo is non-positive)."""
    te = np.asarray(series.te_ms, dtype=np.float64)
    images = series.images.reshape(series.echo_count, -1)
    valid = np.all(images > 0, axis=0)

    logs = np.log(np.where(valid, images, 1.0))
    te_centered = te - te.mean()
    slope = te_centered @ (logs - logs.mean(axis=0)) / np.sum(te_centered ** 2)

    t2star = np.zeros(images.shape[1], dtype=np.float64)
    decaying = valid & (slope < 0)
    t2star[decaying] = -1.0 / slope[decaying]
    return t2star.reshape(series.images.shape[1:])
