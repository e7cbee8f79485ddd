import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

VIEW_SIZE = 256
MIN_SLICE_SIZE = 64
AUGMENT_OPERATIONS = ('hflip', 'vflip', 'jitter')


@dataclass(frozen=True)
class LocationRecord:
    """Crop rectangle of a local view in source-slice pixel coordinates."""
    top: int
    left: int
    height: int
    width: int
    source_height: int
    source_width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"Empty crop rectangle: {self}")
        if self.top < 0 or self.left < 0 or self.bottom > self.source_height or self.right > self.source_width:
            raise ValueError(f"Crop rectangle outside the {self.source_height}x{self.source_width} slice: {self}")

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def area_fraction(self) -> float:
        return (self.height * self.width) / (self.source_height * self.source_width)

    def mirrored(self, horizontal: bool = False, vertical: bool = False) -> 'LocationRecord':
        top = self.source_height - self.bottom if vertical else self.top
        left = self.source_width - self.right if horizontal else self.left
        return replace(self, top=top, left=left)


@dataclass
class ViewPair:
    local: np.ndarray
    global_view: np.ndarray
    location: LocationRecord
    labels: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        if self.labels is not None:
            local_label, global_label = self.labels
            if local_label.shape != self.local.shape or global_label.shape != self.global_view.shape:
                raise ValueError("Label geometry must match its view")


def normalize(image: np.ndarray, background_mask: Optional[np.ndarray] = None,
              percentile: float = 99.5) -> np.ndarray:
    """Clip to the foreground percentile and rescale to [0, 1].

    Background defaults to pixels that are exactly zero. Percentiles use
    linear interpolation between order statistics.
    """
    image = np.asarray(image, dtype=np.float64)
    if background_mask is None:
        background_mask = image == 0
    elif background_mask.shape != image.shape:
        raise ValueError(f"Background mask shape {background_mask.shape} does not match image {image.shape}")

    foreground = image[~background_mask]
    if foreground.size == 0:
        return np.zeros_like(image)
    p = float(np.percentile(foreground, percentile))
    if p <= 0:
        return np.zeros_like(image)
    return np.clip(image, 0.0, p) / p


def _resize(array: np.ndarray, size: int, mode: str) -> np.ndarray:
    tensor = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))[None, None]
    if mode == 'bilinear':
        resized = F.interpolate(tensor, size=(size, size), mode='bilinear', align_corners=False)
    else:
        resized = F.interpolate(tensor, size=(size, size), mode='nearest')
    return resized[0, 0].numpy()


def extract_views(slice_image: np.ndarray, label: Optional[np.ndarray] = None, crop_fraction: float = 0.5,
                  rng_seed: int = 0, view_size: int = VIEW_SIZE) -> ViewPair:
    height, width = slice_image.shape
    if height < MIN_SLICE_SIZE or width < MIN_SLICE_SIZE:
        raise ValueError(f"Slice must be at least {MIN_SLICE_SIZE}x{MIN_SLICE_SIZE}, got {height}x{width}")
    if not 0 < crop_fraction <= 1:
        raise ValueError(f"crop_fraction must be in (0, 1], got {crop_fraction}")

    rng = np.random.default_rng(rng_seed)
    crop_h = max(1, int(round(crop_fraction * height)))
    crop_w = max(1, int(round(crop_fraction * width)))
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    location = LocationRecord(top, left, crop_h, crop_w, height, width)

    crop = slice_image[top:top + crop_h, left:left + crop_w]
    labels = None
    if label is not None:
        label_crop = label[top:top + crop_h, left:left + crop_w]
        labels = (
            _resize(label_crop, view_size, 'nearest').astype(np.uint8),
            _resize(label, view_size, 'nearest').astype(np.uint8),
        )
    return ViewPair(
        local=_resize(crop, view_size, 'bilinear'),
        global_view=_resize(slice_image, view_size, 'bilinear'),
        location=location,
        labels=labels,
    )


def augment(view_pair: ViewPair, prob: float, rng_seed: int, jitter_gain: float = 0.1,
            jitter_offset: float = 0.05, operations: Sequence[str] = AUGMENT_OPERATIONS) -> ViewPair:
    """Flips (images, labels and crop location together) and intensity jitter (images only)."""
    if not 0 <= prob <= 1:
        raise ValueError(f"Augmentation probability must be in [0, 1], got {prob}")
    unknown = set(operations) - set(AUGMENT_OPERATIONS)
    if unknown:
        raise ValueError(f"Unknown augmentation operations: {sorted(unknown)}")

    # every draw happens regardless of prob so decisions stay aligned across calls
    rng = np.random.default_rng(rng_seed)
    draws = rng.random(3)
    gain = rng.uniform(1.0 - jitter_gain, 1.0 + jitter_gain)
    offset = rng.uniform(-jitter_offset, jitter_offset)

    hflip = 'hflip' in operations and draws[0] < prob
    vflip = 'vflip' in operations and draws[1] < prob
    jitter = 'jitter' in operations and draws[2] < prob

    def geometry(array):
        if hflip:
            array = array[:, ::-1]
        if vflip:
            array = array[::-1, :]
        return np.ascontiguousarray(array)

    def intensity(array):
        return np.clip(array * gain + offset, 0.0, 1.0).astype(array.dtype) if jitter else array

    labels = None
    if view_pair.labels is not None:
        labels = tuple(geometry(label) for label in view_pair.labels)
    return ViewPair(
        local=intensity(geometry(view_pair.local)),
        global_view=intensity(geometry(view_pair.global_view)),
        location=view_pair.location.mirrored(horizontal=hflip, vertical=vflip),
        labels=labels,
    )
