"""Turning manifest records into masked dual-view training samples."""
import logging
from dataclasses import dataclass, fields
from typing import Dict, List, Optional

import numpy as np
import torch

from phantom.io import Manifest, ManifestRecord

from .masking import MaskPlan, apply_mask, plan_mask
from .transforms import VIEW_SIZE, ViewPair, augment, extract_views, normalize

logger = logging.getLogger(__name__)


@dataclass
class DataprepOptions:
    crop_fraction: float = 0.5
    view_size: int = VIEW_SIZE
    augment_prob: float = 0.35
    jitter_gain: float = 0.1
    jitter_offset: float = 0.05
    percentile: float = 99.5

    @classmethod
    def from_section(cls, section: Dict) -> 'DataprepOptions':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in section.items() if k in known})


@dataclass
class MaskedViews:
    views: ViewPair
    local_plan: MaskPlan
    global_plan: MaskPlan
    local_masked: np.ndarray
    local_mask_map: np.ndarray
    global_masked: np.ndarray
    global_mask_map: np.ndarray
    echo: int = 0
    subject_id: str = ''
    slice_id: int = 0


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def prepare_views(image: np.ndarray, label: Optional[np.ndarray], options: DataprepOptions, seed: int,
                  mask_ratio: float, augment_views: bool = True, mask_seed: Optional[int] = None) -> MaskedViews:
    """Crop, augment and mask one normalized slice.

    Crop, augmentation and mask seeds all derive from ``seed`` so two echoes of
    one slice prepared with the same seed share their geometry exactly.
    """
    views = extract_views(image, label, options.crop_fraction, derive_seed(seed, 0), options.view_size)
    if augment_views and options.augment_prob > 0:
        views = augment(views, options.augment_prob, derive_seed(seed, 1),
                        jitter_gain=options.jitter_gain, jitter_offset=options.jitter_offset)
    mask_seed = derive_seed(seed, 2) if mask_seed is None else mask_seed
    local_plan = plan_mask('local', mask_ratio, derive_seed(mask_seed, 0), options.view_size)
    global_plan = plan_mask('global', mask_ratio, derive_seed(mask_seed, 1), options.view_size)
    local_masked, local_map = apply_mask(views.local, local_plan)
    global_masked, global_map = apply_mask(views.global_view, global_plan)
    return MaskedViews(views, local_plan, global_plan, local_masked, local_map, global_masked, global_map)


class SliceStore:
    """Normalized slices and labels from a dataset directory, cached per record."""

    def __init__(self, manifest: Manifest, percentile: float = 99.5):
        self.manifest = manifest
        self.percentile = percentile
        self._images: Dict[str, np.ndarray] = {}

    def image(self, record: ManifestRecord) -> np.ndarray:
        if record.image not in self._images:
            raw = self.manifest.image(record)
            self._images[record.image] = normalize(raw, percentile=self.percentile).astype(np.float32)
        return self._images[record.image]

    def label(self, record: ManifestRecord) -> np.ndarray:
        return self.manifest.mask(record)

    def sample(self, record: ManifestRecord, options: DataprepOptions, seed: int, mask_ratio: float,
               augment_views: bool = True, with_label: bool = False) -> MaskedViews:
        label = self.label(record) if with_label else None
        sample = prepare_views(self.image(record), label, options, seed, mask_ratio, augment_views)
        sample.echo = record.echo
        sample.subject_id = record.subject_id
        sample.slice_id = record.slice_id
        return sample


def _stack(arrays: List[np.ndarray], device) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays).astype(np.float32))[:, None].to(device)


def collate(samples: List[MaskedViews], device='cpu') -> Dict:
    """Batch tensors (B, 1, S, S) for images and mask maps, (B, S, S) long labels."""
    batch = {
        'local': _stack([s.views.local for s in samples], device),
        'global': _stack([s.views.global_view for s in samples], device),
        'local_masked': _stack([s.local_masked for s in samples], device),
        'global_masked': _stack([s.global_masked for s in samples], device),
        'local_mask_map': _stack([s.local_mask_map for s in samples], device),
        'global_mask_map': _stack([s.global_mask_map for s in samples], device),
        'locations': [s.views.location for s in samples],
    }
    if all(s.views.labels is not None for s in samples):
        batch['local_label'] = torch.from_numpy(np.stack([s.views.labels[0] for s in samples]).astype(np.int64)).to(device)
        batch['global_label'] = torch.from_numpy(np.stack([s.views.labels[1] for s in samples]).astype(np.int64)).to(device)
    return batch


def whole_slice_views(image: np.ndarray, label: Optional[np.ndarray] = None,
                      view_size: int = VIEW_SIZE) -> ViewPair:
    """Views used at inference: the local view spans the whole slice."""
    return extract_views(image, label, crop_fraction=1.0, rng_seed=0, view_size=view_size)

