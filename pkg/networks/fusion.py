import math
from typing import Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from dataprep.transforms import LocationRecord


def _round_half_down(value: float) -> int:
    # nearest, ties toward the origin
    return int(math.ceil(value - 0.5))


def feature_rectangle(location: LocationRecord, grid_size: int) -> Tuple[int, int, int, int]:
    """Map a slice-pixel crop rectangle to ``(row0, row1, col0, col1)`` cells of the global grid."""
    sy = grid_size / location.source_height
    sx = grid_size / location.source_width
    r0 = min(max(_round_half_down(location.top * sy), 0), grid_size - 1)
    c0 = min(max(_round_half_down(location.left * sx), 0), grid_size - 1)
    r1 = min(max(_round_half_down(location.bottom * sy), r0 + 1), grid_size)
    c1 = min(max(_round_half_down(location.right * sx), c0 + 1), grid_size)
    return r0, r1, c0, c1


def fuse_global_local(feat_local: torch.Tensor,
                      feat_global: torch.Tensor,
                      locations: Union[LocationRecord, Sequence[LocationRecord]]) -> torch.Tensor:
    """Concatenate local features with the matching, upsampled region of the global features.

    Output is ``(B, 2C, g, g)``; channels ``[0, C)`` are ``feat_local`` unchanged.
    """
    if feat_local.shape != feat_global.shape or feat_local.dim() != 4:
        raise ValueError(f"Feature grids differ: {tuple(feat_local.shape)} vs {tuple(feat_global.shape)}")
    if isinstance(locations, LocationRecord):
        locations = [locations] * feat_local.shape[0]
    if len(locations) != feat_local.shape[0]:
        raise ValueError(f"{len(locations)} locations for a batch of {feat_local.shape[0]}")

    g_h, g_w = feat_global.shape[-2:]
    if g_h != g_w:
        raise ValueError("Feature grid must be square")
    regions = []
    for index, location in enumerate(locations):
        r0, r1, c0, c1 = feature_rectangle(location, g_h)
        crop = feat_global[index:index + 1, :, r0:r1, c0:c1]
        regions.append(F.interpolate(crop, size=(g_h, g_w), mode='bilinear', align_corners=False))
    return torch.cat([feat_local, torch.cat(regions, dim=0)], dim=1)
