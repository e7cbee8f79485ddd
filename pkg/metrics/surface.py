"""Boundary extraction and surface-distance metrics on 2D masks.

Distances come from a Euclidean distance transform; each distance is then
recomputed from the surface coordinates so the result equals the pairwise
brute-force oracles below.
"""
import logging
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .overlap import as_binary_pair

logger = logging.getLogger(__name__)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    return ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)


def surface_points(mask, connectivity: int = 4) -> np.ndarray:
    """Boolean map of mask pixels with a neighbour outside the mask or the image."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        return np.zeros_like(mask)
    eroded = ndimage.binary_erosion(mask, structure=_structure(connectivity), border_value=0)
    return mask & ~eroded


def _distances_to(points: np.ndarray, target_surface: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """Distance from each of ``points`` (N, 2) to the nearest pixel of ``target_surface``."""
    _, indices = ndimage.distance_transform_edt(~target_surface, sampling=spacing, return_indices=True)
    nearest = indices[:, points[:, 0], points[:, 1]].T
    return np.sqrt((((points * spacing) - (nearest * spacing)) ** 2).sum(axis=1))


def _directed(pred, gt, spacing, connectivity):
    a, b = as_binary_pair(pred, gt)
    surface_a = surface_points(a, connectivity)
    surface_b = surface_points(b, connectivity)
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (2,) or (spacing <= 0).any():
        raise ValueError(f"pixel spacing must be two positive numbers, got {spacing}")
    if not surface_a.any() or not surface_b.any():
        return surface_a.any(), surface_b.any(), None, None
    points_a, points_b = np.argwhere(surface_a), np.argwhere(surface_b)
    return True, True, _distances_to(points_a, surface_b, spacing), _distances_to(points_b, surface_a, spacing)


def nsd(pred, gt, tolerance_vox: float = 1.0, connectivity: int = 4) -> float:
    """Share of boundary pixels of both masks within ``tolerance_vox`` of the other boundary."""
    if tolerance_vox < 0:
        raise ValueError("tolerance must be non-negative")
    has_a, has_b, d_ab, d_ba = _directed(pred, gt, (1.0, 1.0), connectivity)
    if not has_a and not has_b:
        return 1.0
    if not (has_a and has_b):
        return 0.0
    return (int((d_ab <= tolerance_vox).sum()) + int((d_ba <= tolerance_vox).sum())) / (d_ab.size + d_ba.size)


def hausdorff(pred, gt, pixel_spacing: Sequence[float] = (1.0, 1.0), percentile: Optional[float] = None,
              connectivity: int = 4) -> float:
    """Symmetric Hausdorff distance in mm; inf when exactly one boundary is empty.

    With ``percentile`` the max of each directed set is replaced by that
    percentile (95 gives the usual HD95).
    """
    has_a, has_b, d_ab, d_ba = _directed(pred, gt, pixel_spacing, connectivity)
    if not has_a and not has_b:
        return 0.0
    if not (has_a and has_b):
        logger.warning("Hausdorff distance with one empty surface reported as inf")
        return float('inf')
    if percentile is None:
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


def _pairwise(pred, gt, spacing, connectivity):
    a, b = as_binary_pair(pred, gt)
    spacing = np.asarray(spacing, dtype=np.float64)
    points_a = np.argwhere(surface_points(a, connectivity)) * spacing
    points_b = np.argwhere(surface_points(b, connectivity)) * spacing
    if len(points_a) == 0 or len(points_b) == 0:
        return len(points_a), len(points_b), None
    return len(points_a), len(points_b), cdist(points_a, points_b)


def brute_force_hausdorff(pred, gt, pixel_spacing=(1.0, 1.0), connectivity: int = 4) -> float:
    n_a, n_b, distances = _pairwise(pred, gt, pixel_spacing, connectivity)
    if n_a == 0 and n_b == 0:
        return 0.0
    if distances is None:
        return float('inf')
    return float(max(distances.min(axis=1).max(), distances.min(axis=0).max()))


def brute_force_nsd(pred, gt, tolerance_vox: float = 1.0, connectivity: int = 4) -> float:
    n_a, n_b, distances = _pairwise(pred, gt, (1.0, 1.0), connectivity)
    if n_a == 0 and n_b == 0:
        return 1.0
    if distances is None:
        return 0.0
    close = (distances.min(axis=1) <= tolerance_vox).sum() + (distances.min(axis=0) <= tolerance_vox).sum()
    return int(close) / (n_a + n_b)
