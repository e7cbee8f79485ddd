import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

MIN_SIZE = 64

BACKGROUND = 0
MATERNAL = 1
PLACENTA = 2
FLUID = 3

# (s0 in a.u., T2* in ms) per tissue class
CLASS_PROPERTIES = {
    MATERNAL: (80.0, 35.0),
    PLACENTA: (100.0, 70.0),
    FLUID: (120.0, 250.0),
}

# relative amplitude of the smooth within-class variation
PERTURBATION = 0.05

PLACENTA_FRACTION_RANGE = (0.05, 0.30)


@dataclass
class TissueMap:
    label_grid: np.ndarray
    s0_grid: np.ndarray
    t2star_grid: np.ndarray
    seed: int

    @property
    def shape(self):
        return self.label_grid.shape

    @property
    def placenta_mask(self) -> np.ndarray:
        return (self.label_grid == PLACENTA).astype(np.uint8)

    @property
    def placenta_fraction(self) -> float:
        return float(self.placenta_mask.mean())


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Low-frequency random field scaled to [-1, 1]."""
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode='reflect')
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def _ellipse(yy, xx, cy, cx, ry, rx) -> np.ndarray:
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _placenta_blob(rng: np.random.Generator, yy, xx, height: int, width: int):
    """Perturbed, rotated ellipse: a star-shaped blob around its centre.

    Centre, radii and rotation live in coordinates normalized by the grid size
    along each axis, so the covered fraction does not depend on the aspect ratio.
    """
    cy = rng.uniform(0.38, 0.62)
    cx = rng.uniform(0.38, 0.62)
    ry = rng.uniform(0.18, 0.24)
    rx = rng.uniform(0.20, 0.26)
    phi = rng.uniform(0.0, np.pi)

    ny = yy / height - cy
    nx = xx / width - cx
    v = ny * np.cos(phi) - nx * np.sin(phi)
    u = ny * np.sin(phi) + nx * np.cos(phi)
    rho = np.hypot(v / ry, u / rx)
    theta = np.arctan2(u / rx, v / ry)

    # low-frequency radial noise, total amplitude <= 0.15
    boundary = np.ones_like(theta)
    for k in (2, 3, 4):
        boundary += rng.uniform(0.0, 0.05) * np.cos(k * theta + rng.uniform(0.0, 2 * np.pi))

    blob = rho <= boundary
    labeled, count = ndimage.label(blob)
    if count > 1:
        sizes = ndimage.sum(blob, labeled, index=range(1, count + 1))
        blob = labeled == (int(np.argmax(sizes)) + 1)
    return blob, (cy * height, cx * width)


def make_tissue_map(seed: int, height: int, width: int) -> TissueMap:
    if height < MIN_SIZE or width < MIN_SIZE:
        raise ValueError(f"Tissue map must be at least {MIN_SIZE}x{MIN_SIZE}, got {height}x{width}")

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    labels = np.zeros((height, width), dtype=np.uint8)
    body = _ellipse(yy, xx, (height - 1) / 2, (width - 1) / 2, 0.46 * height, 0.46 * width)
    labels[body] = MATERNAL

    placenta, (py, px) = _placenta_blob(rng, yy, xx, height, width)

    # amniotic fluid sits on the opposite side of the uterus
    fy = (height - 1) / 2 + 0.8 * ((height - 1) / 2 - py)
    fx = (width - 1) / 2 + 0.8 * ((width - 1) / 2 - px)
    fluid = _ellipse(yy, xx, fy, fx, 0.20 * height, 0.22 * width) & body
    labels[fluid] = FLUID
    labels[placenta] = PLACENTA

    sigma = max(height, width) / 16
    s0_field = _smooth_field(rng, (height, width), sigma)
    t2_field = _smooth_field(rng, (height, width), sigma)

    s0 = np.zeros((height, width), dtype=np.float64)
    t2star = np.zeros((height, width), dtype=np.float64)
    for label, (base_s0, base_t2) in CLASS_PROPERTIES.items():
        region = labels == label
        s0[region] = base_s0 * (1.0 + PERTURBATION * s0_field[region])
        t2star[region] = base_t2 * (1.0 + PERTURBATION * t2_field[region])

    tissue = TissueMap(label_grid=labels, s0_grid=s0, t2star_grid=t2star, seed=seed)

    low, high = PLACENTA_FRACTION_RANGE
    if not low <= tissue.placenta_fraction <= high:
        raise RuntimeError(
            f"Placenta fraction {tissue.placenta_fraction:.3f} outside [{low}, {high}] for seed {seed}"
        )
    logger.debug(f"Tissue map seed={seed} placenta fraction {tissue.placenta_fraction:.3f}")
    return tissue
