import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .transforms import VIEW_SIZE

# patch side in pixels for each view kind
PATCH_SIZES = {
    'local': 8,
    'global': 4,
}


@dataclass(frozen=True)
class MaskPlan:
    patch_size: int
    masked_indices: Tuple[int, ...]
    grid: Tuple[int, int]
    seed: int

    def __post_init__(self):
        count = self.grid[0] * self.grid[1]
        if len(set(self.masked_indices)) != len(self.masked_indices):
            raise ValueError("Masked patch indices must be unique")
        if any(i < 0 or i >= count for i in self.masked_indices):
            raise ValueError(f"Masked patch index outside the {self.grid} grid")

    @property
    def patch_count(self) -> int:
        return self.grid[0] * self.grid[1]

    def mask_map(self) -> np.ndarray:
        """Pixel map with 1 on masked patches."""
        cells = np.zeros(self.patch_count, dtype=np.uint8)
        cells[list(self.masked_indices)] = 1
        cells = cells.reshape(self.grid)
        return np.repeat(np.repeat(cells, self.patch_size, axis=0), self.patch_size, axis=1)


def plan_mask(view_kind: str, ratio: float = 0.70, rng_seed: int = 0, view_size: int = VIEW_SIZE) -> MaskPlan:
    if view_kind not in PATCH_SIZES:
        raise ValueError(f"Unknown view kind {view_kind!r}, expected one of {sorted(PATCH_SIZES)}")
    if not 0 <= ratio < 1:
        raise ValueError(f"Mask ratio must be in [0, 1), got {ratio}")

    patch_size = PATCH_SIZES[view_kind]
    side = view_size // patch_size
    count = side * side
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(count, size=math.floor(ratio * count), replace=False)
    return MaskPlan(
        patch_size=patch_size,
        masked_indices=tuple(sorted(int(i) for i in chosen)),
        grid=(side, side),
        seed=rng_seed,
    )


def apply_mask(view: np.ndarray, plan: MaskPlan):
    """Zero the planned patches; returns (masked_view, mask_map) with 1 = masked."""
    expected = (plan.grid[0] * plan.patch_size, plan.grid[1] * plan.patch_size)
    if view.shape != expected:
        raise ValueError(f"Mask grid {plan.grid} x {plan.patch_size}px does not tile a view of shape {view.shape}")
    mask_map = plan.mask_map()
    return view * (1 - mask_map).astype(view.dtype), mask_map
