from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

OVERLAY_ALPHA = 0.5


def red_overlay(mask: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """RGBA layer: red where ``mask`` is set, transparent elsewhere."""
    rgba = np.zeros(mask.shape + (4,), dtype=np.float32)
    rgba[..., 0] = 1.0
    rgba[..., 3] = alpha * (np.asarray(mask) > 0)
    return rgba


def save_overlay(image: np.ndarray, prediction: np.ndarray, ground_truth: np.ndarray, path: Path,
                 title: str = '') -> Path:
    """Input slice, prediction overlay and ground-truth overlay side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    panels = (('Input', None), ('Prediction', prediction), ('Ground truth', ground_truth))
    for ax, (name, mask) in zip(axes, panels):
        ax.imshow(image, cmap='gray', vmin=0, vmax=1)
        if mask is not None:
            ax.imshow(red_overlay(mask))
        ax.set_title(name)
        ax.axis('off')
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def save_loss_curves(log: pd.DataFrame, path: Path, title: str = '',
                     skip: Sequence[str] = ('step', 'alpha')) -> Path:
    columns = [c for c in log.columns if c not in skip]
    fig, axes = plt.subplots(1, len(columns), figsize=(4 * len(columns), 3.5), squeeze=False)
    for ax, column in zip(axes[0], columns):
        ax.plot(log['step'], log[column])
        ax.set_title(column)
        ax.set_xlabel('Step')
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
