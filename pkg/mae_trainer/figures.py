from pathlib import Path

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import torch  # noqa: E402

from dataprep.datasets import MaskedViews  # noqa: E402


@torch.no_grad()
def save_reconstruction_grid(model, sample: MaskedViews, path: Path, device='cpu'):
    """Input, masked input and reconstruction for the local (top) and global (bottom) view."""
    rows = (
        ('local', sample.views.local, sample.local_masked),
        ('global', sample.views.global_view, sample.global_masked),
    )
    fig, axes = plt.subplots(2, 3, figsize=(9, 6))
    for row, (name, view, masked) in enumerate(rows):
        reconstruction, _, _ = model(torch.from_numpy(masked).float()[None, None].to(device))
        panels = (view, masked, reconstruction[0, 0].clamp(0, 1).cpu().numpy())
        for col, (title, image) in enumerate(zip(('input', 'masked', 'reconstruction'), panels)):
            axes[row, col].imshow(image, cmap='gray', vmin=0, vmax=1)
            axes[row, col].set_title(f'{name} {title}')
            axes[row, col].axis('off')
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
