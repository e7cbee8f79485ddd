from pathlib import Path

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import torch  # noqa: E402

from dataprep.datasets import MaskedViews, collate  # noqa: E402

COLUMNS = ('masked input', 'label', 'student')


@torch.no_grad()
def save_adaptation_panel(state, source: MaskedViews, target: MaskedViews, path: Path, device='cpu') -> Path:
    """4x3 tiles: source/target by local/global rows; masked input, label and prediction columns.

    Target rows show the teacher's pseudo-label in the label column.
    """
    student, teacher = state.student, state.teacher
    was_training = student.training
    student.eval()
    source_batch = collate([source], device)
    target_batch = collate([target], device)

    def predictions(model, batch):
        out = model(batch['local_masked'], batch['global_masked'], batch['locations'])
        return out.logits.argmax(1)[0].cpu().numpy(), out.global_logits.argmax(1)[0].cpu().numpy()

    source_local, source_global = predictions(student, source_batch)
    target_local, target_global = predictions(student, target_batch)
    pseudo_local = teacher.segment(target_batch['local'], target_batch['global'],
                                   target_batch['locations']).argmax(1)[0].cpu().numpy()
    pseudo_global = teacher.segment_global(target_batch['global']).argmax(1)[0].cpu().numpy()

    rows = (
        ('source local', source.local_masked, source.views.labels[0], source_local),
        ('source global', source.global_masked, source.views.labels[1], source_global),
        ('target local', target.local_masked, pseudo_local, target_local),
        ('target global', target.global_masked, pseudo_global, target_global),
    )
    fig, axes = plt.subplots(4, 3, figsize=(9, 12))
    for row, (name, *tiles) in enumerate(rows):
        for col, (title, tile) in enumerate(zip(COLUMNS, tiles)):
            axes[row, col].imshow(tile, cmap='gray', vmin=0, vmax=1)
            axes[row, col].set_title(f'{name} {title}', fontsize=8)
            axes[row, col].axis('off')
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    student.train(was_training)
    return path
