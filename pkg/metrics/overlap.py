import numpy as np


def as_binary_pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"Mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, mask in (('prediction', pred), ('ground truth', gt)):
        if mask.size and not np.isin(mask, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
    return pred.astype(bool), gt.astype(bool)


def dice(pred, gt) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    a, b = as_binary_pair(pred, gt)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def iou(pred, gt) -> float:
    a, b = as_binary_pair(pred, gt)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def accuracy(pred, gt) -> float:
    a, b = as_binary_pair(pred, gt)
    if a.size == 0:
        return 1.0
    return int((a == b).sum()) / a.size
