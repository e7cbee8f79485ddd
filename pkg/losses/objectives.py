"""Training objectives for both stages.

Every function takes and returns torch tensors so the results stay on the
autograd graph; scalars come back as 0-d tensors.
"""
import logging
import math
from dataclasses import dataclass, fields
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.5
    gamma_glc: float = 1.0
    delta_glc: float = 0.1
    gamma_sc_mae: float = 0.4
    gamma_sc_mpl: float = 0.4
    lambda_enc: float = 0.5
    lambda_dec: float = 0.5
    epsilon: float = 1e-8
    dice_smooth: float = 1.0
    paper_literal_cosine: bool = False

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                continue
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"Loss weight {f.name} must be a finite non-negative number, got {value}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def from_section(cls, section: Dict) -> 'LossWeights':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in section.items() if k in known})


def ensure_finite(name: str, value: torch.Tensor, step: Optional[int] = None) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise TrainingDiverged(f"Loss '{name}' became non-finite ({value.item()}) at step {step}")
    return value


def masked_mse(reconstruction: torch.Tensor, original: torch.Tensor, mask_map: torch.Tensor) -> torch.Tensor:
    """Mean squared error over masked pixels only."""
    if reconstruction.shape != original.shape or original.shape != mask_map.shape:
        raise ValueError(f"Shape mismatch: {tuple(reconstruction.shape)}, {tuple(original.shape)}, "
                         f"{tuple(mask_map.shape)}")
    mask_map = mask_map.to(reconstruction.dtype)
    count = mask_map.sum()
    if count.item() == 0:
        logger.warning("masked_mse called with an empty mask; returning 0")
        return (reconstruction * 0).sum()
    return ((reconstruction - original) ** 2 * mask_map).sum() / count


def mae_loss(local_pair: Tuple[torch.Tensor, torch.Tensor, torch.Tensor],
             global_pair: Tuple[torch.Tensor, torch.Tensor, torch.Tensor]) -> torch.Tensor:
    """Each pair is ``(reconstruction, original, mask_map)``."""
    return masked_mse(*local_pair) + masked_mse(*global_pair)


def _check_binary(target: torch.Tensor):
    if target.numel() and not ((target == 0) | (target == 1)).all():
        raise ValueError("Segmentation target must be binary")


def dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    p = torch.softmax(logits, dim=1)[:, 1].flatten(1)
    q = target.to(p.dtype).flatten(1)
    dice = (2 * (p * q).sum(1) + smooth) / (p.sum(1) + q.sum(1) + smooth)
    return (1 - dice).mean()


def seg_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice on the foreground probability plus mean pixel cross-entropy."""
    if logits.dim() != 4 or logits.shape[1] != 2:
        raise ValueError(f"Expected (B, 2, H, W) logits, got {tuple(logits.shape)}")
    if target.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ValueError(f"Target shape {tuple(target.shape)} does not match logits {tuple(logits.shape)}")
    _check_binary(target)
    return dice_loss(logits, target, smooth) + F.cross_entropy(logits, target.long())


def mpl_loss(student_logits_target: torch.Tensor, pseudo_label: torch.Tensor,
             student_logits_source: torch.Tensor, source_label: torch.Tensor,
             beta: float = 0.5, smooth: float = 1.0, target_weight: float = 1.0) -> torch.Tensor:
    """Pseudo-label term on the target plus ``beta`` times the labelled source term.

    ``target_weight`` is 0 during warm-up so the pseudo-label term contributes
    neither value nor gradient.
    """
    source = seg_loss(student_logits_source, source_label, smooth)
    if target_weight == 0:
        return beta * source
    return target_weight * seg_loss(student_logits_target, pseudo_label, smooth) + beta * source


def _pool(features: torch.Tensor) -> torch.Tensor:
    if features.dim() > 2:
        return features.flatten(2).mean(-1)
    if features.dim() == 1:
        return features[None]
    return features


def cosine_align(feat_a: torch.Tensor, feat_b: torch.Tensor, epsilon: float = 1e-8,
                 max_norm: bool = False) -> torch.Tensor:
    """1 - cosine similarity of the spatially pooled features, averaged over the batch.

    With ``max_norm`` the denominator is max(|a|, |b|, eps) instead of
    max(|a| * |b|, eps); that form is neither scale-invariant nor bounded.
    """
    if feat_a.shape != feat_b.shape:
        raise ValueError(f"Feature shapes differ: {tuple(feat_a.shape)} vs {tuple(feat_b.shape)}")
    a, b = _pool(feat_a), _pool(feat_b)
    norm_a, norm_b = a.norm(dim=1), b.norm(dim=1)
    if max_norm:
        denominator = torch.clamp(torch.maximum(norm_a, norm_b), min=epsilon)
    else:
        denominator = torch.clamp(norm_a * norm_b, min=epsilon)
    return (1 - (a * b).sum(1) / denominator).mean()


def semantic_consistency(z_enc_i: torch.Tensor, z_enc_j: torch.Tensor,
                         z_dec_i: torch.Tensor, z_dec_j: torch.Tensor,
                         lambda_enc: float = 0.5, lambda_dec: float = 0.5,
                         epsilon: float = 1e-8, max_norm: bool = False) -> torch.Tensor:
    return (lambda_enc * cosine_align(z_enc_i, z_enc_j, epsilon, max_norm)
            + lambda_dec * cosine_align(z_dec_i, z_dec_j, epsilon, max_norm))


def glc_loss(global_logits: torch.Tensor, global_label: Optional[torch.Tensor],
             feat_local: torch.Tensor, feat_global: torch.Tensor,
             gamma: float = 1.0, delta: float = 0.1, smooth: float = 1.0,
             epsilon: float = 1e-8, max_norm: bool = False) -> torch.Tensor:
    """Global auxiliary segmentation term plus local/global feature alignment."""
    total = delta * cosine_align(feat_local, feat_global, epsilon, max_norm)
    if gamma:
        if global_label is None:
            raise ValueError("glc_loss needs a global label when gamma > 0")
        total = total + gamma * seg_loss(global_logits, global_label, smooth)
    return total


def mae_total(mae_term: torch.Tensor, sc_term: torch.Tensor, gamma_sc: float = 0.4) -> torch.Tensor:
    return mae_term + gamma_sc * sc_term


def mpl_total(mpl_term: torch.Tensor, glc_term: torch.Tensor, sc_term: torch.Tensor,
              fss_term: torch.Tensor, gamma_sc: float = 0.4) -> torch.Tensor:
    return fss_term + mpl_term + glc_term + gamma_sc * sc_term
