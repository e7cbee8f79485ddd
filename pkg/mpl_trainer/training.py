"""Stage-2 teacher-student adaptation with masked pseudo-labels."""
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch

from dataprep.datasets import DataprepOptions, SliceStore, collate
from experiments.config import config_digest, resolve_device
from losses.objectives import (
    LossWeights, TrainingDiverged, ensure_finite, glc_loss, mpl_loss, mpl_total, seg_loss, semantic_consistency,
)
from metrics.evaluation import predict_slice
from metrics.overlap import dice
from networks.checkpoints import load_mae, save_checkpoint
from networks.segmenter import ContrastSegmenter, MaskedAutoencoder, NetworkSpec, build_mae, build_segmenter
from phantom.io import Manifest, ManifestRecord, check_split_hygiene

from .ema import EmaSchedule, TrainState, ema_update, make_teacher
from .figures import save_adaptation_panel

logger = logging.getLogger(__name__)

LOSS_LOG = 'loss_log.csv'
LOSS_COLUMNS = ['step', 'mpl', 'glc', 'sc', 'fss', 'total', 'alpha']
BEST_CHECKPOINT = 'mpl_best.ckpt'

EventHook = Callable[[str, str, Optional[int]], None]


@dataclass
class MplConfig:
    epochs: int = 150
    warmup_epochs: int = 50
    patience: int = 75
    max_steps: Optional[int] = None
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 1
    mask_ratio: float = 0.70
    target_echo: int = 6
    ema_stages: Tuple = ((1000, 0.99), (2000, 0.999), (None, 0.9999))
    sc_decoder_source: str = 'segmentation'
    augment: bool = True
    panel_every: int = 10
    log_every: int = 10
    model_seed: int = 2
    data_seed: int = 1

    @classmethod
    def from_config(cls, config: Dict) -> 'MplConfig':
        known = {f.name for f in fields(cls)}
        options = {k: v for k, v in config['mpl'].items() if k in known}
        seeds = config.get('seeds', {})
        return cls(model_seed=seeds.get('model', 2), data_seed=seeds.get('data', 1), **options)

    @property
    def schedule(self) -> EmaSchedule:
        return EmaSchedule.from_config(self.ema_stages)


@dataclass
class AdaptResult:
    checkpoint: Path
    best_dice: float
    epochs_run: int
    steps: int
    stopped_early: bool


def init_from_mae(mae: Union[Path, MaskedAutoencoder], spec: NetworkSpec, seed: int,
                  keep_reconstruction: bool = False, lr: float = 1e-4, weight_decay: float = 0.01,
                  device='cpu') -> TrainState:
    """Student = pretrained encoder + fresh segmentation head; teacher = exact copy of the student."""
    if not isinstance(mae, MaskedAutoencoder):
        mae, _ = load_mae(mae, device, spec=spec)
    student = build_segmenter(spec, seed, mae=mae, keep_reconstruction=keep_reconstruction).to(device)
    if student.reconstruction is not None:
        # feature source for the consistency term only; never updated
        student.reconstruction.requires_grad_(False)
    trainable = [p for p in student.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=lr, weight_decay=weight_decay)
    return TrainState(student=student, teacher=make_teacher(student), optimizer=optimizer)


@torch.no_grad()
def pseudo_label(teacher: ContrastSegmenter, local: torch.Tensor, global_view: torch.Tensor,
                 locations) -> torch.Tensor:
    """Hard teacher labels (B, S, S) for the unmasked target views."""
    return teacher.segment(local, global_view, locations).argmax(dim=1)


@torch.no_grad()
def global_pseudo_label(teacher: ContrastSegmenter, global_view: torch.Tensor) -> torch.Tensor:
    return teacher.segment_global(global_view).argmax(dim=1)


def adaptation_pairs(manifest: Manifest, source_echo: int, target_echo: int) -> List[Tuple[ManifestRecord, ManifestRecord]]:
    """Labelled source-echo records paired with the same slice's unlabelled target echo."""
    check_split_hygiene(manifest.records)
    targets = manifest.series('target')
    pairs = []
    for key, by_echo in manifest.series('source').items():
        source = by_echo.get(source_echo)
        target = targets.get(key, {}).get(target_echo)
        if source is None or target is None:
            continue
        if not source.labeled:
            raise ValueError(f"Source record {key} echo {source_echo} carries no label")
        pairs.append((source, target))
    if not pairs:
        raise ValueError(f"No source slices with echo {source_echo} paired with target echo {target_echo}")
    return pairs


def decoder_features(student: ContrastSegmenter, output, source: str) -> torch.Tensor:
    if source == 'reconstruction':
        if student.reconstruction is None:
            raise ValueError("Reconstruction-decoder features requested but the decoder was not retained")
        return student.reconstruction(output.local_features)[1]
    return output.decoder_features


def adaptation_losses(state: TrainState, source_batch: Dict, target_batch: Dict, weights: LossWeights,
                      config: MplConfig, warmup: bool, source_only: bool = False) -> Dict[str, torch.Tensor]:
    student = state.student
    source_label = source_batch['local_label']
    fss = seg_loss(student.segment(source_batch['local'], source_batch['global'], source_batch['locations']),
                   source_label, weights.dice_smooth)
    zero = fss.new_zeros(())
    if source_only:
        return {'mpl': zero, 'glc': zero, 'sc': zero, 'fss': fss, 'total': fss}

    target_weight = 0.0 if warmup else 1.0
    pseudo = pseudo_label(state.teacher, target_batch['local'], target_batch['global'], target_batch['locations'])
    pseudo_global = global_pseudo_label(state.teacher, target_batch['global'])

    source_out = student(source_batch['local_masked'], source_batch['global_masked'], source_batch['locations'])
    target_out = student(target_batch['local_masked'], target_batch['global_masked'], target_batch['locations'])

    mpl = mpl_loss(target_out.logits, pseudo, source_out.logits, source_label,
                   beta=weights.beta, smooth=weights.dice_smooth, target_weight=target_weight)
    glc = (
        glc_loss(source_out.global_logits, source_batch['global_label'], source_out.local_features,
                 source_out.global_features, weights.gamma_glc, weights.delta_glc, weights.dice_smooth,
                 weights.epsilon, weights.paper_literal_cosine)
        + glc_loss(target_out.global_logits, pseudo_global, target_out.local_features,
                   target_out.global_features, weights.gamma_glc * target_weight, weights.delta_glc * target_weight,
                   weights.dice_smooth, weights.epsilon, weights.paper_literal_cosine)
    )
    # involves target features: zero during warm-up
    sc = target_weight * semantic_consistency(
        source_out.local_features, target_out.local_features,
        decoder_features(student, source_out, config.sc_decoder_source),
        decoder_features(student, target_out, config.sc_decoder_source),
        weights.lambda_enc, weights.lambda_dec, weights.epsilon, weights.paper_literal_cosine,
    )
    total = mpl_total(mpl, glc, sc, fss, weights.gamma_sc_mpl)
    return {'mpl': mpl, 'glc': glc, 'sc': sc, 'fss': fss, 'total': total}


def validation_dice(model: ContrastSegmenter, store: SliceStore, records: List[ManifestRecord],
                    view_size: int = 256) -> float:
    model.eval()
    scores = [dice(predict_slice(model, store.image(r), view_size), store.label(r)) for r in records]
    return float(np.mean(scores))


class EarlyStopping:
    """Tracks the best validation Dice and the epochs since it last improved."""

    def __init__(self, state: TrainState, patience: int):
        self.state = state
        self.patience = patience

    def update(self, score: float) -> bool:
        """Record an epoch score; True when it is a new best."""
        if score > self.state.best_dice:
            self.state.best_dice = score
            self.state.epochs_since_improvement = 0
            return True
        self.state.epochs_since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.state.epochs_since_improvement >= self.patience


def _write_log(history: List[Dict], out_dir: Path):
    pd.DataFrame(history, columns=LOSS_COLUMNS).to_csv(out_dir / LOSS_LOG, index=False)


def adapt(config: Dict, mae_checkpoint: Optional[Path], dataset_dir: Path, out_dir: Path,
          source_only: bool = False, on_event: Optional[EventHook] = None) -> AdaptResult:
    """Adapt from the labelled source echo to ``mpl.target_echo``; keeps the best checkpoint.

    With ``source_only`` the student trains on the labelled source loss alone
    (the baseline); ``mae_checkpoint`` may then be None for a random encoder.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mpl_config = MplConfig.from_config(config)
    weights = LossWeights.from_section(config['loss'])
    options = DataprepOptions.from_section(config['dataprep'])
    spec = NetworkSpec.from_config(config)
    schedule = mpl_config.schedule
    device = resolve_device(config['output']['device'])
    emit = on_event or (lambda kind, message, step: None)

    manifest = Manifest.load(dataset_dir)
    source_echo = int(manifest.meta.get('source_echo', config['phantom']['source_echo']))
    pairs = adaptation_pairs(manifest, source_echo, mpl_config.target_echo)
    validation = manifest.select('validation', echo=source_echo, labeled=True)
    if not validation:
        raise ValueError("Early stopping needs labelled validation slices")
    store = SliceStore(manifest, options.percentile)

    keep_reconstruction = mpl_config.sc_decoder_source == 'reconstruction'
    mae = mae_checkpoint if mae_checkpoint is not None else build_mae(spec, mpl_config.model_seed)
    state = init_from_mae(mae, spec, mpl_config.model_seed, keep_reconstruction,
                          mpl_config.lr, mpl_config.weight_decay, device)
    stopper = EarlyStopping(state, mpl_config.patience)

    steps_per_epoch = max(1, math.ceil(len(pairs) / mpl_config.batch_size))
    max_steps = mpl_config.max_steps or mpl_config.epochs * steps_per_epoch
    rng = np.random.default_rng(mpl_config.data_seed)
    digest = config_digest(config)
    best_path = out_dir / BEST_CHECKPOINT
    history: List[Dict] = []
    stopped_early = False
    panel_sample = None

    logger.info(f"Adapting echo {source_echo} -> {mpl_config.target_echo} on {len(pairs)} slices, "
                f"{mpl_config.epochs} epochs ({mpl_config.warmup_epochs} warm-up)"
                + (", source only" if source_only else ""))
    for epoch in range(mpl_config.epochs):
        state.epoch = epoch
        warmup = epoch < mpl_config.warmup_epochs
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), mpl_config.batch_size):
            if state.step >= max_steps:
                break
            state.student.train()
            samples = []
            for index in order[start:start + mpl_config.batch_size]:
                source, target = pairs[int(index)]
                seed = int(rng.integers(2 ** 31))
                # one seed for both echoes: same crop, flips and mask
                samples.append((
                    store.sample(source, options, seed, mpl_config.mask_ratio, mpl_config.augment, with_label=True),
                    store.sample(target, options, seed, mpl_config.mask_ratio, mpl_config.augment),
                ))
            source_batch = collate([s for s, _ in samples], device)
            target_batch = collate([t for _, t in samples], device)
            losses = adaptation_losses(state, source_batch, target_batch, weights, mpl_config, warmup, source_only)
            for name, value in losses.items():
                try:
                    ensure_finite(name, value, state.step + 1)
                except TrainingDiverged as e:
                    _write_log(history, out_dir)
                    emit('FAILURE', str(e), state.step + 1)
                    raise

            state.optimizer.zero_grad(set_to_none=True)
            losses['total'].backward()
            state.optimizer.step()
            ema_update(state, schedule)
            state.step += 1

            history.append({'step': state.step, **{k: v.item() for k, v in losses.items()},
                            'alpha': state.last_alpha})
            if state.step % mpl_config.log_every == 0:
                row = history[-1]
                logger.info(f"epoch {epoch} step {state.step} mpl={row['mpl']:.4f} glc={row['glc']:.4f} "
                            f"sc={row['sc']:.4f} fss={row['fss']:.4f} total={row['total']:.4f} "
                            f"alpha={row['alpha']}")
            if panel_sample is None:
                panel_sample = samples[0]

        score = validation_dice(state.student, store, validation, options.view_size)
        if stopper.update(score):
            save_checkpoint(best_path, 'mpl', {
                'network_spec': spec.to_dict(),
                'student': state.student.state_dict(),
                'teacher': state.teacher.state_dict(),
                'step': state.step,
                'epoch': epoch,
                'best_dice': score,
                'config_hash': digest,
                'source_only': source_only,
                'source_echo': source_echo,
                'target_echo': mpl_config.target_echo,
            })
            emit('CHECKPOINT', f"validation dice {score:.4f} at epoch {epoch}", state.step)
        logger.info(f"epoch {epoch}: validation dice {score:.4f} (best {state.best_dice:.4f}, "
                    f"{state.epochs_since_improvement} without improvement)")
        _write_log(history, out_dir)
        if panel_sample is not None and (epoch % mpl_config.panel_every == 0 or epoch == mpl_config.epochs - 1):
            save_adaptation_panel(state, *panel_sample, out_dir / f'panel_epoch{epoch:03d}.png', device)

        if stopper.should_stop:
            stopped_early = True
            emit('EARLY_STOP', f"no improvement for {mpl_config.patience} epochs", state.step)
            logger.info(f"Early stopping at epoch {epoch}")
            break
        if state.step >= max_steps:
            break

    return AdaptResult(best_path, state.best_dice, state.epoch + 1, state.step, stopped_early)


def train_source_only(config: Dict, dataset_dir: Path, out_dir: Path, mae_checkpoint: Optional[Path] = None,
                      on_event: Optional[EventHook] = None) -> AdaptResult:
    """Baseline with the same budget and data, supervised by the labelled source echo only."""
    return adapt(config, mae_checkpoint, dataset_dir, out_dir, source_only=True, on_event=on_event)
