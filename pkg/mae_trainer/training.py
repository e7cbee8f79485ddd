"""Stage-1 masked-autoencoder pretraining with cross-echo semantic consistency."""
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from dataprep.datasets import DataprepOptions, MaskedViews, SliceStore, collate, whole_slice_views
from experiments.config import config_digest, resolve_device
from losses.objectives import (
    LossWeights, TrainingDiverged, cosine_align, ensure_finite, mae_loss, mae_total, semantic_consistency,
)
from networks.checkpoints import capture_rng_state, load_mae, restore_rng_state, save_checkpoint
from networks.segmenter import MaskedAutoencoder, NetworkSpec, build_mae
from phantom.io import Manifest, check_split_hygiene

from .figures import save_reconstruction_grid

logger = logging.getLogger(__name__)

LOSS_LOG = 'loss_log.csv'
LOSS_COLUMNS = ['step', 'mse', 'sc', 'total']
LR_SCHEDULES = ('constant', 'cosine')

EventHook = Callable[[str, str, Optional[int]], None]


@dataclass
class MaeConfig:
    epochs: int = 300
    max_steps: Optional[int] = None
    lr: float = 2e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    batch_size: int = 4
    mask_ratio: float = 0.70
    gamma_sc: float = 0.4
    cos_weight: float = 0.0
    lr_schedule: str = 'constant'
    augment: bool = True
    checkpoint_every: int = 500
    log_every: int = 10
    model_seed: int = 2
    data_seed: int = 1

    def __post_init__(self):
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    @classmethod
    def from_config(cls, config: Dict) -> 'MaeConfig':
        known = {f.name for f in fields(cls)}
        options = {k: v for k, v in config['mae'].items() if k in known}
        seeds = config.get('seeds', {})
        return cls(model_seed=seeds.get('model', 2), data_seed=seeds.get('data', 1), **options)

    def total_steps(self, pool_size: int) -> int:
        steps = self.epochs * max(1, math.ceil(pool_size / self.batch_size))
        return min(steps, self.max_steps) if self.max_steps else steps


class EchoPool:
    """Slices of one split that carry at least two echoes, ready for pairing."""

    def __init__(self, store: SliceStore, options: DataprepOptions, mask_ratio: float,
                 split: str = 'mae', augment_views: bool = True):
        self.store = store
        self.options = options
        self.mask_ratio = mask_ratio
        self.augment_views = augment_views
        series = store.manifest.series(split)
        self.series = {key: echoes for key, echoes in series.items() if len(echoes) >= 2}
        skipped = len(series) - len(self.series)
        if skipped:
            logger.warning(f"Skipping {skipped} single-echo slices in split '{split}'")
        if not self.series:
            raise ValueError(f"Split '{split}' has no slice with two or more echoes to pair")
        self.keys = list(self.series)

    def __len__(self):
        return len(self.keys)

    @property
    def echoes(self) -> List[int]:
        return sorted({echo for echoes in self.series.values() for echo in echoes})


def sample_echo_pair(pool: EchoPool, rng: np.random.Generator) -> Tuple[MaskedViews, MaskedViews]:
    """Two echoes of one slice with identical crop, augmentation and mask geometry."""
    key = pool.keys[int(rng.integers(len(pool.keys)))]
    echoes = pool.series[key]
    first, second = rng.choice(sorted(echoes), size=2, replace=False)
    seed = int(rng.integers(2 ** 31))
    return tuple(
        pool.store.sample(echoes[int(echo)], pool.options, seed, pool.mask_ratio, pool.augment_views)
        for echo in (first, second)
    )


def _forward(model: MaskedAutoencoder, batch: Dict):
    recon_local, enc_local, dec_local = model(batch['local_masked'])
    recon_global, enc_global, dec_global = model(batch['global_masked'])
    mse = mae_loss(
        (recon_local, batch['local'], batch['local_mask_map']),
        (recon_global, batch['global'], batch['global_mask_map']),
    )
    return mse, (enc_local, dec_local), (enc_global, dec_global)


def pair_losses(model: MaskedAutoencoder, pairs: List[Tuple[MaskedViews, MaskedViews]],
                weights: LossWeights, config: MaeConfig, device='cpu') -> Dict[str, torch.Tensor]:
    batch_i = collate([p[0] for p in pairs], device)
    batch_j = collate([p[1] for p in pairs], device)
    mse_i, local_i, global_i = _forward(model, batch_i)
    mse_j, local_j, global_j = _forward(model, batch_j)

    mse = 0.5 * (mse_i + mse_j)
    sc = 0.5 * sum(
        semantic_consistency(a[0], b[0], a[1], b[1], weights.lambda_enc, weights.lambda_dec,
                             weights.epsilon, weights.paper_literal_cosine)
        for a, b in ((local_i, local_j), (global_i, global_j))
    )
    total = mae_total(mse, sc, config.gamma_sc)
    losses = {'mse': mse, 'sc': sc}
    if config.cos_weight:
        losses['cos'] = 0.5 * (cosine_align(local_i[0], global_i[0], weights.epsilon)
                               + cosine_align(local_j[0], global_j[0], weights.epsilon))
        total = total + config.cos_weight * losses['cos']
    losses['total'] = total
    return losses


def _scheduler(optimizer, config: MaeConfig, total_steps: int):
    if config.lr_schedule == 'cosine':
        return torch.optim.lr_scheduler.LambdaLR(
            optimizer, lambda step: 0.5 * (1 + math.cos(math.pi * min(step, total_steps) / total_steps)))
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: 1.0)


def _write_log(history: List[Dict], out_dir: Path):
    pd.DataFrame(history, columns=LOSS_COLUMNS).to_csv(out_dir / LOSS_LOG, index=False)


def pretrain(config: Dict, dataset_dir: Path, out_dir: Path, resume: Optional[Path] = None,
             on_event: Optional[EventHook] = None) -> Path:
    """Run MAE pretraining; returns the path of the final checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mae_config = MaeConfig.from_config(config)
    weights = LossWeights.from_section(config['loss'])
    options = DataprepOptions.from_section(config['dataprep'])
    spec = NetworkSpec.from_config(config)
    device = resolve_device(config['output']['device'])
    emit = on_event or (lambda kind, message, step: None)

    manifest = Manifest.load(dataset_dir)
    check_split_hygiene(manifest.records)
    pool = EchoPool(SliceStore(manifest, options.percentile), options, mae_config.mask_ratio,
                    augment_views=mae_config.augment)
    total_steps = mae_config.total_steps(len(pool))

    rng = np.random.default_rng(mae_config.data_seed)
    history: List[Dict] = []
    start_step = 0
    if resume is not None:
        model, payload = load_mae(resume, device, spec=spec)
        start_step = int(payload['step'])
        history = [row for row in payload.get('history', []) if row['step'] <= start_step]
    else:
        model = build_mae(spec, mae_config.model_seed).to(device)

    optimizer = torch.optim.AdamW(model.parameters(), lr=mae_config.lr, weight_decay=mae_config.weight_decay,
                                  betas=(mae_config.beta1, mae_config.beta2))
    scheduler = _scheduler(optimizer, mae_config, total_steps)
    if resume is not None:
        optimizer.load_state_dict(payload['optimizer'])
        scheduler.load_state_dict(payload['scheduler'])
        restore_rng_state(payload['rng'], rng)
        logger.info(f"Resuming pretraining from {resume} at step {start_step}")

    digest = config_digest(config)

    def checkpoint(step: int) -> Path:
        path = save_checkpoint(out_dir / f'mae_{step}.ckpt', 'mae', {
            'network_spec': spec.to_dict(),
            'model': model.state_dict(),
            'optimizer': optimizer.state_dict(),
            'scheduler': scheduler.state_dict(),
            'step': step,
            'total_steps': total_steps,
            'rng': capture_rng_state(rng),
            'config_hash': digest,
            'mae_echoes': pool.echoes,
            'history': history,
        })
        emit('CHECKPOINT', f"wrote {path.name}", step)
        return path

    logger.info(f"Pretraining for {total_steps} steps on {len(pool)} slices, echoes {pool.echoes}")
    model.train()
    for step in range(start_step + 1, total_steps + 1):
        pairs = [sample_echo_pair(pool, rng) for _ in range(mae_config.batch_size)]
        losses = pair_losses(model, pairs, weights, mae_config, device)
        for name, value in losses.items():
            try:
                ensure_finite(name, value, step)
            except TrainingDiverged as e:
                _write_log(history, out_dir)
                emit('FAILURE', str(e), step)
                logger.error(f"Non-finite loss at step {step}: "
                             + ', '.join(f'{k}={v.item():.4g}' for k, v in losses.items()))
                raise

        optimizer.zero_grad(set_to_none=True)
        losses['total'].backward()
        optimizer.step()
        scheduler.step()

        history.append({'step': step, **{k: losses[k].item() for k in ('mse', 'sc', 'total')}})
        if step % mae_config.log_every == 0 or step == total_steps:
            logger.info(f"step {step}/{total_steps} mse={history[-1]['mse']:.5f} "
                        f"sc={history[-1]['sc']:.5f} total={history[-1]['total']:.5f}")
            _write_log(history, out_dir)
        if step % mae_config.checkpoint_every == 0 and step != total_steps:
            checkpoint(step)

    _write_log(history, out_dir)
    final = checkpoint(total_steps)
    model.eval()
    sample = sample_echo_pair(pool, np.random.default_rng(mae_config.data_seed + 1))[0]
    save_reconstruction_grid(model, sample, out_dir / 'reconstruction.png', device)
    logger.info(f"Pretraining finished, checkpoint {final}")
    return final


@torch.no_grad()
def cross_echo_similarity(model: MaskedAutoencoder, dataset_dir: Path, echo_a: int = 1, echo_b: int = 6,
                          split: str = 'test', percentile: float = 99.5, view_size: int = 256) -> float:
    """Mean pooled-feature cosine similarity between two echoes of the same slices."""
    manifest = Manifest.load(dataset_dir)
    store = SliceStore(manifest, percentile)
    device = next(model.parameters()).device
    model.eval()
    similarities = []
    for echoes in manifest.series(split).values():
        if echo_a not in echoes or echo_b not in echoes:
            continue
        features = [
            model.encoder(torch.from_numpy(
                whole_slice_views(store.image(echoes[e]), view_size=view_size).global_view
            ).float()[None, None].to(device))
            for e in (echo_a, echo_b)
        ]
        similarities.append(1.0 - cosine_align(*features).item())
    if not similarities:
        raise ValueError(f"No slice in split '{split}' carries echoes {echo_a} and {echo_b}")
    return float(np.mean(similarities))
