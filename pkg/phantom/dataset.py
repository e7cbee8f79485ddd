import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .io import ManifestRecord, write_manifest, write_mask_png, write_raster
from .simulation import default_te_list, make_series
from .tissue import make_tissue_map

logger = logging.getLogger(__name__)


@dataclass
class PhantomConfig:
    subjects: int = 30
    slices_per_subject: int = 2
    height: int = 256
    width: int = 256
    pixel_spacing: tuple = (1.0, 1.0)
    te_ms: List[float] = field(default_factory=default_te_list)
    noise_sigma: float = 4.0
    source_echo: int = 1
    target_echoes: List[int] = field(default_factory=lambda: [2, 6])
    mae_echoes: Optional[List[int]] = None
    mae_echo_count: int = 5
    test_subjects: int = 5
    mae_subjects: int = 10
    validation_fraction: float = 0.1
    workers: int = 1
    seed: int = 7

    @classmethod
    def from_section(cls, section: Dict, seed: int) -> 'PhantomConfig':
        known = {f.name for f in fields(cls)}
        return cls(seed=seed, **{k: v for k, v in section.items() if k in known})

    def subject_ids(self) -> List[str]:
        return [f"sub-{index:03d}" for index in range(1, self.subjects + 1)]

    def resolve_mae_echoes(self) -> List[int]:
        if self.mae_echoes:
            return sorted(self.mae_echoes)
        reserved = {self.source_echo, *self.target_echoes}
        pool = [e for e in range(1, len(self.te_ms) + 1) if e not in reserved]
        if len(pool) < self.mae_echo_count:
            raise ValueError(f"Only {len(pool)} echoes left for pretraining, need {self.mae_echo_count}")
        rng = np.random.default_rng([self.seed, 1])
        return sorted(int(e) for e in rng.choice(pool, size=self.mae_echo_count, replace=False))


def assign_splits(config: PhantomConfig) -> Dict[str, List[str]]:
    """Subject-level partition into mae / source (train) / validation / test."""
    subjects = config.subject_ids()
    adaptation_count = len(subjects) - config.test_subjects - config.mae_subjects
    if config.test_subjects < 1 or config.mae_subjects < 1 or adaptation_count < 2:
        raise ValueError(
            f"Cannot split {len(subjects)} subjects into {config.test_subjects} test, "
            f"{config.mae_subjects} pretraining and at least 2 adaptation subjects"
        )
    order = np.random.default_rng([config.seed, 0]).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]

    test = shuffled[:config.test_subjects]
    mae = shuffled[config.test_subjects:config.test_subjects + config.mae_subjects]
    adaptation = shuffled[config.test_subjects + config.mae_subjects:]
    validation_count = min(max(1, round(config.validation_fraction * len(adaptation))), len(adaptation) - 1)
    splits = {
        'test': sorted(test),
        'mae': sorted(mae),
        'validation': sorted(adaptation[:validation_count]),
        'source': sorted(adaptation[validation_count:]),
    }
    seen = [s for members in splits.values() for s in members]
    if len(seen) != len(set(seen)):
        raise ValueError("Overlapping subject IDs across splits")
    return splits


def _series_seed(seed: int, subject_index: int, slice_index: int) -> int:
    return int(np.random.SeedSequence([seed, subject_index, slice_index]).generate_state(1)[0])


def _generate_series(config: PhantomConfig, subject_index: int, subject_id: str, slice_index: int):
    seed = _series_seed(config.seed, subject_index, slice_index)
    tissue = make_tissue_map(seed, config.height, config.width)
    return make_series(tissue, config.te_ms, config.noise_sigma, seed,
                       subject_id=subject_id, slice_id=slice_index,
                       pixel_spacing=config.pixel_spacing)


def _echo_roles(config: PhantomConfig, role: str, mae_echoes: List[int]):
    """(echo, split, labeled) triples written for a subject of the given role."""
    if role == 'mae':
        return [(e, 'mae', False) for e in mae_echoes]
    if role == 'source':
        return [(config.source_echo, 'source', True)] + [(e, 'target', False) for e in config.target_echoes]
    if role == 'validation':
        return [(config.source_echo, 'validation', True)]
    return [(e, 'test', True) for e in range(1, len(config.te_ms) + 1)]


def make_dataset(config: PhantomConfig, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    (out_dir / 'images').mkdir(parents=True, exist_ok=True)
    (out_dir / 'masks').mkdir(parents=True, exist_ok=True)

    splits = assign_splits(config)
    role_of = {subject: role for role, members in splits.items() for subject in members}
    mae_echoes = config.resolve_mae_echoes()
    jobs = [
        (index, subject_id, slice_index)
        for index, subject_id in enumerate(config.subject_ids(), start=1)
        for slice_index in range(config.slices_per_subject)
    ]

    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            series_list = list(pool.map(_generate_series, [config] * len(jobs), *zip(*jobs)))
    else:
        series_list = [_generate_series(config, *job) for job in jobs]

    records = []
    for series in series_list:
        stem = f"{series.subject_id}_slice-{series.slice_id}"
        roles = _echo_roles(config, role_of[series.subject_id], mae_echoes)
        mask_name = None
        if any(labeled for _, _, labeled in roles):
            mask_name = f"masks/{stem}.png"
            write_mask_png(out_dir / mask_name, series.mask)
        for echo, split, labeled in roles:
            image_name = f"images/{stem}_echo-{echo}.f32"
            write_raster(out_dir / image_name, series.echo(echo))
            records.append(ManifestRecord(
                subject_id=series.subject_id,
                slice_id=series.slice_id,
                echo=echo,
                te_ms=series.te_ms[echo - 1],
                split=split,
                labeled=labeled,
                image=image_name,
                mask=mask_name if labeled else None,
            ))

    meta = {
        'generator': 'phantom',
        'seed': config.seed,
        'height': config.height,
        'width': config.width,
        'pixel_spacing': list(config.pixel_spacing),
        'te_ms': list(config.te_ms),
        'echo_spacing': 'uniform (assumed)',
        'noise_sigma': config.noise_sigma,
        'source_echo': config.source_echo,
        'target_echoes': list(config.target_echoes),
        'mae_echoes': mae_echoes,
        'splits': splits,
    }
    path = write_manifest(out_dir, meta, records)
    for split in ('mae', 'source', 'target', 'validation', 'test'):
        logger.info(f"Split {split}: {sum(r.split == split for r in records)} images")
    return path
