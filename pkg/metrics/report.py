import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .overlap import accuracy, dice, iou
from .surface import hausdorff, nsd

logger = logging.getLogger(__name__)

# column order of the comparison tables
TABLE_COLUMNS = ['Method', 'Echo', 'Dice (%)', 'IoU (%)', 'Acc (%)', 'NSD (%)', 'HD (mm)']


@dataclass
class SliceRecord:
    subject_id: str
    slice_id: int
    echo: int
    dice: float
    iou: float
    accuracy: float
    nsd: float
    hd: float
    empty_surface: bool = False
    weights: str = 'student'

    def __post_init__(self):
        for name in ('dice', 'iou', 'accuracy', 'nsd'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if self.hd < 0:
            raise ValueError(f"hd={self.hd} is negative")
        if self.iou > self.dice + 1e-12:
            raise ValueError(f"iou {self.iou} exceeds dice {self.dice}")


def evaluate_slice(pred, gt, pixel_spacing: Sequence[float] = (1.0, 1.0), nsd_tolerance: float = 1.0,
                   hd_percentile: Optional[float] = None, connectivity: int = 4) -> Dict:
    hd = hausdorff(pred, gt, pixel_spacing, percentile=hd_percentile, connectivity=connectivity)
    return {
        'dice': dice(pred, gt),
        'iou': iou(pred, gt),
        'accuracy': accuracy(pred, gt),
        'nsd': nsd(pred, gt, nsd_tolerance, connectivity=connectivity),
        'hd': hd,
        'empty_surface': math.isinf(hd),
    }


class MetricReport:
    """Per-slice metric records plus per-echo aggregates."""

    def __init__(self, pixel_spacing: Tuple[float, float] = (1.0, 1.0), records: Iterable[SliceRecord] = ()):
        self.pixel_spacing = tuple(pixel_spacing)
        self.records: List[SliceRecord] = list(records)

    def add(self, subject_id: str, slice_id: int, echo: int, values: Dict, weights: str = 'student') -> SliceRecord:
        record = SliceRecord(subject_id=subject_id, slice_id=slice_id, echo=echo, weights=weights, **values)
        self.records.append(record)
        return record

    def frame(self) -> pd.DataFrame:
        columns = [f.name for f in fields(SliceRecord)]
        return pd.DataFrame([asdict(r) for r in self.records], columns=columns)

    def aggregates(self) -> pd.DataFrame:
        """Mean of every metric per (weights, echo); HD averages finite values only."""
        frame = self.frame()
        if frame.empty:
            return pd.DataFrame(columns=['weights', 'echo', 'dice', 'iou', 'accuracy', 'nsd', 'hd',
                                         'empty_surfaces', 'slices'])
        rows = []
        for (weights, echo), group in frame.groupby(['weights', 'echo'], sort=True):
            finite_hd = group['hd'][np.isfinite(group['hd'])]
            rows.append({
                'weights': weights,
                'echo': int(echo),
                'dice': group['dice'].mean(),
                'iou': group['iou'].mean(),
                'accuracy': group['accuracy'].mean(),
                'nsd': group['nsd'].mean(),
                'hd': finite_hd.mean() if len(finite_hd) else float('nan'),
                'empty_surfaces': int(group['empty_surface'].sum()),
                'slices': len(group),
            })
        return pd.DataFrame(rows)

    def table(self, method: Optional[str] = None) -> pd.DataFrame:
        """Per-echo rows in the published column order; ``method`` prefixes the weight-set name."""
        aggregates = self.aggregates()
        return pd.DataFrame({
            'Method': [f'{method} {w}' if method else w for w in aggregates['weights']],
            'Echo': aggregates['echo'],
            'Dice (%)': aggregates['dice'] * 100,
            'IoU (%)': aggregates['iou'] * 100,
            'Acc (%)': aggregates['accuracy'] * 100,
            'NSD (%)': aggregates['nsd'] * 100,
            'HD (mm)': aggregates['hd'],
        }, columns=TABLE_COLUMNS)

    @classmethod
    def from_csv(cls, path: Path, pixel_spacing=(1.0, 1.0)) -> 'MetricReport':
        frame = pd.read_csv(path)
        records = [
            SliceRecord(
                subject_id=str(row.subject_id), slice_id=int(row.slice_id), echo=int(row.echo),
                dice=float(row.dice), iou=float(row.iou), accuracy=float(row.accuracy), nsd=float(row.nsd),
                hd=float(row.hd), empty_surface=bool(row.empty_surface), weights=str(row.weights),
            )
            for row in frame.itertuples(index=False)
        ]
        return cls(pixel_spacing, records)
