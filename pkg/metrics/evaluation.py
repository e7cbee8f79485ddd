import logging
from pathlib import Path
from typing import Dict, Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from dataprep.datasets import SliceStore, whole_slice_views
from networks.segmenter import ContrastSegmenter, segment
from phantom.io import Manifest

from .report import MetricReport, evaluate_slice

logger = logging.getLogger(__name__)


@torch.no_grad()
def predict_slice(model: ContrastSegmenter, image: np.ndarray, view_size: int = 256) -> np.ndarray:
    """Binary prediction at the slice's own resolution."""
    logits = segment(model, whole_slice_views(image, view_size=view_size))
    logits = F.interpolate(logits, size=image.shape, mode='bilinear', align_corners=False)
    return logits.argmax(dim=1)[0].cpu().numpy().astype(np.uint8)


def evaluate_checkpoint(model: ContrastSegmenter, dataset_dir: Path, evaluation: Dict,
                        weights: str = 'student', echoes: Optional[Iterable[int]] = None,
                        percentile: float = 99.5, view_size: int = 256,
                        report: Optional[MetricReport] = None) -> MetricReport:
    """Score ``model`` on every labelled test slice, one record per slice and echo."""
    manifest = Manifest.load(dataset_dir)
    store = SliceStore(manifest, percentile)
    report = report or MetricReport(manifest.pixel_spacing)
    wanted = set(echoes) if echoes else None
    model.eval()
    for (subject_id, slice_id), by_echo in manifest.series('test').items():
        for echo, record in sorted(by_echo.items()):
            if wanted is not None and echo not in wanted:
                continue
            prediction = predict_slice(model, store.image(record), view_size)
            values = evaluate_slice(
                prediction, store.label(record), manifest.pixel_spacing,
                nsd_tolerance=evaluation.get('nsd_tolerance', 1.0),
                hd_percentile=evaluation.get('hd_percentile'),
                connectivity=evaluation.get('connectivity', 4),
            )
            report.add(subject_id, slice_id, echo, values, weights=weights)
    logger.info(f"Evaluated {weights} weights on {len(report.records)} slice records")
    return report
