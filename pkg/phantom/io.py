"""On-disk dataset format: float32 rasters, 8-bit PNG masks and a JSON manifest."""
import hashlib
import json
import logging
import os
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

RASTER_MAGIC = b'PLR1'
MANIFEST_NAME = 'manifest.json'
MANIFEST_VERSION = 1

# split groups that must never share a subject
SPLIT_GROUPS = {
    'mae': 'mae',
    'source': 'adaptation',
    'target': 'adaptation',
    'validation': 'validation',
    'test': 'test',
}


def write_raster(path: Path, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"Raster must be 2D, got shape {image.shape}")
    header = RASTER_MAGIC + np.array(image.shape, dtype='<i4').tobytes()
    with open(path, 'wb') as f:
        f.write(header)
        f.write(np.ascontiguousarray(image, dtype='<f4').tobytes())


def read_raster(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RASTER_MAGIC:
        raise ValueError(f"{path} is not a raster file")
    height, width = np.frombuffer(data[4:12], dtype='<i4')
    pixels = np.frombuffer(data[12:], dtype='<f4')
    if pixels.size != height * width:
        raise ValueError(f"{path}: expected {height}x{width} pixels, found {pixels.size}")
    return pixels.reshape(int(height), int(width)).astype(np.float32)


def write_mask_png(path: Path, mask: np.ndarray):
    Image.fromarray(np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8), mode='L').save(path)


def read_mask_png(path: Path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert('L')) > 127).astype(np.uint8)


@dataclass(frozen=True)
class ManifestRecord:
    subject_id: str
    slice_id: int
    echo: int  # 1-based echo index
    te_ms: float
    split: str
    labeled: bool
    image: str
    mask: Optional[str]

    @property
    def series_key(self) -> Tuple[str, int]:
        return self.subject_id, self.slice_id


class Manifest:

    def __init__(self, root: Path, meta: Dict, records: List[ManifestRecord]):
        self.root = Path(root)
        self.meta = meta
        self.records = records

    @classmethod
    def load(cls, root: Path) -> 'Manifest':
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"No manifest at {path}")
        payload = json.loads(path.read_text())
        if payload.get('format_version') != MANIFEST_VERSION:
            raise ValueError(f"Unsupported manifest version {payload.get('format_version')}")
        records = [ManifestRecord(**record) for record in payload.pop('records')]
        return cls(root, payload, records)

    @property
    def pixel_spacing(self) -> Tuple[float, float]:
        return tuple(self.meta.get('pixel_spacing', (1.0, 1.0)))

    def select(self, split: Optional[str] = None, echo: Optional[int] = None,
               labeled: Optional[bool] = None) -> List[ManifestRecord]:
        return [
            r for r in self.records
            if (split is None or r.split == split)
            and (echo is None or r.echo == echo)
            and (labeled is None or r.labeled == labeled)
        ]

    def echoes(self, split: str) -> List[int]:
        return sorted({r.echo for r in self.select(split)})

    def series(self, split: str) -> Dict[Tuple[str, int], Dict[int, ManifestRecord]]:
        """Records of a split grouped by (subject, slice), then by echo."""
        grouped: Dict[Tuple[str, int], Dict[int, ManifestRecord]] = {}
        for record in self.select(split):
            grouped.setdefault(record.series_key, {})[record.echo] = record
        return dict(sorted(grouped.items()))

    def image(self, record: ManifestRecord) -> np.ndarray:
        return read_raster(self.root / record.image)

    def mask(self, record: ManifestRecord) -> np.ndarray:
        if not record.labeled or record.mask is None:
            raise ValueError(f"Labels are withheld for {record.subject_id}/{record.slice_id} echo {record.echo}")
        return read_mask_png(self.root / record.mask)


def check_split_hygiene(records: Iterable[ManifestRecord]):
    groups: Dict[str, set] = {}
    for record in records:
        groups.setdefault(record.subject_id, set()).add(SPLIT_GROUPS[record.split])
    leaking = {subject: sorted(found) for subject, found in groups.items() if len(found) > 1}
    if leaking:
        raise ValueError(f"Subjects shared across splits: {leaking}")


def write_manifest(root: Path, meta: Dict, records: List[ManifestRecord]) -> Path:
    check_split_hygiene(records)
    payload = dict(meta, format_version=MANIFEST_VERSION, records=[asdict(r) for r in records])
    path = Path(root) / MANIFEST_NAME
    tmp_path = path.with_suffix('.tmp')
    tmp_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp_path, path)
    return path


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


ECHO_PATTERN = re.compile(r'(?:_e|echo-)(\d+)', re.IGNORECASE)


def load_nifti_series(paths: Iterable[Path], te_ms: List[float], mask_path: Optional[Path] = None,
                      subject_id: str = '', slice_id: int = 0):
    """Read a clinical multi-echo slice stored as one NIfTI file per echo.

    The echo index is parsed from ``_e<k>`` or ``echo-<k>`` in the file name.
    Returns the series and the in-plane pixel spacing from the header.
    """
    import nibabel as nib

    from .simulation import EchoSeries

    by_echo = {}
    spacing = (1.0, 1.0)
    for path in paths:
        match = ECHO_PATTERN.search(Path(path).name)
        if not match:
            raise ValueError(f"Cannot parse echo index from {path}")
        volume = nib.load(str(path))
        by_echo[int(match.group(1))] = np.squeeze(np.asarray(volume.get_fdata(), dtype=np.float64))
        spacing = tuple(float(z) for z in volume.header.get_zooms()[:2])

    echoes = sorted(by_echo)
    images = np.stack([np.clip(by_echo[e], 0.0, None) for e in echoes])
    if mask_path is not None:
        mask = (np.squeeze(np.asarray(nib.load(str(mask_path)).get_fdata())) > 0).astype(np.uint8)
    else:
        mask = np.zeros(images.shape[1:], dtype=np.uint8)
    series = EchoSeries(images=images, te_ms=[te_ms[e - 1] for e in echoes], mask=mask,
                        subject_id=subject_id, slice_id=slice_id, pixel_spacing=spacing)
    return series, spacing
