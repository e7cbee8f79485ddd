"""Versioned checkpoint container.

A checkpoint is ``torch.save`` of ``{'format_version', 'kind', 'payload'}``.
The archive is serialized in memory first, so its bytes do not depend on the
file name, and saving the result of a load reproduces the file byte for byte.
"""
import io
import json
import logging
import os
import pickle
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch
from django.core.exceptions import ImproperlyConfigured

from networks.decoders import ReconstructionDecoder
from networks.segmenter import ContrastSegmenter, MaskedAutoencoder, NetworkSpec

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def save_checkpoint(path: Path, kind: str, payload: Dict) -> Path:
    """Write ``payload`` (state dicts, tensors, plain values) atomically."""
    path = Path(path)
    buffer = io.BytesIO()
    torch.save({'format_version': CHECKPOINT_VERSION, 'kind': kind, 'payload': payload}, buffer)

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + '.tmp')
    tmp_path.write_bytes(buffer.getvalue())
    os.replace(tmp_path, path)
    logger.debug(f"Saved {kind} checkpoint to {path}")
    return path


def load_checkpoint(path: Path, kind: Optional[str] = None) -> Dict:
    path = Path(path)
    try:
        # optimizer and RNG state need full unpickling; only our own files are loaded
        container = torch.load(path, map_location='cpu', weights_only=False)
    except (pickle.UnpicklingError, RuntimeError, EOFError) as e:
        raise ImproperlyConfigured(f"{path} is not a checkpoint file: {e}")
    if not isinstance(container, dict) or 'format_version' not in container:
        raise ImproperlyConfigured(f"{path} is not a checkpoint file")
    if container['format_version'] != CHECKPOINT_VERSION:
        raise ImproperlyConfigured(f"{path}: unsupported checkpoint version {container['format_version']}")
    if kind is not None and container['kind'] != kind:
        raise ImproperlyConfigured(f"{path} holds a '{container['kind']}' checkpoint, expected '{kind}'")
    return container['payload']


def _plain(value):
    return json.loads(json.dumps(value))


def check_network_spec(payload: Dict, expected: Dict, path: Path = None):
    stored = payload.get('network_spec')
    if stored is None or _plain(stored) != _plain(expected):
        raise ImproperlyConfigured(f"Checkpoint {path} was written for network spec {stored}, not {expected}")


def capture_rng_state(generator: Optional[np.random.Generator] = None) -> Dict:
    state = {'torch': torch.get_rng_state()}
    if generator is not None:
        state['numpy'] = generator.bit_generator.state
    return state


def restore_rng_state(state: Dict, generator: Optional[np.random.Generator] = None):
    torch.set_rng_state(state['torch'])
    if generator is not None and 'numpy' in state:
        generator.bit_generator.state = state['numpy']


def load_mae(path: Path, device='cpu', spec=None):
    payload = load_checkpoint(path, kind='mae')
    if spec is not None:
        check_network_spec(payload, spec.to_dict(), path)
    model = MaskedAutoencoder(NetworkSpec.from_dict(payload['network_spec']))
    model.load_state_dict(payload['model'])
    return model.to(device), payload


def load_segmenter(path: Path, device='cpu', weights: str = 'student', spec=None):
    """Rebuild a segmenter from an adaptation checkpoint; ``weights`` is 'student' or 'teacher'."""
    payload = load_checkpoint(path, kind='mpl')
    if spec is not None:
        check_network_spec(payload, spec.to_dict(), path)
    if weights not in ('student', 'teacher'):
        raise ValueError(f"Unknown weight set '{weights}'")
    network_spec = NetworkSpec.from_dict(payload['network_spec'])
    state = payload[weights]
    reconstruction = None
    if any(key.startswith('reconstruction.') for key in state):
        reconstruction = ReconstructionDecoder(network_spec.encoder, network_spec.reconstruction)
    model = ContrastSegmenter(network_spec, reconstruction=reconstruction)
    model.load_state_dict(state)
    return model.to(device), payload
