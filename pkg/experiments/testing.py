"""Small-run configuration shared by the trainer and command test suites."""
from pathlib import Path
from typing import Dict, Optional

from phantom.dataset import PhantomConfig, make_dataset

from .config import load_run_config

TINY_OVERRIDES = {
    'phantom': {
        'subjects': 8, 'slices_per_subject': 1, 'height': 64, 'width': 64,
        'test_subjects': 2, 'mae_subjects': 2,
    },
    'dataprep': {'view_size': 64},
    'networks': {
        'depth': 1, 'embed_dim': 32, 'num_heads': 2, 'patch_size': 16,
        'decoder_dim': 16, 'decoder_depth': 1, 'aspp_channels': 16, 'aspp_dilations': [1, 2, 3],
    },
    'mae': {'epochs': 1, 'max_steps': 4, 'batch_size': 2, 'lr': 1e-3, 'checkpoint_every': 2, 'log_every': 1},
    'mpl': {'epochs': 3, 'warmup_epochs': 1, 'patience': 5, 'lr': 1e-3, 'panel_every': 1, 'log_every': 1},
    'seeds': {'phantom': 11, 'data': 12, 'model': 13},
    'output': {'device': 'cpu'},
}


def tiny_run_config(dataset_dir: Optional[Path] = None, **sections: Dict) -> Dict:
    overrides = {name: dict(values) for name, values in TINY_OVERRIDES.items()}
    for name, values in sections.items():
        overrides.setdefault(name, {}).update(values)
    if dataset_dir is not None:
        overrides['output']['dataset_dir'] = str(dataset_dir)
    return load_run_config(environ={}, overrides=overrides)


def make_tiny_dataset(root: Path, config: Optional[Dict] = None) -> Path:
    config = config or tiny_run_config()
    make_dataset(PhantomConfig.from_section(config['phantom'], seed=config['seeds']['phantom']), root)
    return Path(root)
