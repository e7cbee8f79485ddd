"""Run configuration: defaults from settings, a YAML file, environment overrides, then validation."""
import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np
import torch
import yaml
from django.conf import settings

from phantom.io import file_digest

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = 'resolved_config.yaml'
RUN_INFO = 'run_info.json'


class ConfigError(ValueError):
    pass


def _merge(base: Dict, override: Mapping, origin: str) -> Dict:
    for section, values in override.items():
        if section not in base:
            raise ConfigError(f"{origin}: unknown section '{section}'")
        if not isinstance(values, Mapping):
            raise ConfigError(f"{origin}: section '{section}' must be a mapping")
        base[section].update(values)
    return base


def env_overrides(environ: Mapping[str, str]) -> Dict:
    """``PLACENTA_<SECTION>__<KEY>=<yaml literal>`` pairs as a nested dict."""
    prefix = settings.CONFIG_ENV_PREFIX
    overrides: Dict[str, Dict] = {}
    for name, raw in environ.items():
        if not name.startswith(prefix) or '__' not in name:
            continue
        section, key = name[len(prefix):].lower().split('__', 1)
        try:
            overrides.setdefault(section, {})[key] = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"{name}: {e}")
    return overrides


def validate_config(config: Dict) -> Dict:
    from .serializers import RunConfigSerializer

    serializer = RunConfigSerializer(data=config)
    if not serializer.is_valid():
        raise ConfigError(f"Invalid configuration: {json.dumps(serializer.errors, default=str)}")
    # plain dicts and lists, no OrderedDict
    return json.loads(json.dumps(serializer.validated_data))


def load_run_config(path: Optional[Path] = None, environ: Optional[Mapping[str, str]] = None,
                    overrides: Optional[Dict] = None) -> Dict:
    """Defaults < YAML file < environment < ``overrides`` (command-line flags)."""
    config = copy.deepcopy(settings.RUN_CONFIG_DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file {path} does not exist")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}")
        if not isinstance(loaded, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping of sections")
        _merge(config, loaded, str(path))
    _merge(config, env_overrides(os.environ if environ is None else environ), 'environment')
    if overrides:
        _merge(config, overrides, 'command line')
    return validate_config(config)


def seed_overrides(seed: int) -> Dict:
    return {'seeds': {'phantom': seed, 'data': seed + 1, 'model': seed + 2}}


def config_digest(config: Dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def resolve_device(name: str) -> torch.device:
    if name == 'auto':
        return torch.device('cuda' if torch.cuda.is_available() else 'cpu')
    return torch.device(name)


def set_deterministic(enabled: bool):
    if enabled:
        os.environ.setdefault('CUBLAS_WORKSPACE_CONFIG', ':4096:8')
    torch.use_deterministic_algorithms(enabled)
    torch.backends.cudnn.benchmark = not enabled


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed)


def write_resolved_config(config: Dict, out_dir: Path) -> Path:
    path = Path(out_dir) / RESOLVED_CONFIG
    path.write_text(yaml.safe_dump(config, sort_keys=True))
    return path


def write_run_info(out_dir: Path, command: str, config: Dict, inputs: Optional[Dict[str, Path]] = None) -> Path:
    """Tool version, config digest and SHA-256 digests of every input file."""
    digests = {}
    for name, input_path in (inputs or {}).items():
        input_path = Path(input_path)
        if input_path.is_file():
            digests[name] = {'path': str(input_path), 'sha256': file_digest(input_path)}
        elif input_path.is_dir() and (input_path / 'manifest.json').exists():
            digests[name] = {'path': str(input_path), 'sha256': file_digest(input_path / 'manifest.json')}
    info = {
        'tool_version': settings.TOOL_VERSION,
        'command': command,
        'config_digest': config_digest(config),
        'inputs': digests,
        'torch_version': torch.__version__,
    }
    path = Path(out_dir) / RUN_INFO
    path.write_text(json.dumps(info, indent=2, sort_keys=True))
    return path
