"""Shared plumbing for the run commands: config, output directory and run records."""
import logging
import sys
from pathlib import Path
from typing import Dict, Optional

from django.core.exceptions import ImproperlyConfigured
from django.core.management.base import BaseCommand, CommandError, CommandParser
from django.utils import timezone

from .config import (
    ConfigError, config_digest, load_run_config, seed_everything, seed_overrides, set_deterministic,
    write_resolved_config, write_run_info,
)
from .models import ExperimentRun, RunEvent

logger = logging.getLogger(__name__)

INCOMPLETE_MARKER = '.incomplete'

# exit codes
USAGE_ERROR = 1
RUNTIME_FAILURE = 2


class RunCommandParser(CommandParser):
    """Reports argument errors with the usage-error exit code."""

    def error(self, message):
        if self.called_from_command_line:
            self.print_usage(sys.stderr)
            self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")
        raise CommandError(f"Error: {message}", returncode=USAGE_ERROR)


class RunCommand(BaseCommand):
    """Base for commands that produce a self-describing output directory.

    Subclasses set ``run_name`` and implement ``run``; they may override
    ``add_run_arguments``, ``inputs`` and ``default_out``.
    """
    run_name = ''

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.__class__ = RunCommandParser
        return parser

    def add_arguments(self, parser):
        parser.add_argument('--config', type=Path, help='YAML run configuration merged over the defaults')
        parser.add_argument('--seed', type=int, help='base seed: phantom=S, data=S+1, model=S+2')
        parser.add_argument('--out', type=Path, help='output directory')
        parser.add_argument('--deterministic', action='store_true', help='force deterministic kernels')
        self.add_run_arguments(parser)

    def add_run_arguments(self, parser):
        pass

    def inputs(self, config: Dict, options: Dict) -> Dict[str, Optional[Path]]:
        return {}

    def default_out(self, config: Dict) -> Path:
        return Path(config['output']['runs_dir']) / self.run_name

    def run(self, config: Dict, out_dir: Path, options: Dict) -> str:
        raise NotImplementedError

    def event(self, kind: str, message: str = '', step: Optional[int] = None):
        RunEvent.objects.create(run=self.record, kind=kind, message=message, step=step)

    def load_config(self, options: Dict) -> Dict:
        overrides = seed_overrides(options['seed']) if options['seed'] is not None else {}
        if options['deterministic']:
            overrides['output'] = {'deterministic': True}
        try:
            return load_run_config(options['config'], overrides=overrides)
        except ConfigError as e:
            raise CommandError(str(e), returncode=USAGE_ERROR)

    def handle(self, *args, **options):
        config = self.load_config(options)
        inputs = {name: Path(path) for name, path in self.inputs(config, options).items() if path is not None}
        missing = [f"{name} ({path})" for name, path in inputs.items() if not path.exists()]
        if missing:
            raise CommandError(f"Missing inputs: {', '.join(missing)}", returncode=USAGE_ERROR)

        out_dir = Path(options['out'] or self.default_out(config))
        out_dir.mkdir(parents=True, exist_ok=True)
        marker = out_dir / INCOMPLETE_MARKER
        marker.write_text(f"{self.run_name} started\n")
        write_resolved_config(config, out_dir)
        write_run_info(out_dir, self.run_name, config, inputs)
        set_deterministic(config['output']['deterministic'])
        seed_everything(config['seeds']['model'])

        self.record = ExperimentRun.objects.create(
            command=self.run_name,
            out_dir=str(out_dir),
            config_digest=config_digest(config),
            seed=options['seed'],
        )
        self.event('START', f"{self.run_name} -> {out_dir}")
        try:
            summary = self.run(config, out_dir, options)
        except CommandError as e:
            self._fail(str(e))
            raise
        except ImproperlyConfigured as e:
            self._fail(str(e))
            raise CommandError(str(e), returncode=USAGE_ERROR)
        except (ValueError, RuntimeError, OSError) as e:
            logger.exception(f"{self.run_name} failed")
            self._fail(str(e))
            raise CommandError(f"{self.run_name} failed: {e}", returncode=RUNTIME_FAILURE)

        marker.unlink()
        self.record.status = 'COMPLETED'
        self.record.finished_at = timezone.now()
        self.record.save()
        self.event('COMPLETE', summary)
        self.stdout.write(self.style.SUCCESS(summary))

    def _fail(self, message: str):
        self.record.status = 'FAILED'
        self.record.finished_at = timezone.now()
        self.record.save()
        if not self.record.events.filter(kind='FAILURE').exists():
            self.event('FAILURE', message)
