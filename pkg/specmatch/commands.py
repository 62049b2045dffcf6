"""
Shared plumbing for the specmatch management commands.
"""
import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from .exceptions import SpecmatchError
from .forms import load_run_config

logger = logging.getLogger(__name__)


class SpecmatchCommand(BaseCommand):
    """
    Adds --config/--out/--seed and maps SpecmatchError onto the command's
    exit code. Subclasses implement `run(**options)`.
    """
    config_sections = ()

    def add_arguments(self, parser):
        parser.add_argument('--config', help='JSON run config')
        parser.add_argument('--out', help='Output directory')
        parser.add_argument('--seed', type=int, help='Overrides train.seed (and the spectral eigensolver seed)')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def load_config(self, options, sections=None, overrides=None):
        overrides = dict(overrides or {})
        if options.get('seed') is not None:
            overrides.setdefault('train', {})['seed'] = options['seed']
        return load_run_config(options.get('config'), sections or self.config_sections, overrides)

    def output_dir(self, options, config=None, default=None):
        out = options.get('out')
        if not out and config is not None and config.has('paths'):
            out = config.get('paths')['out_dir']
        if not out:
            out = default
        if not out:
            raise CommandError('an output directory is required (--out or paths.out_dir)', returncode=2)
        return Path(out)

    def handle(self, *args, **options):
        try:
            self.run(*args, **options)
        except SpecmatchError as e:
            logger.debug('%s failed', self.__class__.__module__, exc_info=True)
            raise CommandError(str(e), returncode=e.exit_code) from e

    def run(self, *args, **options):
        raise NotImplementedError
