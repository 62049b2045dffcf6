"""
Management command to regenerate docs/method_map.md from the implementation registry.
"""
from pathlib import Path

from django.conf import settings

from methodmap.registry import IN_SCOPE, generate_method_map
from specmatch.commands import SpecmatchCommand
from specmatch.exceptions import DataError
from specmatch.storage import atomic_write


class Command(SpecmatchCommand):
    help = 'Write the method-step to implementation table (fails if any step is unregistered)'

    def add_command_arguments(self, parser):
        parser.add_argument('--check', action='store_true',
                            help='Only verify the registry; exit non-zero if the file on disk is out of date')

    def run(self, *args, **options):
        out_dir = Path(options['out']) if options['out'] else Path(settings.BASE_DIR) / 'docs'
        path = out_dir / 'method_map.md'
        document = generate_method_map()

        if options['check']:
            current = path.read_text(encoding='utf-8') if path.exists() else None
            if current != document:
                raise DataError(f'{path} is out of date; run `python manage.py methodmap`')
            self.stdout.write(self.style.SUCCESS(f'{path} is up to date ({len(IN_SCOPE)} steps)'))
            return

        with atomic_write(path) as fh:
            fh.write(document)
        self.stdout.write(self.style.SUCCESS(f'Done. {len(IN_SCOPE)} steps written to {path}'))
