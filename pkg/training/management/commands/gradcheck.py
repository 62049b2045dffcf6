"""
Management command to finite-difference check every differentiated loss pipeline.
"""
from django.core.management.base import CommandError

from specmatch.commands import SpecmatchCommand
from training.diagnostics import PIPELINES, TOLERANCE, run_gradchecks


class Command(SpecmatchCommand):
    help = 'Compare reverse-mode gradients with central differences for each loss pipeline'

    def add_command_arguments(self, parser):
        parser.add_argument('pipelines', nargs='*', help=f'Subset of: {", ".join(PIPELINES)}')
        parser.add_argument('--samples', type=int, default=5, help='Sampled entries per parameter tensor')
        parser.add_argument('--tolerance', type=float, default=TOLERANCE)

    def run(self, *args, **options):
        seed = options['seed'] if options['seed'] is not None else 0
        results = run_gradchecks(
            options['pipelines'] or None, n_samples=options['samples'], seed=seed, tolerance=options['tolerance'],
        )
        failed = 0
        for result in results:
            line = f'  {result.name:<12} max rel. error {result.max_error:.3e} over {result.n_samples} samples'
            if result.passed:
                self.stdout.write(f'PASS{line}')
            else:
                failed += 1
                self.stdout.write(self.style.WARNING(f'FAIL{line}'))

        summary = f'\nDone. Passed: {len(results) - failed}, Failed: {failed}'
        if failed:
            self.stdout.write(self.style.WARNING(summary))
            raise CommandError(f'{failed} gradient check(s) above {options["tolerance"]:g}', returncode=4)
        self.stdout.write(self.style.SUCCESS(summary))
