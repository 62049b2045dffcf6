"""
Management command to score predicted correspondences against ground truth.
"""
from evaluation.manifest import load_manifest
from evaluation.metrics import PCK_THRESHOLDS
from evaluation.report import aggregate, evaluate_manifest, write_pck_plot, write_report
from specmatch.commands import SpecmatchCommand
from specmatch.storage import write_run_json


def _float_list(value):
    return [float(part) for part in value.split(',') if part.strip()]


class Command(SpecmatchCommand):
    help = 'Mean geodesic error (x100, normalized by sqrt(area)) and PCK for every pair of a manifest'
    config_sections = ('paths',)

    def add_command_arguments(self, parser):
        parser.add_argument('manifest', help='Pair manifest with ground truth')
        parser.add_argument('predictions', help='Directory of <source>__<target>.corr files')
        parser.add_argument('--thresholds', type=_float_list, default=list(PCK_THRESHOLDS),
                            help='Comma-separated PCK thresholds (ascending)')
        parser.add_argument('--plot', action='store_true', help='Also write pck.svg')

    def run(self, *args, **options):
        config = self.load_config(options)
        manifest_path = options['manifest']
        out_dir = self.output_dir(options, config, default=options['predictions'])
        manifest = load_manifest(manifest_path, require_gt=True)

        self.stdout.write(f'Evaluating {len(manifest)} pair(s) from {manifest_path}')
        reports = evaluate_manifest(manifest, options['predictions'], options['thresholds'])
        for report in reports:
            pck = ', '.join(f'{t:g}: {f:.3f}' for t, f in report.pck)
            self.stdout.write(f'  {report.pair}: {report.mean_error:.4f} (PCK {pck})')

        path = write_report(reports, out_dir / 'report.csv', options['thresholds'])
        self.stdout.write(f'  wrote {path}')
        if options['plot']:
            self.stdout.write(f'  wrote {write_pck_plot(reports, out_dir / "pck.svg")}')
        resolved = config.resolved()
        resolved['eval'] = {'manifest': str(manifest_path), 'predictions': str(options['predictions']),
                            'thresholds': options['thresholds']}
        write_run_json(out_dir, 'eval', resolved)

        mean_error, _ = aggregate(reports)
        self.stdout.write(self.style.SUCCESS(f'\nDone. Pairs: {len(reports)}, mean geodesic error x100: {mean_error:.4f}'))
