"""
Management command to time map estimation, training and inference at several mesh sizes.
"""
from fmaps.bench import MIN_REPS, RATIO_OP, run_bench, write_bench_csv
from specmatch.commands import SpecmatchCommand
from specmatch.storage import write_run_json


def _int_list(value):
    return [int(part) for part in value.split(',') if part.strip()]


class Command(SpecmatchCommand):
    help = 'Benchmark projected functional maps against the regularized solver (CSV: size,k,op,median_ms)'
    config_sections = ('net', 'loss', 'baseline', 'train')

    def add_command_arguments(self, parser):
        parser.add_argument('--sizes', type=_int_list, default=[500, 1000, 2000, 5000],
                            help='Comma-separated approximate vertex counts')
        parser.add_argument('--k', type=_int_list, default=[100, 200], help='Comma-separated basis sizes')
        parser.add_argument('--reps', type=int, default=MIN_REPS, help=f'Repetitions per op (>= {MIN_REPS})')
        parser.add_argument('--skip-train', action='store_true', help='Skip the training-step timing')

    def run(self, *args, **options):
        config = self.load_config(options, overrides={'train': {'epochs': 1}})
        out_dir = self.output_dir(options)
        seed = config.get('train').seed

        self.stdout.write(
            f'Benchmarking sizes {options["sizes"]} x k {options["k"]}, {options["reps"]} reps each'
        )
        rows = run_bench(
            options['sizes'], options['k'], options['reps'], options['skip_train'], seed,
            net_config=config.get('net'), loss_config=config.get('loss'),
            baseline_config=config.get('baseline'), train_config=config.get('train'),
        )
        for row in rows:
            unit = '' if row.op == RATIO_OP else ' ms'
            self.stdout.write(f'  |V|={row.size:<6} k={row.k:<4} {row.op:<24} {row.median_ms:.4g}{unit}')

        path = write_bench_csv(rows, out_dir / 'bench.csv')
        write_run_json(out_dir, 'bench', config.resolved(), seed=seed)
        slower = [row for row in rows if row.op == RATIO_OP and row.median_ms >= 1.0]
        summary = f'\nDone. Rows: {len(rows)}, written to {path}'
        if slower:
            self.stdout.write(self.style.WARNING(
                f'{summary}\nProjection was not faster than the solver at: '
                + ', '.join(f'|V|={row.size} k={row.k}' for row in slower)
            ))
        else:
            self.stdout.write(self.style.SUCCESS(summary))
