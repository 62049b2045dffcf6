"""
Management command to train the feature network on the pairs of a manifest.
"""
from pathlib import Path

from django.conf import settings

from evaluation.manifest import load_manifest
from specmatch.commands import SpecmatchCommand
from specmatch.exceptions import ConfigError
from specmatch.storage import write_run_json
from training.trainer import load_training_pairs, train, train_sweep


class Command(SpecmatchCommand):
    help = 'Train the feature network with the contrastive and alignment losses'

    def add_command_arguments(self, parser):
        parser.add_argument('--manifest', help='Training pair manifest (overrides paths.manifest)')
        parser.add_argument('--cache-dir', help='Spectra cache directory (overrides paths.cache_dir)')
        parser.add_argument('--sweep', action='store_true',
                            help='Train once per sweep.p_values entry with p_c = p_s = p')

    def run(self, *args, **options):
        config = self.load_config(options)
        paths = config.get('paths')
        manifest_path = options['manifest'] or paths['manifest']
        if not manifest_path:
            raise ConfigError('a training manifest is required (--manifest or paths.manifest)')
        out_dir = self.output_dir(options, config)
        cache_dir = Path(options['cache_dir'] or paths['cache_dir'] or settings.SPECMATCH_CACHE_DIR)

        spectral = config.get('spectral')
        net = config.get('net')
        loss = config.get('loss')
        baseline = config.get('baseline')
        train_config = config.get('train')

        manifest = load_manifest(manifest_path)
        pairs = load_training_pairs(manifest, spectral, cache_dir)

        self.stdout.write(f'Training on {len(pairs)} pair(s) from {manifest_path}')
        self.stdout.write(
            f'  theta=({loss.theta_cross:g}, {loss.theta_self:g}, {loss.theta_align:g}) '
            f'tau=({loss.tau_c:g}, {loss.tau_s:g}) alpha={loss.alpha:g} '
            f'p=({loss.p_c}, {loss.p_s}) lr={train_config.learning_rate:g}'
        )
        self.stdout.write(
            f'  k={spectral.k} n_hks={spectral.n_hks} width={net.width} blocks={net.n_blocks} '
            f'epochs={train_config.epochs} seed={train_config.seed}'
        )
        if train_config.disable_cross or train_config.disable_self or train_config.baseline_losses_mode:
            flags = [name for name in ('disable_cross', 'disable_self', 'baseline_losses_mode')
                     if getattr(train_config, name)]
            self.stdout.write(self.style.WARNING(f'  ablation: {", ".join(flags)}'))

        if options['sweep']:
            p_values = config.get('sweep')
            results = train_sweep(pairs, train_config, loss, net, spectral, out_dir, p_values, baseline)
            for p, result in results:
                self.stdout.write(f'  p={p}: final total {result.final_total:.6g} ({result.checkpoint})')
            write_run_json(out_dir, 'train', config.resolved(), seed=train_config.seed)
            self.stdout.write(self.style.SUCCESS(
                f'\nDone. {len(results)} runs; summary in {out_dir / "sweep.csv"}'
            ))
            return

        result = train(pairs, train_config, loss, net, spectral, out_dir, baseline)
        write_run_json(out_dir, 'train', config.resolved(), seed=train_config.seed)
        self.stdout.write(self.style.SUCCESS(
            f'\nDone. Iterations: {result.iterations}, final total: {result.final_total:.6g}, '
            f'checkpoint: {result.checkpoint}'
        ))
