"""
Management command to compute vertex correspondences with a trained checkpoint.
"""
from pathlib import Path

from django.conf import settings

from evaluation.manifest import PairEntry, load_manifest, prediction_filename
from features.checkpoint import load_checkpoint
from fmaps.inference import load_shape_for_checkpoint, match_shapes
from fmaps.maps import save_fmap
from meshes.mesh_utils import write_correspondence
from spectral.operators import SpectralConfig
from specmatch.commands import SpecmatchCommand
from specmatch.exceptions import ConfigError
from specmatch.storage import write_run_json


class Command(SpecmatchCommand):
    help = 'Match source to target meshes with a trained checkpoint and write .corr files'
    config_sections = ('spectral', 'net', 'loss', 'paths')

    def add_command_arguments(self, parser):
        parser.add_argument('checkpoint', help='Checkpoint written by train')
        parser.add_argument('source', nargs='?', help='Source mesh')
        parser.add_argument('target', nargs='?', help='Target mesh')
        parser.add_argument('--manifest', help='Match every pair of this manifest instead')
        parser.add_argument('--cache-dir', help='Spectra cache directory')
        parser.add_argument('--dump-fmap', action='store_true', help='Also write the k x k map C_YX per pair')

    def _entries(self, options, paths):
        if options['source'] or options['target']:
            if not (options['source'] and options['target']):
                raise ConfigError('give both a source and a target mesh')
            if options['manifest']:
                raise ConfigError('give either a source/target pair or --manifest, not both')
            return [PairEntry(Path(options['source']), Path(options['target']))]
        manifest_path = options['manifest'] or paths['manifest']
        if not manifest_path:
            raise ConfigError('nothing to match (give source and target meshes or --manifest)')
        return list(load_manifest(manifest_path).pairs)

    def run(self, *args, **options):
        config = self.load_config(options)
        paths = config.get('paths')
        entries = self._entries(options, paths)
        out_dir = self.output_dir(options, config)
        cache_dir = Path(options['cache_dir'] or paths['cache_dir'] or settings.SPECMATCH_CACHE_DIR)
        alpha = config.get('loss').alpha

        if options['config']:
            params, header = load_checkpoint(options['checkpoint'], config.get('net'), config.get('spectral'))
        else:
            params, header = load_checkpoint(options['checkpoint'])
        spectral = SpectralConfig(**header['config']['spectral'])

        shapes = {}
        for entry in entries:
            for path in (entry.source, entry.target):
                if path not in shapes:
                    shapes[path] = load_shape_for_checkpoint(path, spectral, cache_dir)

        self.stdout.write(
            f'Matching {len(entries)} pair(s) with {options["checkpoint"]} '
            f'(epoch {header.get("epoch")}, k={spectral.k}, alpha={alpha:g})'
        )
        for entry in entries:
            shape_x, shape_y = shapes[entry.source], shapes[entry.target]
            result = match_shapes(params, shape_x, shape_y, alpha)
            written = write_correspondence(result.correspondence, out_dir / prediction_filename(entry))
            timings = result.timings
            self.stdout.write(
                f'  {shape_x.name} ({shape_x.n_vertices} vertices) -> {shape_y.name} ({shape_y.n_vertices} vertices): '
                f'features {timings["features"] * 1e3:.1f} ms, Cmap {timings["fmap"] * 1e3:.1f} ms, '
                f'NN {timings["nn"] * 1e3:.1f} ms'
            )
            self.stdout.write(f'    wrote {written}')
            if options['dump_fmap']:
                fmap_path = out_dir / f'{entry.source.stem}__{entry.target.stem}.fmap'
                save_fmap(fmap_path, result.fmap, shape_x.name, shape_y.name)
                self.stdout.write(f'    wrote {fmap_path}')

        resolved = config.resolved()
        resolved['spectral'] = dict(header['config']['spectral'])
        resolved['net'] = dict(header['config']['net'])
        resolved['checkpoint'] = str(options['checkpoint'])
        write_run_json(out_dir, 'match', resolved, seed=header.get('seed'))
        self.stdout.write(self.style.SUCCESS(f'\nDone. Matched: {len(entries)}'))
