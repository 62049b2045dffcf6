"""
Management command to compute and cache Laplacian spectra for a set of meshes.
"""
from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandError

from evaluation.manifest import load_manifest
from meshes.mesh_utils import load_mesh
from spectral.shapes import ensure_spectra
from specmatch.commands import SpecmatchCommand
from specmatch.exceptions import ConfigError, SpecmatchError
from specmatch.storage import write_run_json


class Command(SpecmatchCommand):
    help = 'Compute the truncated Laplace-Beltrami eigenbasis of each mesh and cache it (skips up-to-date caches)'
    config_sections = ('spectral', 'paths')

    def add_command_arguments(self, parser):
        parser.add_argument('meshes', nargs='*', help='Mesh files (OFF/OBJ/PLY)')
        parser.add_argument('--manifest', help='Pair manifest; every mesh it lists is precomputed')
        parser.add_argument('--k', type=int, help='Number of eigenpairs (overrides spectral.k)')
        parser.add_argument('--force', action='store_true', help='Recompute even when the cache is fresh')
        parser.add_argument('--cache-dir', help='Spectra cache directory')

    def run(self, *args, **options):
        overrides = {'spectral': {}}
        if options['k'] is not None:
            overrides['spectral']['k'] = options['k']
        if options['seed'] is not None:
            overrides['spectral']['eig_seed'] = options['seed']
        config = self.load_config(options, overrides=overrides)
        spectral = config.get('spectral')
        paths = config.get('paths')

        mesh_paths = [Path(p) for p in options['meshes']]
        manifest_path = options['manifest'] or (paths['manifest'] if not mesh_paths else None)
        if manifest_path:
            mesh_paths += [p for p in load_manifest(manifest_path).mesh_paths() if p not in mesh_paths]
        if not mesh_paths:
            raise ConfigError('no meshes given (pass mesh files or --manifest)')
        cache_dir = Path(options['cache_dir'] or paths['cache_dir'] or settings.SPECMATCH_CACHE_DIR)

        self.stdout.write(f'Precomputing k={spectral.k} spectra for {len(mesh_paths)} mesh(es) into {cache_dir}')

        recomputed = 0
        fresh = 0
        failures = []
        for path in mesh_paths:
            try:
                mesh = load_mesh(path)
                ops, changed = ensure_spectra(mesh, spectral, cache_dir, force=options['force'])
            except SpecmatchError as e:
                self.stdout.write(self.style.WARNING(f'  {path}: {e}'))
                failures.append(e)
                continue
            if changed:
                recomputed += 1
                self.stdout.write(f'  {mesh.name}: computed {ops.k} eigenpairs, lambda_max={ops.evals[-1]:.6g}')
            else:
                fresh += 1
                self.stdout.write(f'  {mesh.name}: up to date')

        write_run_json(cache_dir, 'precompute', config.resolved(), seed=spectral.eig_seed)
        summary = f'\nDone. {recomputed} recomputed, {fresh} up to date, {len(failures)} failed'
        if failures:
            self.stdout.write(self.style.WARNING(summary))
            raise CommandError(f'{len(failures)} mesh(es) failed; first: {failures[0]}',
                               returncode=failures[0].exit_code)
        self.stdout.write(self.style.SUCCESS(summary))
