"""
Management command to generate synthetic near-isometric pairs and their manifests.
"""
import json

from evaluation.synthetic import FAMILIES, write_synthetic_dataset
from meshes.mesh_utils import SUPPORTED_EXTENSIONS
from specmatch.commands import SpecmatchCommand
from specmatch.exceptions import ConfigError
from specmatch.storage import write_run_json


class Command(SpecmatchCommand):
    help = 'Write synthetic shape pairs with identity ground truth, plus train.json and test.json manifests'

    def add_command_arguments(self, parser):
        parser.add_argument('--families', default=','.join(FAMILIES),
                            help=f'Comma-separated families, used round-robin ({", ".join(FAMILIES)})')
        parser.add_argument('--resolution', type=int, default=500, help='Approximate vertices per mesh')
        parser.add_argument('--train', type=int, default=8, help='Number of training pairs')
        parser.add_argument('--test', type=int, default=4, help='Number of held-out pairs')
        parser.add_argument('--deform', help='JSON object of deformation parameters, e.g. {"bend": 0.3}')
        parser.add_argument('--format', default='off', choices=[ext.lstrip('.') for ext in SUPPORTED_EXTENSIONS])

    def run(self, *args, **options):
        out_dir = self.output_dir(options)
        families = [name.strip() for name in options['families'].split(',') if name.strip()]
        deform = None
        if options['deform']:
            try:
                deform = json.loads(options['deform'])
            except ValueError as e:
                raise ConfigError(f'--deform is not valid JSON: {e}') from e
            if not isinstance(deform, dict):
                raise ConfigError('--deform must be a JSON object')
        seed = options['seed'] if options['seed'] is not None else 0

        train, test = write_synthetic_dataset(
            out_dir, families, options['resolution'], options['train'], options['test'],
            deform_params=deform, seed=seed, extension=f'.{options["format"]}',
        )
        for manifest in (train, test):
            for entry in manifest.pairs:
                self.stdout.write(f'  {manifest.role}: {entry.source.name} -> {entry.target.name}')

        write_run_json(out_dir, 'synth', {
            'families': families, 'resolution': options['resolution'], 'train': options['train'],
            'test': options['test'], 'deform': deform, 'format': options['format'],
        }, seed=seed)
        self.stdout.write(self.style.SUCCESS(
            f'\nDone. Train pairs: {len(train)}, Test pairs: {len(test)}, written to {out_dir}'
        ))
