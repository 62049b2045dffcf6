import json
import struct
import tempfile
from pathlib import Path

import numpy as np
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from contrastive.losses import LossConfig
from features.network import NetConfig
from spectral.operators import SpectralConfig
from training.trainer import TrainConfig
from .commands import SpecmatchCommand
from .containers import MAGIC, ContainerError, read_container, write_container
from .exceptions import ConfigError, DataError, NumericalError
from .forms import load_run_config
from .storage import atomic_write, write_run_json


class TempDirMixin:
    def setUp(self):
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()
        super().tearDown()


class RunConfigTests(TempDirMixin, SimpleTestCase):
    def write(self, document):
        path = self.tmp / 'run.json'
        path.write_text(json.dumps(document) if not isinstance(document, str) else document)
        return path

    def test_defaults(self):
        config = load_run_config(document={'train': {'epochs': 3}})
        self.assertEqual(config.get('spectral'), SpectralConfig(k=200, n_hks=16, hks_scaling='standardize', eig_seed=0))
        self.assertEqual(config.get('net'), NetConfig())
        loss = config.get('loss')
        self.assertIsInstance(loss, LossConfig)
        self.assertEqual((loss.theta_cross, loss.theta_self, loss.theta_align), (1.0, 0.1, 1.0))
        self.assertEqual((loss.tau_c, loss.tau_s, loss.alpha, loss.p_c, loss.p_s), (1.0, 1.0, 0.07, 30, 30))
        train = config.get('train')
        self.assertIsInstance(train, TrainConfig)
        self.assertEqual((train.epochs, train.learning_rate, train.grad_clip), (3, 1e-3, 10.0))
        self.assertEqual(config.get('sweep'), [10, 20, 30, 40, 50])
        self.assertEqual(config.get('paths'), {'manifest': None, 'cache_dir': None, 'out_dir': None})

    def test_file_values_win(self):
        path = self.write({
            'spectral': {'k': 60, 'hks_scaling': 'none'},
            'loss': {'p_c': 10, 'p_s': 10, 'negative_sampling': 'uniform', 'n_negatives': 5},
            'train': {'epochs': 2, 'pair_policy': 'random', 'pairs_per_epoch': 4},
            'paths': {'manifest': 'data/train.json'},
        })
        config = load_run_config(path)
        self.assertEqual(config.get('spectral').k, 60)
        self.assertEqual(config.get('spectral').hks_scaling, 'none')
        self.assertEqual(config.get('loss').n_negatives, 5)
        self.assertEqual(config.get('train').pairs_per_epoch, 4)
        self.assertEqual(config.get('paths')['manifest'], Path('data/train.json'))
        self.assertEqual(config.resolved()['spectral']['k'], 60)

    def test_overrides_win_over_file(self):
        path = self.write({'train': {'epochs': 2, 'seed': 3}})
        config = load_run_config(path, overrides={'train': {'seed': 9}})
        self.assertEqual(config.get('train').seed, 9)

    def test_epochs_required(self):
        with self.assertRaisesMessage(ConfigError, 'train.epochs is required'):
            load_run_config(document={})

    def test_sections_subset_skips_train(self):
        config = load_run_config(document={}, sections=['spectral'])
        self.assertTrue(config.has('spectral'))
        self.assertFalse(config.has('train'))
        with self.assertRaises(ConfigError):
            config.get('train')

    def test_unknown_section_and_key(self):
        with self.assertRaisesMessage(ConfigError, 'optimizer'):
            load_run_config(document={'optimizer': {}})
        with self.assertRaisesMessage(ConfigError, 'lr'):
            load_run_config(document={'train': {'epochs': 1, 'lr': 0.1}})

    def test_invalid_values(self):
        cases = [
            {'spectral': {'k': 1}},
            {'spectral': {'k': 2.5}},
            {'loss': {'alpha': 0.0}},
            {'loss': {'tau_c': -1.0}},
            {'loss': {'negative_sampling': 'hard'}},
            {'train': {'epochs': 0}},
            {'train': {'pair_policy': 'sometimes'}},
            {'sweep': {'p_values': []}},
            {'sweep': {'p_values': [10, 'twenty']}},
            {'sweep': {'p_values': [True]}},
        ]
        for document in cases:
            document.setdefault('train', {}).setdefault('epochs', 1)
            with self.subTest(document=document), self.assertRaises(ConfigError):
                load_run_config(document=document)

    def test_dataclass_validation_surfaces_as_config_error(self):
        with self.assertRaises(ConfigError):
            load_run_config(document={'train': {'epochs': 1, 'pair_policy': 'random'}})

    def test_missing_and_malformed_files(self):
        with self.assertRaises(ConfigError):
            load_run_config(self.tmp / 'absent.json')
        with self.assertRaises(ConfigError):
            load_run_config(self.write('{"train": '))
        with self.assertRaises(ConfigError):
            load_run_config(self.write('[1, 2]'))


class ContainerTests(TempDirMixin, SimpleTestCase):
    def test_layout_and_round_trip(self):
        path = self.tmp / 'a.bin'
        arrays = {'phi': np.arange(6.0).reshape(2, 3), 'evals': np.array([0.0, 1.5])}
        write_container(path, {'kind': 'test'}, arrays)
        blob = path.read_bytes()
        self.assertEqual(blob[:4], MAGIC)
        (header_len,) = struct.unpack('<I', blob[4:8])
        self.assertEqual(len(blob), 8 + header_len + 8 * 8)

        header, tensors = read_container(path)
        self.assertEqual(header['kind'], 'test')
        self.assertEqual(header['tensors']['evals'], {'offset': 48, 'shape': [2]})
        for name, array in arrays.items():
            np.testing.assert_array_equal(tensors[name], array)

    def test_identical_inputs_identical_bytes(self):
        for name in ('a.bin', 'b.bin'):
            write_container(self.tmp / name, {'z': 1, 'a': 2}, {'x': np.eye(3)})
        self.assertEqual((self.tmp / 'a.bin').read_bytes(), (self.tmp / 'b.bin').read_bytes())

    def test_corrupt_files(self):
        path = self.tmp / 'bad.bin'
        path.write_bytes(b'NOPE')
        with self.assertRaisesMessage(ContainerError, 'bad magic'):
            read_container(path)

        write_container(path, {}, {'x': np.ones(10)})
        path.write_bytes(path.read_bytes()[:-8])
        with self.assertRaisesMessage(ContainerError, 'past the end'):
            read_container(path)

        with self.assertRaises(ContainerError):
            read_container(self.tmp / 'absent.bin')


class StorageTests(TempDirMixin, SimpleTestCase):
    def test_failed_write_leaves_nothing(self):
        path = self.tmp / 'out' / 'result.csv'
        with self.assertRaises(RuntimeError):
            with atomic_write(path) as fh:
                fh.write('partial')
                raise RuntimeError('boom')
        self.assertFalse(path.exists())
        self.assertEqual(list(path.parent.iterdir()), [])

    def test_existing_file_kept_on_failure(self):
        path = self.tmp / 'result.csv'
        path.write_text('old\n')
        with self.assertRaises(RuntimeError):
            with atomic_write(path) as fh:
                fh.write('new\n')
                raise RuntimeError('boom')
        self.assertEqual(path.read_text(), 'old\n')

    def test_lf_line_endings(self):
        path = self.tmp / 'lines.txt'
        with atomic_write(path) as fh:
            fh.write('a\nb\n')
        self.assertEqual(path.read_bytes(), b'a\nb\n')

    def test_run_json(self):
        path = write_run_json(self.tmp, 'train', {'train': {'epochs': 1}, 'paths': {'out_dir': Path('x')}}, seed=5)
        payload = json.loads(path.read_text())
        self.assertEqual(payload['command'], 'train')
        self.assertEqual(payload['seed'], 5)
        self.assertEqual(payload['config']['paths']['out_dir'], 'x')
        self.assertIn('numpy', payload['versions'])
        self.assertIn('python', payload['versions'])


class FailingCommand(SpecmatchCommand):
    error = None

    def run(self, *args, **options):
        raise self.error


class CommandBaseTests(SimpleTestCase):
    def test_exit_codes(self):
        for error, code in ((ConfigError('c'), 2), (DataError('d'), 3), (NumericalError('n'), 4)):
            command = FailingCommand()
            command.error = error
            with self.subTest(code=code), self.assertRaises(CommandError) as caught:
                command.handle()
            self.assertEqual(caught.exception.returncode, code)
            self.assertEqual(str(caught.exception), str(error))

    @override_settings(SPECMATCH_DEFAULTS={
        'train': {'epochs': 4, 'seed': 0, 'learning_rate': 1e-3, 'beta1': 0.9, 'beta2': 0.999, 'eps': 1e-8,
                  'pair_policy': 'all', 'pairs_per_epoch': None, 'max_iterations': None,
                  'disable_cross': False, 'disable_self': False, 'baseline_losses_mode': False,
                  'checkpoint_every': 1, 'grad_clip': 10.0, 'parallel_pairs': 1},
    })
    def test_seed_flag(self):
        command = SpecmatchCommand()
        config = command.load_config({'config': None, 'seed': 11}, sections=['train'])
        self.assertEqual(config.get('train').seed, 11)
        self.assertEqual(config.get('train').epochs, 4)

    def test_output_dir_required(self):
        with self.assertRaises(CommandError) as caught:
            SpecmatchCommand().output_dir({'out': None})
        self.assertEqual(caught.exception.returncode, 2)
