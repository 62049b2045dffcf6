import csv
import json
import math
import tempfile
from collections import OrderedDict
from io import StringIO
from pathlib import Path
from types import SimpleNamespace
from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from contrastive.losses import LossConfig
from evaluation.manifest import load_manifest
from evaluation.report import AGGREGATE_LABEL
from evaluation.synthetic import write_synthetic_dataset
from features.checkpoint import load_checkpoint
from features.network import NetConfig, init_params
from meshes.mesh import Correspondence
from meshes.mesh_utils import load_correspondence, load_mesh
from specmatch.exceptions import ConfigError
from spectral.operators import SpectralConfig
from .diagnostics import PIPELINES, run_gradchecks, toy_pair
from .optim import NonFiniteGradientError, OptimizerState, adam_step, clip_by_global_norm
from .trainer import METRICS_HEADER, TrainConfig, TrainingError, train, train_sweep

SMALL = NetConfig(in_dim=4, width=8, n_blocks=2)
SPECTRAL = SpectralConfig(k=10, n_hks=4)
ADAM = SimpleNamespace(learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)


def read_metrics(path):
    with open(path, newline='') as fh:
        return list(csv.reader(fh))


class AdamTests(SimpleTestCase):
    def test_first_step_closed_form(self):
        params = OrderedDict(x=np.zeros((1, 1)))
        state = OptimizerState.zeros_like(params)
        adam_step(params, {'x': np.ones((1, 1))}, state, ADAM)
        self.assertAlmostEqual(params['x'][0, 0], -0.001 / (1.0 + 1e-8), delta=1e-15)
        self.assertEqual(state.step, 1)

    def test_zero_gradients_leave_params(self):
        params = OrderedDict(x=np.array([[1.5, -2.0]]))
        state = OptimizerState.zeros_like(params)
        for _ in range(5):
            adam_step(params, {'x': np.zeros((1, 2))}, state, ADAM)
        np.testing.assert_array_equal(params['x'], [[1.5, -2.0]])

    def test_trajectory_matches_scalar_reference(self):
        params = OrderedDict(x=np.array([[3.0]]))
        state = OptimizerState.zeros_like(params)
        x, m, v = 3.0, 0.0, 0.0
        for t in range(1, 11):
            adam_step(params, {'x': 2.0 * params['x']}, state, ADAM)
            g = 2.0 * x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1 - 0.9 ** t)
            v_hat = v / (1 - 0.999 ** t)
            x = x - 1e-3 * m_hat / (math.sqrt(v_hat) + 1e-8)
            self.assertAlmostEqual(params['x'][0, 0], x, delta=1e-12)

    def test_non_finite_gradient_names_parameter(self):
        params = OrderedDict(a=np.zeros((1, 1)), b=np.zeros((2, 2)))
        state = OptimizerState.zeros_like(params)
        grads = {'a': np.zeros((1, 1)), 'b': np.array([[0.0, np.nan], [0.0, 0.0]])}
        with self.assertRaises(NonFiniteGradientError) as ctx:
            adam_step(params, grads, state, ADAM)
        self.assertEqual(ctx.exception.parameter, 'b')
        self.assertIn('b', str(ctx.exception))
        self.assertEqual(state.step, 0)

    def test_clip_by_global_norm(self):
        grads = OrderedDict(a=np.array([[3.0]]), b=np.array([[4.0]]))
        clipped, norm = clip_by_global_norm(grads, 1.0)
        self.assertAlmostEqual(norm, 5.0)
        self.assertAlmostEqual(float(np.sqrt(clipped['a'] ** 2 + clipped['b'] ** 2)), 1.0)
        unclipped, _ = clip_by_global_norm(grads, 10.0)
        np.testing.assert_array_equal(unclipped['a'], grads['a'])
        same, _ = clip_by_global_norm(grads, None)
        np.testing.assert_array_equal(same['b'], grads['b'])


class TrainConfigTests(SimpleTestCase):
    def test_epochs_required(self):
        with self.assertRaisesRegex(ConfigError, 'epochs'):
            TrainConfig()

    def test_invalid_values(self):
        for kwargs in ({'epochs': 0}, {'epochs': 1, 'learning_rate': 0.0}, {'epochs': 1, 'pair_policy': 'any'},
                       {'epochs': 1, 'pair_policy': 'random'}, {'epochs': 1, 'parallel_pairs': 0}):
            with self.subTest(**kwargs), self.assertRaises(ConfigError):
                TrainConfig(**kwargs)

    def test_defaults(self):
        config = TrainConfig(epochs=3)
        self.assertEqual((config.learning_rate, config.beta1, config.beta2, config.eps), (1e-3, 0.9, 0.999, 1e-8))
        self.assertEqual(config.grad_clip, 10.0)


class TrainTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.shape_x, cls.shape_y = toy_pair(k=SPECTRAL.k, n_hks=SPECTRAL.n_hks)
        cls.pairs = [(cls.shape_x, cls.shape_y), (cls.shape_y, cls.shape_x)]
        cls.loss = LossConfig(p_c=3, p_s=3)

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def run_training(self, out, config=None, loss=None, pairs=None, **kwargs):
        config = config or TrainConfig(epochs=2, seed=4)
        return train(pairs or self.pairs, config, loss or self.loss, SMALL, SPECTRAL, self.tmp / out, **kwargs)

    def test_outputs_and_schema(self):
        result = self.run_training('run')
        rows = read_metrics(result.metrics)
        self.assertEqual(rows[0], METRICS_HEADER)
        self.assertEqual(len(rows), 1 + 4)
        self.assertEqual(result.iterations, 4)
        self.assertEqual({row[1] for row in rows[1:]}, {'toy_x|toy_y', 'toy_y|toy_x'})
        for name in ('epoch_0001.ckpt', 'epoch_0002.ckpt', 'final.ckpt'):
            self.assertTrue((self.tmp / 'run' / name).exists(), name)
        params, header = load_checkpoint(result.checkpoint, SMALL, SPECTRAL)
        self.assertEqual(header['epoch'], 2)
        self.assertTrue(params.all_finite())

    def test_same_seed_same_bytes(self):
        a = self.run_training('a')
        b = self.run_training('b')
        self.assertEqual(a.metrics.read_bytes(), b.metrics.read_bytes())
        self.assertEqual(a.checkpoint.read_bytes(), b.checkpoint.read_bytes())

    def test_total_is_weighted_sum_of_components(self):
        result = self.run_training('sum')
        for row in read_metrics(result.metrics)[1:]:
            cross, self_, align, total = map(float, row[2:6])
            expected = (1.0 * cross + 0.1 * self_) + 1.0 * align
            self.assertAlmostEqual(total, expected, delta=1e-12)

    def test_disable_cross_logs_exact_zero(self):
        config = TrainConfig(epochs=1, disable_cross=True)
        rows = read_metrics(self.run_training('no_cross', config).metrics)[1:]
        for row in rows:
            self.assertEqual(float(row[2]), 0.0)
            self.assertNotEqual(float(row[3]), 0.0)
            self.assertNotEqual(float(row[4]), 0.0)

    def test_disable_self_logs_exact_zero(self):
        config = TrainConfig(epochs=1, disable_self=True)
        rows = read_metrics(self.run_training('no_self', config).metrics)[1:]
        self.assertTrue(all(float(row[3]) == 0.0 for row in rows))
        self.assertTrue(all(float(row[2]) != 0.0 for row in rows))

    def test_alignment_only_training_decreases(self):
        config = TrainConfig(epochs=1, pair_policy='random', pairs_per_epoch=50, learning_rate=1e-2)
        loss = LossConfig(p_c=3, p_s=3, theta_cross=0.0, theta_self=0.0)
        pairs = [(self.shape_x, self.shape_x)]
        totals = [float(row[5]) for row in read_metrics(self.run_training('align', config, loss, pairs).metrics)[1:]]
        self.assertEqual(len(totals), 50)
        self.assertLess(totals[-1], totals[0])
        self.assertLess(np.mean(totals[-10:]), np.mean(totals[:10]))

    def test_max_iterations(self):
        config = TrainConfig(epochs=10, max_iterations=3)
        result = self.run_training('capped', config)
        self.assertEqual(result.iterations, 3)
        self.assertEqual(len(read_metrics(result.metrics)), 4)
        _, header = load_checkpoint(result.checkpoint)
        self.assertEqual(header['epoch'], 2)

    def test_baseline_mode(self):
        config = TrainConfig(epochs=1, baseline_losses_mode=True)
        rows = read_metrics(self.run_training('baseline', config).metrics)[1:]
        self.assertTrue(all(float(row[4]) >= 0.0 for row in rows))

    @override_settings(SPECMATCH_THREADS=2)
    def test_parallel_pairs(self):
        config = TrainConfig(epochs=2, parallel_pairs=2)
        result = self.run_training('parallel', config)
        rows = read_metrics(result.metrics)[1:]
        self.assertEqual(result.iterations, 2)
        self.assertEqual([row[0] for row in rows], ['1', '1', '2', '2'])

    def test_sweep(self):
        results = train_sweep(self.pairs, TrainConfig(epochs=1), self.loss, SMALL, SPECTRAL, self.tmp / 'sweep', [3, 5])
        self.assertEqual([p for p, _ in results], [3, 5])
        rows = read_metrics(self.tmp / 'sweep' / 'sweep.csv')
        self.assertEqual(rows[0], ['p', 'final_total', 'checkpoint'])
        self.assertEqual([row[2] for row in rows[1:]], ['p_3/final.ckpt', 'p_5/final.ckpt'])
        self.assertTrue((self.tmp / 'sweep' / 'p_5' / 'metrics.csv').exists())

    def test_hks_width_must_match_network(self):
        with self.assertRaises(ConfigError):
            train(self.pairs, TrainConfig(epochs=1), self.loss, NetConfig(in_dim=5, width=8, n_blocks=2),
                  SPECTRAL, self.tmp / 'bad')

    def test_non_finite_loss_aborts_without_metrics(self):
        params = init_params(SMALL, seed=0)
        params.tensors['blocks.1.linear1.bias'][:] = 1e308
        params.tensors['blocks.1.linear2.weight'][:] = 10.0
        with np.errstate(over='ignore', invalid='ignore'):
            with self.assertRaisesRegex(TrainingError, 'toy_'):
                self.run_training('broken', initial_params=params)
        self.assertFalse((self.tmp / 'broken' / 'metrics.csv').exists())
        self.assertFalse((self.tmp / 'broken' / 'final.ckpt').exists())


class GradCheckSuiteTests(SimpleTestCase):
    def test_registered_pipelines(self):
        self.assertEqual(list(PIPELINES), ['cross_loss', 'self_loss', 'align_loss', 'total_loss'])

    def test_every_pipeline_passes(self):
        for result in run_gradchecks(n_samples=5):
            with self.subTest(pipeline=result.name):
                self.assertTrue(result.passed, f'{result.name}: {result.max_error:.3e}')
                self.assertGreaterEqual(result.n_samples, 5)


COMMAND_CONFIG = {
    'spectral': {'k': 10, 'n_hks': 4},
    'net': {'in_dim': 4, 'width': 8, 'n_blocks': 2},
    'loss': {'p_c': 5, 'p_s': 5},
    'train': {'epochs': 1, 'seed': 2},
}


class TrainCommandTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.tmp = Path(cls._tmp.name)
        cls.cache = cls.tmp / 'cache'
        write_synthetic_dataset(cls.tmp / 'data', ['bumpy_sphere'], 100, n_train=2, n_test=0, seed=0)
        cls.manifest = cls.tmp / 'data' / 'train.json'
        call_command('precompute', manifest=str(cls.manifest), k=10, cache_dir=str(cls.cache), stdout=StringIO())

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()
        super().tearDownClass()

    def write_config(self, name, **sections):
        document = {key: dict(value) for key, value in COMMAND_CONFIG.items()}
        document['paths'] = {'manifest': str(self.manifest), 'cache_dir': str(self.cache)}
        for key, value in sections.items():
            document.setdefault(key, {}).update(value)
        path = self.tmp / f'{name}.json'
        path.write_text(json.dumps(document))
        return str(path)

    def train(self, config, out, *args):
        stdout = StringIO()
        call_command('train', *args, config=config, out=str(self.tmp / out), stdout=stdout)
        return stdout.getvalue()

    def assert_exit_code(self, code, config, out):
        with self.assertRaises(CommandError) as caught:
            self.train(config, out)
        self.assertEqual(caught.exception.returncode, code)
        self.assertFalse((self.tmp / out).exists())
        return str(caught.exception)

    def test_outputs_and_config_echo(self):
        output = self.train(self.write_config('ok'), 'ok')
        self.assertIn('theta=(1, 0.1, 1)', output)
        self.assertIn('tau=(1, 1)', output)
        self.assertIn('alpha=0.07', output)
        self.assertIn('lr=0.001', output)
        for name in ('metrics.csv', 'final.ckpt', 'run.json'):
            self.assertTrue((self.tmp / 'ok' / name).exists(), name)
        run = json.loads((self.tmp / 'ok' / 'run.json').read_text())
        self.assertEqual(run['command'], 'train')
        self.assertEqual(run['seed'], 2)
        self.assertEqual(run['config']['spectral']['k'], 10)
        self.assertEqual(run['config']['loss']['theta_self'], 0.1)

    def test_identical_runs_identical_bytes(self):
        config = self.write_config('repeat')
        self.train(config, 'a')
        self.train(config, 'b')
        for name in ('metrics.csv', 'final.ckpt'):
            self.assertEqual((self.tmp / 'a' / name).read_bytes(), (self.tmp / 'b' / name).read_bytes())

    def test_seed_flag_overrides_config(self):
        self.train(self.write_config('seeded'), 'seeded', '--seed', '7')
        _, header = load_checkpoint(self.tmp / 'seeded' / 'final.ckpt')
        self.assertEqual(header['seed'], 7)

    def test_missing_manifest(self):
        config = self.write_config('nomanifest', paths={'manifest': str(self.tmp / 'absent.json')})
        self.assert_exit_code(2, config, 'nomanifest')

    def test_unknown_key(self):
        message = self.assert_exit_code(2, self.write_config('unknown', train={'bogus': 1}), 'unknown')
        self.assertIn('bogus', message)

    def test_epochs_required(self):
        document = {key: dict(value) for key, value in COMMAND_CONFIG.items()}
        del document['train']['epochs']
        document['paths'] = {'manifest': str(self.manifest), 'cache_dir': str(self.cache)}
        path = self.tmp / 'noepochs.json'
        path.write_text(json.dumps(document))
        message = self.assert_exit_code(2, str(path), 'noepochs')
        self.assertIn('train.epochs is required', message)

    def test_missing_cache_is_data_error(self):
        config = self.write_config('nocache', paths={'cache_dir': str(self.tmp / 'empty')})
        self.assert_exit_code(3, config, 'nocache')

    def test_sweep(self):
        output = self.train(self.write_config('sweep', sweep={'p_values': [3, 5]}), 'sweep', '--sweep')
        self.assertIn('p=3', output)
        rows = read_metrics(self.tmp / 'sweep' / 'sweep.csv')
        self.assertEqual([row[0] for row in rows[1:]], ['3', '5'])
        self.assertTrue((self.tmp / 'sweep' / 'p_5' / 'final.ckpt').exists())


class GradCheckCommandTests(SimpleTestCase):
    def test_reports_pass(self):
        out = StringIO()
        call_command('gradcheck', 'cross_loss', 'self_loss', stdout=out)
        lines = [line for line in out.getvalue().splitlines() if line.startswith(('PASS', 'FAIL'))]
        self.assertEqual(len(lines), 2)
        self.assertTrue(all(line.startswith('PASS') for line in lines))

    def test_failure_exit_code(self):
        with self.assertRaises(CommandError) as caught:
            call_command('gradcheck', 'align_loss', tolerance=-1.0, stdout=StringIO())
        self.assertEqual(caught.exception.returncode, 4)

    def test_unknown_pipeline(self):
        with self.assertRaises(CommandError) as caught:
            call_command('gradcheck', 'nope', stdout=StringIO())
        self.assertEqual(caught.exception.returncode, 2)


DESK_CONFIG = {
    'spectral': {'k': 60},
    'loss': {'p_c': 10, 'p_s': 10},
    'train': {'epochs': 38, 'max_iterations': 300, 'seed': 0, 'checkpoint_every': 0},
}


@skipUnless(settings.SPECMATCH_SLOW_TESTS, 'set SPECMATCH_SLOW_TESTS=1 for the desk-scale runs')
class DeskScaleTests(SimpleTestCase):
    """
    synth -> precompute -> train -> match -> eval at desk scale: 8 training
    and 4 held-out pairs of about 500 vertices, k=60, 300 iterations.
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.tmp = Path(cls._tmp.name)
        cls.data = cls.tmp / 'data'
        cls.cache = cls.tmp / 'cache'
        call_command('synth', out=str(cls.data), resolution=500, train=8, test=4, seed=0, stdout=StringIO())
        for role in ('train', 'test'):
            call_command('precompute', manifest=str(cls.data / f'{role}.json'), k=60,
                         cache_dir=str(cls.cache), stdout=StringIO())
        cls.errors = {}

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()
        super().tearDownClass()

    def run_pipeline(self, name, **train):
        """Train, match the held-out pairs and return the mean geodesic error x100."""
        if name in self.errors:
            return self.errors[name]
        document = {key: dict(value) for key, value in DESK_CONFIG.items()}
        document['train'].update(train)
        document['paths'] = {'manifest': str(self.data / 'train.json'), 'cache_dir': str(self.cache)}
        config = self.tmp / f'{name}.json'
        config.write_text(json.dumps(document))

        run_dir = self.tmp / name
        call_command('train', config=str(config), out=str(run_dir), stdout=StringIO())
        call_command('match', str(run_dir / 'final.ckpt'), manifest=str(self.data / 'test.json'),
                     cache_dir=str(self.cache), out=str(run_dir / 'pred'), stdout=StringIO())
        call_command('eval', str(self.data / 'test.json'), str(run_dir / 'pred'),
                     out=str(run_dir / 'eval'), stdout=StringIO())

        rows = read_metrics(run_dir / 'eval' / 'report.csv')
        self.assertEqual(rows[-1][0], AGGREGATE_LABEL)
        self.errors[name] = float(rows[-1][1])
        return self.errors[name]

    def test_training_halves_the_untrained_error(self):
        trained = self.run_pipeline('full')
        untrained = self.run_pipeline('init', max_iterations=1, learning_rate=1e-12)
        self.assertLessEqual(trained, 0.5 * untrained, f'trained {trained:.3f}, untrained {untrained:.3f}')

    def test_held_out_shape_matches_itself(self):
        self.run_pipeline('full')
        checkpoint = self.tmp / 'full' / 'final.ckpt'
        out = self.tmp / 'self'
        for entry in load_manifest(self.data / 'test.json').pairs:
            source = entry.source
            call_command('match', str(checkpoint), str(source), str(source),
                         cache_dir=str(self.cache), out=str(out), stdout=StringIO())
            n = load_mesh(source).n_vertices
            predicted = load_correspondence(out / f'{source.stem}__{source.stem}.corr', n, n)
            accuracy = predicted.accuracy_against(Correspondence.identity(n))
            self.assertGreaterEqual(accuracy, 0.99, f'{source.name}: {accuracy:.3f}')

    def test_ablation_ordering_over_seeds(self):
        medians = {}
        for variant, flags in (('full', {}), ('noself', {'disable_self': True}), ('nocross', {'disable_cross': True})):
            errors = []
            for seed in (0, 1, 2):
                name = variant if (variant == 'full' and seed == 0) else f'{variant}_{seed}'
                errors.append(self.run_pipeline(name, seed=seed, **flags))
            medians[variant] = float(np.median(errors))
        self.assertLessEqual(medians['full'], medians['noself'], medians)
        self.assertLessEqual(medians['noself'], medians['nocross'], medians)
