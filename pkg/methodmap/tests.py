import re
import shutil
import tempfile
from collections import OrderedDict
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from .registry import (
    IN_SCOPE, STATUSES, DuplicateStepError, UnregisteredStepError, generate_method_map, implements,
    load_implementations,
)


def table_rows(document):
    """step -> implementation for every table row; escaped pipes stay inside their cell."""
    rows = {}
    for line in document.splitlines():
        if line.startswith('| `'):
            cells = [cell.strip() for cell in re.split(r'(?<!\\)\|', line.strip().strip('|'))]
            rows[cells[0].strip('`')] = cells[4].strip('`')
    return rows


def table_cells(document, step):
    for line in document.splitlines():
        if line.startswith(f'| `{step}` |'):
            return [cell.strip() for cell in re.split(r'(?<!\\)\|', line.strip().strip('|'))]
    return None


class RegistryTests(SimpleTestCase):

    def setUp(self):
        self.registry = OrderedDict(load_implementations())

    def test_soft_map_step(self):
        rows = table_rows(generate_method_map())
        self.assertEqual(rows['soft_map'], 'fmaps.maps.soft_map')

    def test_solver_step(self):
        rows = table_rows(generate_method_map())
        self.assertEqual(rows['solver_fmap'], 'fmaps.baseline.baseline_solve_fmap')

    def test_formula_and_status_columns(self):
        document = generate_method_map()
        self.assertIn('| step | description | formula | status | implementation | notes |', document)
        alignment = table_cells(document, 'alignment')
        self.assertEqual(len(alignment), 6)
        self.assertIn('Pi_XY Phi_Y C_YX^T', alignment[2])
        self.assertEqual(alignment[3], 'method')
        self.assertTrue(all(step.status in STATUSES for step in IN_SCOPE.values()))

    def test_fmap_penalty_is_ablation_only(self):
        cells = table_cells(generate_method_map(), 'structural_penalty')
        self.assertIn('L_fmap = theta_bi L_bi + theta_or L_or', cells[2])
        self.assertEqual(cells[3], 'ablation')
        self.assertEqual(cells[4], '`training.trainer.structural_penalty`')
        self.assertEqual(table_cells(generate_method_map(), 'solver_fmap')[3], 'baseline')

    def test_every_step_once(self):
        document = generate_method_map()
        rows = [line for line in document.splitlines() if line.startswith('| `')]
        self.assertEqual(len(rows), len(IN_SCOPE))
        self.assertEqual(list(table_rows(document)), list(IN_SCOPE))

    def test_missing_registration_fails(self):
        partial = OrderedDict(self.registry)
        del partial['alignment']
        with self.assertRaisesMessage(UnregisteredStepError, 'alignment'):
            generate_method_map(partial)

    def test_unknown_step(self):
        with self.assertRaises(UnregisteredStepError):
            implements('not_a_step')

    def test_second_implementation_rejected(self):
        def other_soft_map(features_x, features_y, alpha):
            return None

        with self.assertRaises(DuplicateStepError):
            implements('soft_map')(other_soft_map)
        self.assertEqual(self.registry['soft_map'].__name__, 'soft_map')

    def test_reregistering_same_function(self):
        func = self.registry['hks']
        self.assertIs(implements('hks')(func), func)

    def test_pipe_in_docstring_escaped(self):
        def documented():
            """a | b"""

        registry = OrderedDict(self.registry)
        registry['hks'] = documented
        self.assertIn('a \\| b', generate_method_map(registry))


class MethodMapCommandTests(SimpleTestCase):

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.tmp, ignore_errors=True)

    def test_writes_document(self):
        call_command('methodmap', out=str(self.tmp), stdout=StringIO())
        text = (self.tmp / 'method_map.md').read_text(encoding='utf-8')
        self.assertEqual(text, generate_method_map())

    def test_check_mode(self):
        with self.assertRaises(CommandError) as caught:
            call_command('methodmap', '--check', out=str(self.tmp), stdout=StringIO())
        self.assertEqual(caught.exception.returncode, 3)

        call_command('methodmap', out=str(self.tmp), stdout=StringIO())
        out = StringIO()
        call_command('methodmap', '--check', out=str(self.tmp), stdout=out)
        self.assertIn('up to date', out.getvalue())
