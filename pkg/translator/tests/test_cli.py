import io
import json
import shutil
import tempfile
from pathlib import Path

from django.conf import settings
from django.core.management import call_command
from django.test import TestCase, override_settings

from ..checkpoint import load_checkpoint
from ..cli import read_config_file, run
from ..formats import read_img


def a2a(*argv):
    stdout, stderr = io.StringIO(), io.StringIO()
    code = run([str(arg) for arg in argv], stdout=stdout, stderr=stderr)
    return code, stdout.getvalue(), stderr.getvalue()


class CommandLineTests(TestCase):
    """Tests for argument handling and exit codes"""

    def setUp(self):
        self.root = Path(tempfile.mkdtemp(prefix='a2a-cli-'))
        self.addCleanup(shutil.rmtree, self.root, True)

    def test_list_directions(self):
        """Test that the desk registry lists all twenty ordered pairs as zero-shot"""
        code, out, _ = a2a('list-directions', '--all')
        lines = out.splitlines()
        self.assertEqual(code, 0)
        self.assertEqual(len(lines), 20)
        self.assertEqual(lines[0], 'SAR:RGB\tZERO_SHOT')

    def test_list_modalities(self):
        """Test that every registered modality gets one line"""
        code, out, _ = a2a('list-modalities')
        self.assertEqual(code, 0)
        self.assertEqual([line.split('\t')[1] for line in out.splitlines()], ['SAR', 'RGB', 'MS', 'NIR', 'PAN'])
        self.assertEqual(out.splitlines()[4], '4\tPAN\t1\t64\t-')

    def test_call_command(self):
        """Test that commands also run through Django's call_command"""
        out = io.StringIO()
        call_command('list_modalities', stdout=out)
        self.assertEqual(len(out.getvalue().splitlines()), 5)

    def test_usage_errors(self):
        """Test that unknown commands and flags and invalid options exit with 1"""
        self.assertEqual(a2a()[0], 1)
        self.assertEqual(a2a('frobnicate')[0], 1)
        self.assertEqual(a2a('list-directions', '--bogus')[0], 1)
        code, _, err = a2a('list-directions', '--trained')
        self.assertEqual(code, 1)
        self.assertIn('ckpt', err)
        self.assertEqual(a2a('gen-data', '--seeds', '5..2', '--out', self.root / 'data')[0], 1)

    def test_config_file_errors(self):
        """Test that unknown keys and malformed lines in a config file are usage errors"""
        config = self.root / 'bad.conf'
        config.write_text('seeds=0..1\nflavour=mint\n')
        self.assertEqual(a2a('gen-data', '--config', config, '--out', self.root / 'data')[0], 1)
        config.write_text('no equals sign\n')
        self.assertEqual(a2a('gen-data', '--config', config, '--out', self.root / 'data')[0], 1)
        self.assertEqual(a2a('gen-data', '--config', self.root / 'absent.conf')[0], 1)

    def test_runtime_errors(self):
        """Test that a missing checkpoint is a runtime failure on one A2A-ERR line"""
        code, _, err = a2a('inspect-checkpoint', '--ckpt', self.root / 'missing')
        self.assertEqual(code, 2)
        self.assertTrue(err.startswith('A2A-ERR: '))
        self.assertEqual(len(err.splitlines()), 1)

    def test_read_config_file(self):
        """Test that comments are skipped and dashes in keys become underscores"""
        config = self.root / 'a.conf'
        config.write_text('# defaults\n\nbatch-size = 4\nlambda=0.5\n')
        self.assertEqual(read_config_file(config), {'batch_size': '4', 'lambda': '0.5'})


class DeskPipelineTests(TestCase):
    """End-to-end run of the desk pipeline through the command line"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.root = Path(tempfile.mkdtemp(prefix='a2a-pipeline-'))
        cls.data = cls.root / 'data'
        cls.ckpt = cls.root / 'ckpt'
        cls.results = {}

        def step(name, *argv):
            cls.results[name] = a2a(*argv)
            if cls.results[name][0] != 0:
                raise AssertionError(f"{name} failed: {cls.results[name][2]}")

        step('gen-data', 'gen-data', '--seeds', '0..2', '--out', cls.data, '--quiet')
        step('train-vae', 'train-vae', '--data', cls.data, '--ckpt', cls.ckpt, '--steps', 1,
             '--batch-size', 2, '--codec-hidden', 8, '--quiet')
        step('compute-scales', 'compute-scales', '--data', cls.data, '--ckpt', cls.ckpt, '--min-samples', 2)
        config = cls.root / 'train.conf'
        config.write_text('steps=5\nbatch-size=2\nlambda=0.5\n')
        step('train-dit', 'train-dit', '--config', config, '--data', cls.data, '--ckpt', cls.ckpt,
             '--directions', 'SAR:RGB', '--steps', 1, '--quiet')

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.root, ignore_errors=True)
        super().tearDownClass()

    def test_generated_dataset(self):
        """Test that gen-data reports the scenes and rows it wrote"""
        document = json.loads(self.results['gen-data'][1])
        self.assertEqual(document['scenes'], '3')
        self.assertEqual(document['rows'], '21')
        self.assertEqual(document['protocol'], 'seven-pair')

    def test_stage1_reports(self):
        """Test that train-vae logs one JSON step report per modality"""
        reports = [json.loads(line) for line in self.results['train-vae'][1].splitlines()]
        self.assertEqual([r['modality'] for r in reports], ['SAR', 'RGB', 'MS', 'NIR', 'PAN'])
        self.assertTrue(all(r['kind'] == 'stage1' for r in reports))

    def test_scale_factors(self):
        """Test that compute-scales stores a positive factor for every modality"""
        factors = json.loads(self.results['compute-scales'][1])['scale_factors']
        self.assertEqual(sorted(factors), ['MS', 'NIR', 'PAN', 'RGB', 'SAR'])
        self.assertTrue(all(value > 0 for value in factors.values()))
        code, out, _ = a2a('list-modalities', '--ckpt', self.ckpt)
        self.assertEqual(code, 0)
        self.assertNotIn('\t-', out)

    def test_checkpoint_state(self):
        """Test that flags win over the config file and the trained set is recorded"""
        checkpoint = load_checkpoint(self.ckpt)
        self.assertEqual(checkpoint.trained_directions, frozenset({('SAR', 'RGB')}))
        self.assertEqual(checkpoint.step, 1)
        self.assertEqual(checkpoint.config['train_dit.steps'], '1')
        self.assertEqual(checkpoint.config['train_dit.lambda_calib'], '0.5')
        code, out, _ = a2a('list-directions', '--trained', '--ckpt', self.ckpt)
        self.assertEqual((code, out.splitlines()), (0, ['SAR:RGB\tTRAINED']))
        code, out, _ = a2a('list-directions', '--zero-shot', '--ckpt', self.ckpt)
        self.assertEqual(len(out.splitlines()), 19)

    def test_translate_is_reproducible(self):
        """Test that translating twice with the same seed writes identical files"""
        source = self.data / 'SAR' / '000000.img'
        outputs = [self.root / 'first.img', self.root / 'second.img']
        for out in outputs:
            code, stdout, err = a2a('translate', '--src-file', source, '--direction', 'SAR:RGB',
                                    '--ckpt', self.ckpt, '--steps', 2, '--out', out)
            self.assertEqual(code, 0, err)
        self.assertEqual(json.loads(stdout)['status'], 'TRAINED')
        self.assertEqual(outputs[0].read_bytes(), outputs[1].read_bytes())
        self.assertEqual(read_img(outputs[0]).shape, (3, 32, 32))

    def test_translate_zero_shot(self):
        """Test that an untrained direction is translated and labelled zero-shot"""
        out = self.root / 'pan.img'
        code, stdout, err = a2a('translate', '--src-file', self.data / 'SAR' / '000001.img', '--direction',
                                'SAR:PAN', '--ckpt', self.ckpt, '--steps', 2, '--out', out)
        self.assertEqual(code, 0, err)
        document = json.loads(stdout)
        self.assertEqual(document['status'], 'ZERO_SHOT')
        self.assertEqual(document['shape'], [1, 64, 64])
        self.assertTrue(abs(read_img(out)).max() <= 1.0)

    def test_evaluate_and_report(self):
        """Test that evaluate writes a report that report can tabulate"""
        out = self.root / 'eval.json'
        code, stdout, err = a2a('evaluate', '--data', self.data, '--ckpt', self.ckpt, '--direction', 'SAR:RGB',
                                '--steps', 2, '--limit', 2, '--out', out, '--quiet')
        self.assertEqual(code, 0, err)
        document = json.loads(stdout)
        self.assertEqual(document, json.loads(out.read_text()))
        self.assertEqual(document['trained_directions'], ['SAR:RGB'])
        self.assertEqual(document['reports'][0]['n_pairs'], 2)
        self.assertEqual(document['reports'][0]['status'], 'TRAINED')

        code, table, err = a2a('report', out)
        self.assertEqual(code, 0, err)
        self.assertEqual(len(table.splitlines()), 3)
        self.assertIn('SAR:RGB', table.splitlines()[2])

    def test_unexpected_failures_exit_with_two(self):
        """Test that a library error such as an unknown device still ends in one A2A-ERR line"""
        with override_settings(ANY2ANY={**settings.ANY2ANY, 'DEVICE': 'no-such-device'}):
            code, out, err = a2a('translate', '--src-file', self.data / 'SAR' / '000000.img', '--direction',
                                 'SAR:RGB', '--ckpt', self.ckpt, '--steps', 2, '--out', self.root / 'never.img')
        self.assertEqual(code, 2)
        self.assertTrue(err.startswith('A2A-ERR: RuntimeError: '), err)
        self.assertEqual(len(err.splitlines()), 1)
        self.assertFalse((self.root / 'never.img').exists())

    def test_inspect_checkpoint(self):
        """Test that inspect prints the manifest and replays a command's options"""
        code, out, _ = a2a('inspect-checkpoint', '--ckpt', self.ckpt)
        self.assertEqual(code, 0)
        self.assertIn('trained_directions=SAR:RGB', out)
        self.assertIn('digest=', out)
        self.assertIn('Backbone', out)

        code, out, _ = a2a('inspect-checkpoint', '--ckpt', self.ckpt, '--replay', 'train-dit')
        self.assertEqual(code, 0)
        replay = self.root / 'replay.conf'
        replay.write_text(out)
        values = read_config_file(replay)
        self.assertEqual(values['directions'], 'SAR:RGB')
        self.assertEqual(values['steps'], '1')
        self.assertEqual(values['batch_size'], '2')
