import contextlib

from rest_framework import serializers

from translator.ablation import format_ablation, run_ablation
from translator.cli import A2ACommand, render_json
from translator.conf import a2a_settings
from translator.exceptions import GateError
from translator.formats import atomic_write
from translator.sampling import SampleConfig
from translator.serializers import AblateSerializer, InfFloatField, MetricsReportSerializer
from translator.synth import ingest_directory
from translator.training import StepReportWriter, TrainConfig, seed_everything


class AblationRowSerializer(serializers.Serializer):
    setting = serializers.IntegerField()
    description = serializers.CharField()
    n_directions = serializers.IntegerField()
    steps = serializers.IntegerField()
    report = MetricsReportSerializer()


class GateResultSerializer(serializers.Serializer):
    name = serializers.CharField()
    description = serializers.CharField()
    hard = serializers.BooleanField()
    delta = InfFloatField()
    threshold = serializers.FloatField()
    passed = serializers.BooleanField()


class Command(A2ACommand):
    help = ('Run the seven ablation settings from a checkpoint with trained codecs and scale factors, '
            'scored on SAR:RGB. S is --steps. Exits 2 when a hard gate fails.')
    serializer_class = AblateSerializer

    def add_options(self, parser):
        parser.add_argument('--data', help='paired training set')
        parser.add_argument('--test-data', help='held-out paired test set')
        parser.add_argument('--ckpt', help='base checkpoint, left unchanged')
        parser.add_argument('--protocol', help='pair protocol for settings 5 to 7')
        parser.add_argument('--steps', type=int, help='S, the single-setting step budget')
        parser.add_argument('--batch-size', type=int)
        parser.add_argument('--lr', type=float)
        parser.add_argument('--lambda', dest='lambda_calib', type=float)
        parser.add_argument('--seed', type=int)
        parser.add_argument('--sample-steps', type=int, help='DDIM steps at evaluation')
        parser.add_argument('--eta', type=float)
        parser.add_argument('--limit', type=int, help='test pairs per setting')
        parser.add_argument('--out', help='write the result as JSON here')
        parser.add_argument('--log-file', help='JSON-lines step reports')
        parser.add_argument('--quiet', action='store_true', default=None)

    def get_defaults(self):
        stage2 = a2a_settings.STAGE2
        sampling = a2a_settings.SAMPLING
        return {
            'steps': stage2['STEPS'],
            'batch_size': stage2['BATCH_SIZE'],
            'lr': stage2['LR'],
            'lambda_calib': stage2['LAMBDA'],
            'seed': a2a_settings.SEED,
            'sample_steps': sampling['STEPS'],
            'eta': sampling['ETA'],
        }

    def perform(self, options, echo):
        base = self.open_checkpoint(options['ckpt'])
        train_set = ingest_directory(options['data'], base.registry)
        test_set = ingest_directory(options['test_data'], base.registry)
        seed_everything(options['seed'], a2a_settings.DETERMINISTIC)
        config = TrainConfig(
            stage=2,
            lr=options['lr'],
            batch_size=options['batch_size'],
            steps=options['steps'],
            lambda_calib=options['lambda_calib'],
            seed=options['seed'],
            grad_clip=a2a_settings.STAGE2['GRAD_CLIP'] or None,
        )
        sample_config = SampleConfig(steps=options['sample_steps'], eta=options['eta'], seed=options['seed'])

        # step reports only go to --log-file; stdout carries the table
        writers = self.report_writer(options) if options.get('log_file') else contextlib.nullcontext(StepReportWriter())
        with writers as writer:
            result = run_ablation(
                base, train_set, test_set, config, sample_config,
                protocol=options['protocol'],
                limit=options.get('limit'),
                writer=writer,
                progress=self.progress(options),
            )

        self.stdout.write(format_ablation(result), ending='')
        if options.get('out'):
            document = {
                'options': echo,
                'rows': AblationRowSerializer(result.rows, many=True).data,
                'gates': GateResultSerializer(result.gates, many=True).data,
                'passed': result.passed,
            }
            atomic_write(options['out'], render_json(document).encode('utf-8'))
        failed = [gate for gate in result.gates if gate.hard and not gate.passed]
        if failed:
            raise GateError(', '.join(f'gate ({g.name}) {g.description} {g.delta:+.2f} dB' for g in failed))

