from translator.checkpoint import save_checkpoint
from translator.cli import A2ACommand, boolean_flag
from translator.conf import a2a_settings
from translator.registry import protocol_directions
from translator.serializers import TrainDitSerializer
from translator.synth import ingest_directory
from translator.training import Stage2Trainer, TrainConfig, seed_everything


class Command(A2ACommand):
    help = ('Stage II: train the conditioner, shared backbone and adapters on the union of the '
            'checkpoint\'s trained directions and the requested ones (incremental unless --scratch).')
    serializer_class = TrainDitSerializer

    def add_options(self, parser):
        parser.add_argument('--data', help='paired dataset directory')
        parser.add_argument('--ckpt', help='checkpoint with trained codecs and scale factors')
        parser.add_argument('--out', help='save here instead of updating --ckpt')
        parser.add_argument('--directions', help='comma-separated SRC:TGT list')
        parser.add_argument('--protocol', help='add every direction of a pair protocol')
        parser.add_argument('--steps', type=int)
        parser.add_argument('--batch-size', type=int)
        parser.add_argument('--lr', type=float)
        parser.add_argument('--lambda', dest='lambda_calib', type=float, help='calibration loss weight')
        parser.add_argument('--grad-clip', type=float, help='gradient norm clip; 0 disables')
        parser.add_argument('--seed', type=int)
        parser.add_argument('--scratch', action='store_true', default=None,
                            help='re-initialise stage II and forget earlier directions')
        boolean_flag(parser, '--detach-prediction', 'stop the calibration gradient at the prediction')
        parser.add_argument('--log-file')
        parser.add_argument('--quiet', action='store_true', default=None)

    def get_defaults(self):
        stage2 = a2a_settings.STAGE2
        return {
            'steps': stage2['STEPS'],
            'batch_size': stage2['BATCH_SIZE'],
            'lr': stage2['LR'],
            'lambda_calib': stage2['LAMBDA'],
            'grad_clip': stage2['GRAD_CLIP'],
            'seed': a2a_settings.SEED,
        }

    def perform(self, options, echo):
        checkpoint = self.open_checkpoint(options['ckpt'])
        registry = checkpoint.registry
        directions = set(options.get('directions', []))
        if options.get('protocol'):
            directions |= protocol_directions(options['protocol'], registry)
        dataset = ingest_directory(options['data'], registry)
        seed_everything(options['seed'], a2a_settings.DETERMINISTIC)

        config = TrainConfig(
            stage=2,
            lr=options['lr'],
            batch_size=options['batch_size'],
            steps=options['steps'],
            lambda_calib=options['lambda_calib'],
            directions=tuple(directions),
            seed=options['seed'],
            grad_clip=options.get('grad_clip') or None,
            detach_prediction=options['detach_prediction'],
        )
        with self.report_writer(options) as writer:
            trainer = Stage2Trainer(checkpoint, dataset, config, writer, from_scratch=options['scratch'])
            trainer.run(progress=self.progress(options))

        self.echo(checkpoint, echo)
        save_checkpoint(checkpoint, options.get('out') or options['ckpt'])
