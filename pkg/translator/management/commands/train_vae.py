import logging

from translator.checkpoint import save_checkpoint
from translator.cli import A2ACommand
from translator.conf import a2a_settings
from translator.serializers import TrainVaeSerializer
from translator.synth import ingest_directory
from translator.training import TrainConfig, train_vae

logger = logging.getLogger(__name__)


class Command(A2ACommand):
    help = ('Stage I: fit the codec of one modality, or of every modality present in --data. '
            'Creates the checkpoint from the model flags when --ckpt does not exist yet.')
    serializer_class = TrainVaeSerializer

    def add_options(self, parser):
        parser.add_argument('--data', help='paired dataset directory')
        parser.add_argument('--ckpt', help='checkpoint directory (created if missing)')
        parser.add_argument('--modality', help='train only this modality')
        parser.add_argument('--steps', type=int, help='optimisation steps per modality')
        parser.add_argument('--batch-size', type=int)
        parser.add_argument('--lr', type=float)
        parser.add_argument('--log-file', help='write JSON-lines step reports here instead of stdout')
        parser.add_argument('--quiet', action='store_true', default=None)
        model = parser.add_argument_group('new checkpoint')
        model.add_argument('--preset', help='desk or full')
        model.add_argument('--backbone', help='backbone preset: desk, S/4, B/4 or L/4')
        model.add_argument('--embedding-mode', help='learned or indicator')
        model.add_argument('--seed', type=int)
        model.add_argument('--codec-hidden', type=int, help='codec base width')
        model.add_argument('--adapter-hidden', type=int, help='adapter hidden channels')
        model.add_argument('--gamma', type=float, help='perceptual weight for every modality')
        model.add_argument('--beta-kl', type=float, help='KL weight')

    def get_defaults(self):
        stage1 = a2a_settings.STAGE1
        return {
            'preset': a2a_settings.PRESET,
            'seed': a2a_settings.SEED,
            'steps': stage1['STEPS'],
            'batch_size': stage1['BATCH_SIZE'],
            'lr': stage1['LR'],
        }

    def perform(self, options, echo):
        checkpoint = self.open_checkpoint(options['ckpt'], create=options)
        registry = checkpoint.registry
        dataset = ingest_directory(options['data'], registry)
        if options.get('modality'):
            registry.id_of(options['modality'])
            modalities = [options['modality']]
        else:
            modalities = [name for name in registry.names if dataset.files(name)]

        config = TrainConfig(
            stage=1,
            lr=options['lr'],
            batch_size=options['batch_size'],
            steps=options['steps'],
            seed=options['seed'],
        )
        with self.report_writer(options) as writer:
            for name in modalities:
                if checkpoint.model.scale_factor(name) is not None:
                    logger.warning(f"{name} already has a scale factor; rerun compute-scales after this")
                train_vae(checkpoint, name, dataset.images(name), config, writer, self.progress(options))
        self.echo(checkpoint, echo)
        save_checkpoint(checkpoint, options['ckpt'])
