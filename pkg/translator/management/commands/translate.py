import torch

from translator.cli import A2ACommand, boolean_flag
from translator.conf import a2a_settings
from translator.formats import read_img, write_img
from translator.sampling import SampleConfig, translate
from translator.serializers import TranslateSerializer
from translator.training import seed_everything


class Command(A2ACommand):
    help = 'Translate one .img file. Unseen directions are served zero-shot.'
    serializer_class = TranslateSerializer

    def add_options(self, parser):
        parser.add_argument('--src-file', help='source image (.img)')
        parser.add_argument('--direction', help='SRC:TGT')
        parser.add_argument('--ckpt')
        parser.add_argument('--steps', type=int, help='DDIM steps')
        parser.add_argument('--eta', type=float, help='0 gives deterministic DDIM')
        parser.add_argument('--seed', type=int, help='seed of the initial noise')
        parser.add_argument('--out', help='output .img path')
        boolean_flag(parser, '--use-adapter', 'apply the residual adapter after the last step')

    def get_defaults(self):
        sampling = a2a_settings.SAMPLING
        return {'steps': sampling['STEPS'], 'eta': sampling['ETA'], 'seed': a2a_settings.SEED}

    def perform(self, options, echo):
        checkpoint = self.open_checkpoint(options['ckpt'])
        direction = options['direction']
        resolved = checkpoint.registry.resolve_direction(*direction, checkpoint.trained_directions)
        seed_everything(options['seed'], a2a_settings.DETERMINISTIC)
        config = SampleConfig(
            steps=options['steps'],
            eta=options['eta'],
            seed=options['seed'],
            use_adapter=options['use_adapter'],
        )
        source = torch.from_numpy(read_img(options['src_file']))
        output = translate(source, direction, checkpoint.model, config)
        write_img(options['out'], output.detach().cpu().float().numpy())
        self.write_json({
            'out': options['out'],
            'direction': str(resolved),
            'status': resolved.status.value,
            'shape': list(output.shape),
        })
