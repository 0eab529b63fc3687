import logging

from translator.checkpoint import save_checkpoint
from translator.cli import A2ACommand
from translator.conf import get_preset
from translator.serializers import ComputeScalesSerializer
from translator.synth import ingest_directory

logger = logging.getLogger(__name__)


class Command(A2ACommand):
    help = ('Set each modality\'s latent scale factor to 1 / std of its encoded training latents. '
            'With --preset full the published factors are written instead.')
    serializer_class = ComputeScalesSerializer

    def add_options(self, parser):
        parser.add_argument('--data', help='paired dataset directory')
        parser.add_argument('--ckpt', help='checkpoint directory, updated in place')
        parser.add_argument('--preset', help='write the fixed factors of this preset instead of estimating')
        parser.add_argument('--min-samples', type=int, help='minimum latents per modality')
        parser.add_argument('--batch-size', type=int, help='encoder batch size')

    def perform(self, options, echo):
        checkpoint = self.open_checkpoint(options['ckpt'])
        model = checkpoint.model
        registry = checkpoint.registry
        fixed = get_preset(options['preset'])['scale_factors'] if options.get('preset') else None

        factors = {}
        if fixed:
            factors = {name: fixed[name] for name in registry.names if name in fixed}
        else:
            dataset = ingest_directory(options['data'], registry)
            for name in registry.names:
                if not dataset.files(name):
                    logger.warning(f"No {name} images in {options['data']}; its scale factor is left unset")
                    continue
                factors[name] = model.estimate_scale_factor(
                    name, dataset.images(name), options['batch_size'], options['min_samples']
                )
        for name, value in factors.items():
            registry.set_scale_factor(name, value)
            logger.info(f"{name}: scale factor {value:.6f}")
        self.echo(checkpoint, echo)
        save_checkpoint(checkpoint, options['ckpt'])
        self.write_json({'scale_factors': factors})
