from translator.cli import A2ACommand
from translator.conf import a2a_settings, get_preset
from translator.registry import build_default_registry
from translator.serializers import RegistrySourceSerializer


def registry_from_options(command, options):
    """The checkpoint's registry when --ckpt is given, else the preset's."""
    if options.get('ckpt'):
        checkpoint = command.open_checkpoint(options['ckpt'])
        return checkpoint.registry, checkpoint.trained_directions
    preset = options.get('preset') or a2a_settings.PRESET
    return build_default_registry(get_preset(preset)['registry']), frozenset()


class Command(A2ACommand):
    help = 'One tab-separated line per modality: id, name, channels, native size, scale factor.'
    serializer_class = RegistrySourceSerializer

    def add_options(self, parser):
        parser.add_argument('--ckpt', help='read the registry from this checkpoint')
        parser.add_argument('--preset', help='otherwise use this preset (desk or full)')

    def perform(self, options, echo):
        registry, _ = registry_from_options(self, options)
        for modality_id, spec in enumerate(registry):
            scale = '-' if spec.scale_factor is None else f'{spec.scale_factor:.6f}'
            self.stdout.write(f'{modality_id}\t{spec.name}\t{spec.channels}\t{spec.native_size}\t{scale}')
