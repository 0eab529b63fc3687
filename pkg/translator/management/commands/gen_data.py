from translator.cli import A2ACommand
from translator.conf import a2a_settings, get_preset
from translator.registry import build_default_registry
from translator.serializers import GenDataSerializer
from translator.synth import make_paired_dataset


class Command(A2ACommand):
    help = 'Generate a deterministic synthetic paired dataset (.img files plus pairs.tsv).'
    serializer_class = GenDataSerializer

    def add_options(self, parser):
        parser.add_argument('--seeds', help='inclusive scene seed range, e.g. 0..511')
        parser.add_argument('--protocol', help='pair protocol: seven-pair or all-pairs')
        parser.add_argument('--out', help='output directory')
        parser.add_argument('--preset', help='registry preset (desk or full)')
        parser.add_argument('--workers', type=int, help='scenes rendered concurrently')
        parser.add_argument('--quiet', action='store_true', default=None, help='no progress bar')

    def get_defaults(self):
        return {'preset': a2a_settings.PRESET, 'workers': a2a_settings.WORKERS}

    def perform(self, options, echo):
        registry = build_default_registry(get_preset(options['preset'])['registry'])
        manifest = make_paired_dataset(
            options['seeds'],
            options['protocol'],
            options['out'],
            registry=registry,
            workers=options['workers'],
            progress=self.progress(options),
        )
        self.write_json({'out': str(manifest.root), **manifest.entries()})
