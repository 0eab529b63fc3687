from translator.cli import A2ACommand
from translator.registry import DirectionFilter
from translator.serializers import ListDirectionsSerializer

from .list_modalities import registry_from_options


class Command(A2ACommand):
    help = 'One line per ordered modality pair: SRC:TGT and TRAINED or ZERO_SHOT.'
    serializer_class = ListDirectionsSerializer

    def add_options(self, parser):
        which = parser.add_mutually_exclusive_group()
        which.add_argument('--all', dest='filter', action='store_const', const=DirectionFilter.ALL.value)
        which.add_argument('--trained', dest='filter', action='store_const', const=DirectionFilter.TRAINED.value)
        which.add_argument('--zero-shot', dest='filter', action='store_const',
                           const=DirectionFilter.ZERO_SHOT.value)
        parser.add_argument('--ckpt', help='classify against this checkpoint\'s trained directions')
        parser.add_argument('--preset', help='registry preset when no checkpoint is given')

    def perform(self, options, echo):
        registry, trained = registry_from_options(self, options)
        for direction in registry.list_directions(trained, options['filter']):
            self.stdout.write(f'{direction}\t{direction.status.value}')
