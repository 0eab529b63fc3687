import logging

from translator.checkpoint import manifest_digest, sorted_directions
from translator.cli import A2ACommand, boolean_flag, render_json
from translator.conf import a2a_settings
from translator.exceptions import DatasetError
from translator.formats import atomic_write
from translator.metrics import evaluate_direction, format_table, mean_image_baseline, noise_baseline
from translator.registry import format_direction
from translator.sampling import SampleConfig
from translator.serializers import EvaluateSerializer, MetricsReportSerializer
from translator.synth import ingest_directory
from translator.training import seed_everything

logger = logging.getLogger(__name__)


class Command(A2ACommand):
    help = 'Translate every test source of one direction (or all of them) and report PSNR, SSIM and RMSE.'
    serializer_class = EvaluateSerializer

    def add_options(self, parser):
        parser.add_argument('--data', help='paired test set')
        parser.add_argument('--ckpt')
        target = parser.add_mutually_exclusive_group()
        target.add_argument('--direction', help='SRC:TGT')
        target.add_argument('--all', action='store_true', default=None, help='every ordered pair of the registry')
        parser.add_argument('--steps', type=int)
        parser.add_argument('--eta', type=float)
        parser.add_argument('--seed', type=int, help='pair i uses seed + i')
        boolean_flag(parser, '--use-adapter', 'apply the residual adapter')
        parser.add_argument('--limit', type=int, help='at most this many test pairs per direction')
        parser.add_argument('--workers', type=int, help='pairs translated concurrently')
        parser.add_argument('--out', help='also write the JSON report here')
        parser.add_argument('--baselines', action='store_true', default=None,
                            help='add mean-image and noise baselines')
        parser.add_argument('--train-data', help='training set for the mean-image baseline')
        parser.add_argument('--format', help='stdout format: json or table')
        parser.add_argument('--quiet', action='store_true', default=None)

    def get_defaults(self):
        sampling = a2a_settings.SAMPLING
        return {
            'steps': sampling['STEPS'],
            'eta': sampling['ETA'],
            'seed': a2a_settings.SEED,
            'workers': a2a_settings.WORKERS,
        }

    def directions(self, options, checkpoint, dataset):
        if not options['all']:
            return [options['direction']]
        available = set(dataset.directions)
        directions = []
        for direction in checkpoint.registry.list_directions(checkpoint.trained_directions):
            if direction.key in available:
                directions.append(direction.key)
            else:
                logger.warning(f"{options['data']} has no pairs for {direction}; skipped")
        if not directions:
            raise DatasetError(f"{options['data']}: no test pairs for any direction")
        return directions

    def perform(self, options, echo):
        checkpoint = self.open_checkpoint(options['ckpt'])
        model = checkpoint.model
        trained = checkpoint.trained_directions
        dataset = ingest_directory(options['data'], checkpoint.registry)
        train_set = ingest_directory(options['train_data'], checkpoint.registry) if options['baselines'] else None
        seed_everything(options['seed'], a2a_settings.DETERMINISTIC)
        config = SampleConfig(
            steps=options['steps'],
            eta=options['eta'],
            seed=options['seed'],
            use_adapter=options['use_adapter'],
        )

        reports = []
        for direction in self.directions(options, checkpoint, dataset):
            report = evaluate_direction(
                model, dataset, direction, config, trained,
                limit=options.get('limit'), workers=options['workers'], progress=self.progress(options),
            )
            reports.append(report)
            if train_set is not None:
                targets = [target for _, target in dataset.iter_pairs(direction, limit=options.get('limit'))]
                train_targets = train_set.images(direction[1]).numpy()
                reports.append(mean_image_baseline(train_targets, targets, direction, report.status))
                reports.append(noise_baseline(targets, direction, options['seed'], report.status))

        document = {
            'checkpoint': manifest_digest(options['ckpt']),
            'trained_directions': [format_direction(d) for d in sorted_directions(checkpoint.registry, trained)],
            'sampling': {key: echo[key] for key in ('steps', 'eta', 'seed', 'use_adapter')},
            'reports': MetricsReportSerializer(reports, many=True).data,
        }
        text = render_json(document)
        if options.get('out'):
            atomic_write(options['out'], text.encode('utf-8'))
        self.stdout.write(text if options['format'] == 'json' else format_table(reports), ending='')
