"""
Command-line surface.

    python -m translator <command> [flags]
    python manage.py <command> [flags]

Commands are Django management commands built on ``A2ACommand``. Exit codes:
0 success, 1 usage error (unknown command or flag, invalid options or config
file), 2 runtime failure reported as one ``A2A-ERR: <message>`` line.
"""

import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from django.core.management import load_command_class
from django.core.management.base import BaseCommand, CommandError
from rest_framework.renderers import JSONRenderer

from .checkpoint import MANIFEST_NAME, Checkpoint, load_checkpoint
from .conf import a2a_settings
from .exceptions import TranslatorError
from .model import build_model
from .serializers import format_errors
from .training import StepReportWriter, seed_everything

logger = logging.getLogger(__name__)

PROG = 'a2a'

COMMANDS = {
    'gen-data': 'Generate a synthetic paired dataset',
    'train-vae': 'Stage I: train the per-modality codecs',
    'compute-scales': 'Estimate per-modality latent scale factors',
    'train-dit': 'Stage II: train the shared backbone and adapters',
    'translate': 'Translate one .img file along a direction',
    'evaluate': 'Score directions on a paired test set',
    'report': 'Merge metric reports into one table',
    'list-modalities': 'Show the registered modalities',
    'list-directions': 'Show translation directions and their status',
    'inspect-checkpoint': 'Print a checkpoint manifest and parameter counts',
    'ablate': 'Run the seven-setting ablation on SAR:RGB',
}


def usage() -> str:
    width = max(len(name) for name in COMMANDS)
    lines = [f'usage: {PROG} <command> [--config FILE] [flags]', '', 'commands:']
    lines += [f'  {name.ljust(width)}  {help_text}' for name, help_text in COMMANDS.items()]
    lines.append(f"\nRun '{PROG} <command> --help' for the flags of one command.")
    return '\n'.join(lines) + '\n'


def read_config_file(path) -> Dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped, dashes in keys become underscores."""
    try:
        text = Path(path).read_text(encoding='utf-8')
    except (OSError, UnicodeDecodeError) as exc:
        raise CommandError(f"Cannot read config file {path}: {exc}") from None
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith('#'):
            continue
        key, sep, value = stripped.partition('=')
        if not sep or not key.strip():
            raise CommandError(f"{path}:{number}: expected key=value, got {stripped!r}")
        values[key.strip().replace('-', '_')] = value.strip()
    return values


def config_value(value) -> str:
    """String form of a validated option, readable back through ``--config``."""
    if isinstance(value, bool):
        return 'true' if value else 'false'
    return str(value)


def render_json(data) -> str:
    return JSONRenderer().render(data, renderer_context={'indent': 2}).decode('utf-8') + '\n'


def run(argv: List[str], stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    if not argv or argv[0] in ('-h', '--help', 'help'):
        (stdout if argv else stderr).write(usage())
        return 0 if argv else 1

    name = argv[0].replace('_', '-')
    if name not in COMMANDS:
        stderr.write(f"Unknown command {argv[0]!r}\n{usage()}")
        return 1
    command = load_command_class('translator', name.replace('-', '_'))
    parser = command.create_parser(PROG, name)
    try:
        options = parser.parse_args(argv[1:])
    except CommandError as exc:
        stderr.write(f"{exc}\n{parser.format_usage()}")
        return 1
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1

    try:
        command.execute(**vars(options), stdout=stdout, stderr=stderr)
    except CommandError as exc:
        stderr.write(f"Error: {exc}\n{parser.format_usage()}")
        return 1
    except (TranslatorError, OSError) as exc:
        return report_failure(exc, stderr)
    except Exception as exc:
        # library errors, e.g. torch rejecting the configured device
        return report_failure(exc, stderr, prefix=f'{type(exc).__name__}: ')
    return 0


def report_failure(exc: BaseException, stderr, prefix: str = '') -> int:
    """Write one ``A2A-ERR:`` line and return exit code 2."""
    message = ' '.join(str(exc).split()) or type(exc).__name__
    stderr.write(f"A2A-ERR: {prefix}{message}\n")
    logger.debug("Command failed", exc_info=exc)
    return 2


class A2ACommand(BaseCommand):
    """
    Base for translator commands.

    Subclasses declare ``serializer_class``, add their flags in
    ``add_options`` (defaults left as None) and implement ``perform``.
    Option precedence: ``get_defaults()`` < ``--config`` file < flags.
    """

    requires_system_checks = []
    serializer_class = None
    # config-file keys that differ from the serializer field name
    config_aliases = {'lambda': 'lambda_calib'}

    @property
    def command_name(self) -> str:
        return self.__module__.rsplit('.', 1)[-1]

    def run_from_argv(self, argv):
        sys.exit(run(argv[1:]))

    def add_arguments(self, parser):
        parser.add_argument('--config', metavar='FILE', help='key=value file with defaults for any flag below')
        self.add_options(parser)

    def add_options(self, parser):
        pass

    def get_defaults(self) -> Dict:
        return {}

    def merge_options(self, options: Dict) -> Dict:
        fields = self.serializer_class().fields
        merged = {key: value for key, value in self.get_defaults().items() if key in fields}
        if options.get('config'):
            for key, value in read_config_file(options['config']).items():
                key = self.config_aliases.get(key, key)
                if key not in fields:
                    raise CommandError(f"{options['config']}: unknown option {key!r} for {self.command_name}")
                merged[key] = value
        for key in fields:
            if options.get(key) not in (None, [], ()):
                merged[key] = options[key]
        return {key: value for key, value in merged.items() if value is not None}

    def handle(self, *args, **options):
        serializer = self.serializer_class(data=self.merge_options(options))
        if not serializer.is_valid():
            raise CommandError(f"Invalid options: {format_errors(serializer.errors)}")
        self.options = serializer.validated_data
        logger.debug(f"{self.command_name} options: {serializer.data}")
        self.perform(self.options, serializer.data)

    def perform(self, options: Dict, echo: Dict):
        raise NotImplementedError

    def progress(self, options: Dict) -> bool:
        return not options.get('quiet') and sys.stderr.isatty()

    def write_json(self, data):
        self.stdout.write(render_json(data), ending='')

    def open_checkpoint(self, path, create: Optional[Dict] = None) -> Checkpoint:
        """Load ``path``; with ``create`` set, build a fresh model there if no checkpoint exists yet."""
        if create is None or (Path(path) / MANIFEST_NAME).exists():
            if create is not None:
                logger.warning(f"{path} exists; model options are taken from its manifest")
            checkpoint = load_checkpoint(path)
        else:
            seed_everything(create['seed'], a2a_settings.DETERMINISTIC)
            model = build_model(
                preset=create['preset'],
                backbone=create.get('backbone'),
                embedding_mode=create.get('embedding_mode'),
                seed=create['seed'],
                codec_hidden=create.get('codec_hidden'),
                adapter_hidden=create.get('adapter_hidden'),
                gamma=create.get('gamma'),
                beta_kl=create.get('beta_kl'),
            )
            checkpoint = Checkpoint(model=model, seed=create['seed'])
        checkpoint.model.to(a2a_settings.DEVICE)
        return checkpoint

    def echo(self, checkpoint: Checkpoint, echo: Dict):
        checkpoint.echo(self.command_name, {key: config_value(value) for key, value in echo.items()
                                            if value is not None})

    @contextlib.contextmanager
    def report_writer(self, options: Dict):
        """JSON-lines step reports to ``--log-file``, else to stdout."""
        if options.get('log_file'):
            with open(options['log_file'], 'w', encoding='utf-8') as stream:
                yield StepReportWriter(stream)
        else:
            yield StepReportWriter(self.stdout)


def boolean_flag(parser, name: str, help_text: str):
    parser.add_argument(name, action=argparse.BooleanOptionalAction, default=None, help=help_text)
