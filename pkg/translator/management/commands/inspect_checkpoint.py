from translator.checkpoint import manifest_digest, render_manifest
from translator.cli import A2ACommand
from translator.exceptions import CheckpointError
from translator.serializers import InspectCheckpointSerializer


def format_breakdown(rows):
    width = max(len(name) for name, _ in rows)
    lines = [f"{'Component'.ljust(width)}  {'Parameters':>12}  {'Millions':>9}"]
    lines.append(f"{'-' * width}  {'-' * 12}  {'-' * 9}")
    for name, count in rows:
        lines.append(f'{name.ljust(width)}  {count:>12,}  {count / 1e6:>8.3f}M')
    return '\n'.join(lines) + '\n'


class Command(A2ACommand):
    help = ('Print the manifest, the digest and the per-component parameter breakdown. '
            'With --replay COMMAND print that command\'s echoed options as a --config file instead.')
    serializer_class = InspectCheckpointSerializer

    def add_options(self, parser):
        parser.add_argument('--ckpt')
        parser.add_argument('--replay', metavar='COMMAND', help='e.g. train-dit')

    def perform(self, options, echo):
        checkpoint = self.open_checkpoint(options['ckpt'])
        if options.get('replay'):
            prefix = options['replay'].replace('-', '_') + '.'
            lines = [f'{key[len(prefix):]}={value}'
                     for key, value in sorted(checkpoint.config.items()) if key.startswith(prefix)]
            if not lines:
                raise CheckpointError(f"{options['ckpt']}: no echoed options for {options['replay']}")
            self.stdout.write('\n'.join(lines))
            return
        self.stdout.write(render_manifest(checkpoint.manifest()).decode('utf-8'), ending='')
        self.stdout.write(f"\ndigest={manifest_digest(options['ckpt'])}\n")
        self.stdout.write(format_breakdown(checkpoint.model.parameter_breakdown()), ending='')
