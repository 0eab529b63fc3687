"""
Option serializers for the management commands.

Each command merges settings defaults, an optional ``--config`` file and its
flags into one dict and validates it here. Values arrive either typed (from
argparse) or as strings (from a config file); the DRF fields coerce both.
"""

import math

from rest_framework import serializers

from .conf import PRESETS
from .exceptions import DirectionError
from .metrics import MetricsReport
from .registry import PAIR_PROTOCOLS, DirectionFilter, format_direction, parse_direction

PROTOCOLS = [*PAIR_PROTOCOLS, 'all-pairs']
EMBEDDING_MODES = ['learned', 'indicator']
OUTPUT_FORMATS = ['json', 'table']


class CommaListField(serializers.Field):
    """A list given either as a Python list or as one comma-separated string."""

    default_error_messages = {
        'invalid': 'Expected a list or a comma-separated string.',
        'empty': 'This list may not be empty.',
    }

    def __init__(self, *, allow_empty=False, **kwargs):
        self.allow_empty = allow_empty
        super().__init__(**kwargs)

    def parse_item(self, text):
        return text

    def format_item(self, item):
        return str(item)

    def to_internal_value(self, data):
        if isinstance(data, str):
            data = [part for part in (p.strip() for p in data.split(',')) if part]
        if not isinstance(data, (list, tuple)):
            self.fail('invalid')
        if not data and not self.allow_empty:
            self.fail('empty')
        return [self.parse_item(item) for item in data]

    def to_representation(self, value):
        return ','.join(self.format_item(item) for item in value)


class DirectionField(serializers.CharField):
    def to_internal_value(self, data):
        text = super().to_internal_value(data)
        try:
            return parse_direction(text)
        except DirectionError as exc:
            raise serializers.ValidationError(str(exc)) from None

    def to_representation(self, value):
        return format_direction(value)


class DirectionListField(CommaListField):
    def parse_item(self, text):
        if isinstance(text, (list, tuple)) and len(text) == 2:
            return tuple(text)
        try:
            return parse_direction(str(text))
        except DirectionError as exc:
            raise serializers.ValidationError(str(exc)) from None

    def format_item(self, item):
        return format_direction(item)


class SeedRangeField(serializers.CharField):
    """``a..b`` (inclusive) or a single seed, as a ``range``."""

    default_error_messages = {
        'invalid_range': 'Expected a seed range like 0..511, got {value!r}.',
        'reversed': 'Seed range {value!r} ends before it starts.',
    }

    def to_internal_value(self, data):
        if isinstance(data, range):
            return data
        text = super().to_internal_value(str(data))
        start, sep, stop = text.partition('..')
        try:
            first = int(start)
            last = int(stop) if sep else first
        except ValueError:
            self.fail('invalid_range', value=text)
        if first < 0 or last < 0:
            self.fail('invalid_range', value=text)
        if last < first:
            self.fail('reversed', value=text)
        return range(first, last + 1)

    def to_representation(self, value):
        return f'{value.start}..{value.stop - 1}'


class InfFloatField(serializers.FloatField):
    """Float that carries the +inf PSNR sentinel through strict JSON as ``"inf"``."""

    def to_internal_value(self, data):
        if isinstance(data, str) and data.strip().lower() in ('inf', '+inf', 'infinity'):
            return math.inf
        return super().to_internal_value(data)

    def to_representation(self, value):
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return super().to_representation(value)


def positive(value):
    if not value > 0:
        raise serializers.ValidationError('Must be greater than 0.')
    return value


class QuietMixin(serializers.Serializer):
    quiet = serializers.BooleanField(default=False)


class ModelOptionsSerializer(serializers.Serializer):
    """Options used when a command has to create a fresh checkpoint."""
    preset = serializers.ChoiceField(choices=list(PRESETS))
    backbone = serializers.CharField(required=False)
    embedding_mode = serializers.ChoiceField(choices=EMBEDDING_MODES, required=False)
    seed = serializers.IntegerField(min_value=0)
    codec_hidden = serializers.IntegerField(min_value=1, required=False)
    adapter_hidden = serializers.IntegerField(min_value=1, required=False)
    gamma = serializers.FloatField(min_value=0, required=False)
    beta_kl = serializers.FloatField(min_value=0, required=False)


class GenDataSerializer(QuietMixin):
    seeds = SeedRangeField()
    protocol = serializers.ChoiceField(choices=PROTOCOLS, default='seven-pair')
    out = serializers.CharField()
    preset = serializers.ChoiceField(choices=list(PRESETS))
    workers = serializers.IntegerField(min_value=1)


class TrainVaeSerializer(ModelOptionsSerializer, QuietMixin):
    data = serializers.CharField()
    ckpt = serializers.CharField()
    modality = serializers.CharField(required=False)
    steps = serializers.IntegerField(min_value=0)
    batch_size = serializers.IntegerField(min_value=1)
    lr = serializers.FloatField(validators=[positive])
    log_file = serializers.CharField(required=False)


class ComputeScalesSerializer(serializers.Serializer):
    data = serializers.CharField(required=False)
    ckpt = serializers.CharField()
    preset = serializers.ChoiceField(choices=list(PRESETS), required=False)
    min_samples = serializers.IntegerField(min_value=1, default=256)
    batch_size = serializers.IntegerField(min_value=1, default=64)

    def validate(self, attrs):
        if attrs.get('preset') != 'full' and not attrs.get('data'):
            raise serializers.ValidationError({'data': 'Required unless --preset full is given.'})
        return attrs


class TrainDitSerializer(QuietMixin):
    data = serializers.CharField()
    ckpt = serializers.CharField()
    out = serializers.CharField(required=False)
    directions = DirectionListField(required=False)
    protocol = serializers.ChoiceField(choices=PROTOCOLS, required=False)
    steps = serializers.IntegerField(min_value=0)
    batch_size = serializers.IntegerField(min_value=1)
    lr = serializers.FloatField(validators=[positive])
    lambda_calib = serializers.FloatField(min_value=0)
    grad_clip = serializers.FloatField(min_value=0, required=False)
    seed = serializers.IntegerField(min_value=0)
    scratch = serializers.BooleanField(default=False)
    detach_prediction = serializers.BooleanField(default=True)
    log_file = serializers.CharField(required=False)


class SamplingOptionsSerializer(serializers.Serializer):
    steps = serializers.IntegerField(min_value=1)
    eta = serializers.FloatField(min_value=0)
    seed = serializers.IntegerField(min_value=0)
    use_adapter = serializers.BooleanField(default=True)


class TranslateSerializer(SamplingOptionsSerializer):
    src_file = serializers.CharField()
    direction = DirectionField()
    ckpt = serializers.CharField()
    out = serializers.CharField()


class EvaluateSerializer(SamplingOptionsSerializer, QuietMixin):
    data = serializers.CharField()
    ckpt = serializers.CharField()
    direction = DirectionField(required=False)
    all = serializers.BooleanField(default=False)
    limit = serializers.IntegerField(min_value=1, required=False)
    workers = serializers.IntegerField(min_value=1)
    out = serializers.CharField(required=False)
    baselines = serializers.BooleanField(default=False)
    train_data = serializers.CharField(required=False)
    format = serializers.ChoiceField(choices=OUTPUT_FORMATS, default='json')

    def validate(self, attrs):
        if bool(attrs.get('direction')) == bool(attrs.get('all')):
            raise serializers.ValidationError('Give exactly one of --direction or --all.')
        if attrs.get('baselines') and not attrs.get('train_data'):
            raise serializers.ValidationError({'train_data': 'The mean-image baseline needs --train-data.'})
        return attrs


class ReportSerializer(serializers.Serializer):
    files = CommaListField()
    format = serializers.ChoiceField(choices=OUTPUT_FORMATS, default='table')


class RegistrySourceSerializer(serializers.Serializer):
    ckpt = serializers.CharField(required=False)
    preset = serializers.ChoiceField(choices=list(PRESETS), required=False)


class ListDirectionsSerializer(RegistrySourceSerializer):
    filter = serializers.ChoiceField(choices=[f.value for f in DirectionFilter], default=DirectionFilter.ALL.value)

    def validate(self, attrs):
        if attrs['filter'] != DirectionFilter.ALL.value and not attrs.get('ckpt'):
            raise serializers.ValidationError({'ckpt': 'Filtering by training status needs a checkpoint.'})
        return attrs


class InspectCheckpointSerializer(serializers.Serializer):
    ckpt = serializers.CharField()
    replay = serializers.CharField(required=False)


class AblateSerializer(QuietMixin):
    data = serializers.CharField()
    test_data = serializers.CharField()
    ckpt = serializers.CharField()
    protocol = serializers.ChoiceField(choices=PROTOCOLS, default='seven-pair')
    steps = serializers.IntegerField(min_value=1)
    batch_size = serializers.IntegerField(min_value=1)
    lr = serializers.FloatField(validators=[positive])
    lambda_calib = serializers.FloatField(min_value=0)
    seed = serializers.IntegerField(min_value=0)
    sample_steps = serializers.IntegerField(min_value=1)
    eta = serializers.FloatField(min_value=0)
    limit = serializers.IntegerField(min_value=1, required=False)
    out = serializers.CharField(required=False)
    log_file = serializers.CharField(required=False)


class MetricsReportSerializer(serializers.Serializer):
    direction = serializers.CharField()
    status = serializers.ChoiceField(choices=['TRAINED', 'ZERO_SHOT'])
    label = serializers.CharField(default='model')
    n_pairs = serializers.IntegerField(min_value=1)
    exact_matches = serializers.IntegerField(min_value=0, default=0)
    psnr_mean = InfFloatField()
    psnr_std = InfFloatField()
    ssim_mean = serializers.FloatField(min_value=-1, max_value=1)
    ssim_std = serializers.FloatField(min_value=0)
    rmse_mean = serializers.FloatField(min_value=0)
    rmse_std = serializers.FloatField(min_value=0)

    def create(self, validated_data):
        return MetricsReport(**validated_data)


def format_errors(detail, prefix='') -> str:
    """Flatten DRF error detail into one ``field: message`` line."""
    if isinstance(detail, dict):
        parts = []
        for key, value in detail.items():
            name = '' if key == 'non_field_errors' else f'{prefix}{key}'
            text = format_errors(value, f'{name}.' if name else '')
            parts.append(f'{name}: {text}' if name and not isinstance(value, dict) else text)
        return '; '.join(parts)
    if isinstance(detail, (list, tuple)):
        return ' '.join(format_errors(item, prefix) for item in detail)
    return str(detail)
