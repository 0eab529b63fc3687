"""
Translator settings.

``a2a_settings`` exposes ``settings.ANY2ANY`` merged over the built-in
defaults below, in the same way ``rest_framework.settings.api_settings``
wraps ``REST_FRAMEWORK``:

    from translator.conf import a2a_settings
    a2a_settings.STAGE2['LR']

``PRESETS`` holds the named model layouts (desk scale and full scale).
"""

import copy
import logging

from django.conf import settings
from django.test.signals import setting_changed

from .exceptions import RegistryError
from .registry import FULL_SCALE_FACTORS

logger = logging.getLogger(__name__)

DEFAULTS = {
    'PRESET': 'desk',
    'DEVICE': 'cpu',
    'DETERMINISTIC': True,
    'SEED': 0,
    'WORKERS': 1,
    'SCHEDULE': {
        'T': 1000,
        'BETA_START': 1e-4,
        'BETA_END': 0.02,
    },
    'BACKBONE': 'desk',
    'EMBEDDING_MODE': 'learned',
    'CODEC': {
        'HIDDEN': 32,
        'BETA_KL': 1e-5,
        'PERCEPTUAL': 'gradient',
    },
    'STAGE1': {
        'STEPS': 2000,
        'BATCH_SIZE': 16,
        'LR': 1e-3,
    },
    'STAGE2': {
        'STEPS': 20000,
        'BATCH_SIZE': 32,
        'LR': 1e-4,
        'LAMBDA': 1.0,
        'GRAD_CLIP': 1.0,
    },
    'SAMPLING': {
        'STEPS': 250,
        'ETA': 0.0,
    },
}

# gamma is the perceptual weight per modality; unlisted modalities get 0.
PRESETS = {
    'desk': {
        'registry': 'desk',
        'backbone': 'desk',
        'gamma': {},
        'beta_kl': 1e-5,
        'scale_factors': None,
    },
    'full': {
        'registry': 'full',
        'backbone': 'L/4',
        'gamma': {'RGB': 1.0},
        'beta_kl': 1e-5,
        'scale_factors': FULL_SCALE_FACTORS,
    },
}


def _merge(base, override):
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class TranslatorSettings:
    def __init__(self):
        self._values = None

    @property
    def values(self):
        if self._values is None:
            self._values = _merge(DEFAULTS, getattr(settings, 'ANY2ANY', {}))
        return self._values

    def __getattr__(self, name):
        if name.startswith('_'):
            raise AttributeError(name)
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(f"Invalid translator setting: {name!r}") from None

    def reload(self):
        self._values = None


a2a_settings = TranslatorSettings()


def reload_settings(*args, **kwargs):
    if kwargs.get('setting') == 'ANY2ANY':
        a2a_settings.reload()


setting_changed.connect(reload_settings)


def get_preset(name: str) -> dict:
    try:
        return PRESETS[name]
    except KeyError:
        raise RegistryError(f"Unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


def codec_options(preset_name, names, hidden=None, gamma=None, beta_kl=None, perceptual=None):
    """
    Per-modality codec options for ``names``.

    An explicit ``gamma`` applies to every modality; otherwise the preset's
    per-modality table is used.
    """
    preset = get_preset(preset_name)
    codec_defaults = a2a_settings.CODEC
    options = {}
    for name in names:
        options[name] = {
            'hidden': hidden if hidden is not None else codec_defaults['HIDDEN'],
            'gamma': float(gamma if gamma is not None else preset['gamma'].get(name, 0.0)),
            'beta_kl': float(beta_kl if beta_kl is not None else preset['beta_kl']),
            'perceptual': perceptual or codec_defaults['PERCEPTUAL'],
        }
    return options
