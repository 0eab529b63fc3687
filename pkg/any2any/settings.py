"""
Django settings for the any2any project.

The project has no web surface; Django hosts the configuration layer, the
management-command CLI and the test runner. Every translator default below
can be overridden from the environment with an ``A2A_*`` variable.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


def env_bool(name, default):
    return os.environ.get(name, str(default)).lower() in ('1', 'true', 'yes')


# Only used by Django internals; nothing here is signed or served.
SECRET_KEY = os.environ.get('SECRET_KEY', 'any2any-local-only')

DEBUG = env_bool('DEBUG', False)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    'rest_framework',
    'translator',
]


# Database
# The translator keeps no relational state; sqlite only backs the test runner.

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Translator defaults
# Desk-scale values; the full-scale preset lives in translator.conf.PRESETS.

ANY2ANY = {
    'PRESET': os.environ.get('A2A_PRESET', 'desk'),
    'DEVICE': os.environ.get('A2A_DEVICE', 'cpu'),
    'DETERMINISTIC': env_bool('A2A_DETERMINISTIC', True),
    'SEED': int(os.environ.get('A2A_SEED', '0')),
    'WORKERS': int(os.environ.get('A2A_WORKERS', '1')),
    'SCHEDULE': {
        'T': int(os.environ.get('A2A_SCHEDULE_T', '1000')),
        'BETA_START': float(os.environ.get('A2A_BETA_START', '1e-4')),
        'BETA_END': float(os.environ.get('A2A_BETA_END', '0.02')),
    },
    'BACKBONE': os.environ.get('A2A_BACKBONE', 'desk'),
    'EMBEDDING_MODE': os.environ.get('A2A_EMBEDDING_MODE', 'learned'),
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


# Logging
# Progress and diagnostics go to stderr; stdout is reserved for results.

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'stderr': {
            'class': 'logging.StreamHandler',
            'stream': 'ext://sys.stderr',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'translator': {
            'handlers': ['stderr'],
            'level': os.environ.get('A2A_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}
