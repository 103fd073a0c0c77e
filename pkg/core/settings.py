"""
Django settings for the distillation workbench.

The project has no web surface: Django provides the ORM that records sweep
cells and runs, the management commands that drive experiments, and the
settings layer below.
"""

import logging
import os
import sys
from pathlib import Path

import structlog
from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / '.env')

SECRET_KEY = os.getenv('DJANGO_SECRET_KEY', 'distill-local-only')

DEBUG = os.getenv('DJANGO_DEBUG', '0') == '1'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',

    # Local apps
    'apps.experiments',
]


# Database

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.getenv('DISTILL_DB_PATH', str(BASE_DIR / 'distill.sqlite3')),
    }
}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

TIME_ZONE = 'UTC'

USE_TZ = True


# Distillation settings
DISTILL_OUTPUT_DIR = Path(os.getenv('DISTILL_OUTPUT_DIR', str(BASE_DIR / 'artifacts')))
DISTILL_MASTER_SEED = int(os.getenv('DISTILL_MASTER_SEED', '0'))
DISTILL_N_JOBS = int(os.getenv('DISTILL_N_JOBS', '1'))
DISTILL_LOG_FORMAT = os.getenv('DISTILL_LOG_FORMAT', 'console')
DISTILL_LOG_LEVEL = os.getenv('DISTILL_LOG_LEVEL', 'INFO').upper()


# Logging
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'json': {
            '()': 'pythonjsonlogger.jsonlogger.JsonFormatter',
            'format': '%(asctime)s %(levelname)s %(name)s %(message)s',
        },
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'json' if DISTILL_LOG_FORMAT == 'json' else 'plain',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': DISTILL_LOG_LEVEL,
    },
    'loggers': {
        'django': {'handlers': ['console'], 'level': 'WARNING', 'propagate': False},
    },
}

structlog.configure(
    processors=[
        structlog.contextvars.merge_contextvars,
        structlog.processors.add_log_level,
        structlog.processors.TimeStamper(fmt='iso'),
        structlog.processors.JSONRenderer() if DISTILL_LOG_FORMAT == 'json' else structlog.dev.ConsoleRenderer(colors=False),
    ],
    wrapper_class=structlog.make_filtering_bound_logger(getattr(logging, DISTILL_LOG_LEVEL, logging.INFO)),
    logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
    cache_logger_on_first_use=False,
)
