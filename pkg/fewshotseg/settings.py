"""
Django settings for the fewshotseg project.

Configures installed apps, the experiment-ledger database, Celery, logging and
the FEWSHOT pipeline defaults read by the numeric apps.
"""
import os
from pathlib import Path
from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Load environment variables from .env file
load_dotenv(os.path.join(BASE_DIR, '.env'))

# Shorthand for environment variables
def env(key, default=None):
    return os.environ.get(key, default)


# Used only for Django internals; nothing is served over HTTP.
SECRET_KEY = env('SECRET_KEY', 'fewshotseg-local-only')

DEBUG = env('DEBUG', 'True') == 'True'

ALLOWED_HOSTS = []

# Application definition

INSTALLED_APPS = [
    "django.contrib.contenttypes",
    "autograd",
    "volumes",
    "episodes",
    "segmentation",
    "evaluation",
    "experiments",
]


# Database
# SQLite by default, DATABASE_URL (e.g. PostgreSQL) when set

if env('DATABASE_URL'):
    import dj_database_url
    DATABASES = {
        'default': dj_database_url.config(
            default=env('DATABASE_URL'),
            conn_max_age=600,
        )
    }
else:
    DATABASES = {
        "default": {
            "ENGINE": "django.db.backends.sqlite3",
            "NAME": BASE_DIR / "db.sqlite3",
            "OPTIONS": {
                "timeout": 20,  # Wait up to 20 seconds for locks to be released
            },
        }
    }

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = False
USE_TZ = True


# ============================================================================
# 🧠 FEW-SHOT PIPELINE DEFAULTS
# Read through django.conf.settings by the apps; every value can be
# overridden from the environment.
# ============================================================================
FEWSHOT = {
    'DATA_ROOT': Path(env('FEWSHOT_DATA_ROOT', BASE_DIR / 'data')),
    'OUTPUT_ROOT': Path(env('FEWSHOT_OUTPUT_ROOT', BASE_DIR / 'runs')),
    'SEED': int(env('FEWSHOT_SEED', '0')),
    # Episodes between progress lines in the training log
    'LOG_EVERY': int(env('FEWSHOT_LOG_EVERY', '100')),
    'THRESHOLD': float(env('FEWSHOT_THRESHOLD', '0.5')),
    'CLIP_NORM': float(env('FEWSHOT_CLIP_NORM', '5.0')),
    # Box labels are this many times cheaper than pixel masks
    'WEAK_FACTOR': float(env('FEWSHOT_WEAK_FACTOR', '15')),
}


# Redis Configuration
REDIS_URL = env('REDIS_URL', 'redis://127.0.0.1:6379/1')

# Celery Configuration
CELERY_BROKER_URL = env('CELERY_BROKER_URL', REDIS_URL)
CELERY_RESULT_BACKEND = env('CELERY_RESULT_BACKEND', REDIS_URL)
CELERY_ACCEPT_CONTENT = ['json']
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_TIMEZONE = 'UTC'

# Execute fold experiments synchronously (no Celery worker needed).
# Set CELERY_TASK_ALWAYS_EAGER=False and start a worker to fan folds out.
CELERY_TASK_ALWAYS_EAGER = env('CELERY_TASK_ALWAYS_EAGER', 'True') == 'True'
CELERY_TASK_EAGER_PROPAGATES = True


# ========== ERROR TRACKING (optional) ==========
SENTRY_DSN = env('SENTRY_DSN', '')
if SENTRY_DSN:
    import sentry_sdk
    from sentry_sdk.integrations.celery import CeleryIntegration
    from sentry_sdk.integrations.django import DjangoIntegration

    sentry_sdk.init(
        dsn=SENTRY_DSN,
        integrations=[DjangoIntegration(), CeleryIntegration()],
        traces_sample_rate=0.0,
    )


# ============================================================================
# 🔍 LOGGING CONFIGURATION
# ============================================================================
LOGS_DIR = os.path.join(BASE_DIR, 'logs')
if not os.path.exists(LOGS_DIR):
    os.makedirs(LOGS_DIR, exist_ok=True)

LOG_LEVEL = env('FEWSHOT_LOG_LEVEL', 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '[{levelname}] {asctime} | {name} | {funcName}:{lineno}d | {message}',
            'style': '{',
            'datefmt': '%Y-%m-%d %H:%M:%S',
        },
        'simple': {
            'format': '[{levelname}] {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'level': LOG_LEVEL,
            'formatter': 'verbose',
            'stream': 'ext://sys.stderr',
        },
        'file': {
            'class': 'logging.handlers.RotatingFileHandler',
            'level': 'INFO',
            'formatter': 'verbose',
            'filename': os.path.join(LOGS_DIR, 'fewshotseg.log'),
            'maxBytes': 10485760,  # 10MB
            'backupCount': 5,
        },
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': 'WARNING',
            'propagate': False,
        },
        # ===== NUMERICS - ops, gradient checks =====
        'autograd': {
            'handlers': ['console', 'file'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
        # ===== DATA - phantoms, FSV1 files, episodes =====
        'volumes': {
            'handlers': ['console', 'file'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
        'episodes': {
            'handlers': ['console', 'file'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
        # ===== MODEL + TRAINING =====
        'segmentation': {
            'handlers': ['console', 'file'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
        'evaluation': {
            'handlers': ['console', 'file'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
        'experiments': {
            'handlers': ['console', 'file'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
        # ===== COMMAND FAILURES =====
        'utils': {
            'handlers': ['console', 'file'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
        # ===== CELERY LOGGING - Track fold tasks =====
        'celery': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': False,
        },
    },
}
