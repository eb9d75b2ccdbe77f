"""
Django settings for the coda_mediation project.

The project has no web surface: Django provides configuration, the
management-command front end, logging and the test runner.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/4.2/ref/settings/
"""

from dotenv import load_dotenv
import os

# Build paths inside the project like this: os.path.join(BASE_DIR, ...)
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

load_dotenv(os.path.join(BASE_DIR, '.env'))

SECRET_KEY = os.getenv("SECRET_KEY", "coda-mediation-batch-only")

DEBUG = os.getenv("DEBUG", "False").lower() in ("true", "1", "t")

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'coda_mediation',
]

# Batch analysis only, nothing is persisted
DATABASES = {}

USE_TZ = True
TIME_ZONE = 'UTC'


# Analysis defaults

CODA_MEDIATION = {
    'ZERO_REPLACEMENT': float(os.getenv("CODA_MEDIATION_ZERO_REPLACEMENT", "0.5")),
    'CI_LEVEL': float(os.getenv("CODA_MEDIATION_CI_LEVEL", "0.90")),
    'SHARED_GAMMA': os.getenv("CODA_MEDIATION_SHARED_GAMMA", "False").lower() in ("true", "1", "t"),
    'MC_REPS': int(os.getenv("CODA_MEDIATION_MC_REPS", "100000")),
    'REPLICATES': int(os.getenv("CODA_MEDIATION_REPLICATES", "200")),
    'COHORT_SIZE': int(os.getenv("CODA_MEDIATION_COHORT_SIZE", "1000")),
    'SEED': int(os.getenv("CODA_MEDIATION_SEED", "42")),
    'THREADS': int(os.getenv("CODA_MEDIATION_THREADS", "1")),
    'PRESET_DIR': os.path.join(BASE_DIR, 'coda_mediation', 'presets'),
}


# Logging: stdout carries data, everything else goes to stderr

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'stream': 'ext://sys.stderr',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'coda_mediation': {
            'handlers': ['console'],
            'level': os.getenv("CODA_MEDIATION_LOG_LEVEL", "INFO"),
            'propagate': False,
        },
    },
}
