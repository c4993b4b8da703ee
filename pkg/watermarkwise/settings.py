"""
Django settings for the watermarkwise project.

Values that differ between machines (secret key, broker, log level,
output directory) are read from the environment, optionally through a
``.env`` file in the project root.
"""

import os
from dotenv import load_dotenv
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv()

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv('SECRET_KEY', 'watermarkwise-insecure-development-key')

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = os.getenv('DEBUG', 'False') == 'True'

ALLOWED_HOSTS = ['localhost', '127.0.0.1']

# Other config
PROJECT_NAME = 'WatermarkWise'
API_VERSION = 'v1.0.0'

# Application definition

INSTALLED_APPS = [
    'django.contrib.admin',
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'django.contrib.sessions',
    'django.contrib.messages',
    'django.contrib.staticfiles',

    'plant_management',
    'watermark_design',
    'replay_detection',
    'online_learning',
    'experiments.apps.ExperimentsConfig',
    'api',

    # Third party
    'rest_framework',
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.contrib.sessions.middleware.SessionMiddleware',
    'django.middleware.common.CommonMiddleware',
    'django.middleware.csrf.CsrfViewMiddleware',
    'django.contrib.auth.middleware.AuthenticationMiddleware',
    'django.contrib.messages.middleware.MessageMiddleware',
    'django.middleware.clickjacking.XFrameOptionsMiddleware',
]

ROOT_URLCONF = 'watermarkwise.urls'

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'context_processors': [
                'django.template.context_processors.debug',
                'django.template.context_processors.request',
                'django.contrib.auth.context_processors.auth',
                'django.contrib.messages.context_processors.messages',
            ],
        },
    },
]

WSGI_APPLICATION = 'watermarkwise.wsgi.application'


# Database: experiment-run bookkeeping only.

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.getenv('DATABASE_PATH', BASE_DIR / 'db.sqlite3'),
    }
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True


# Static files (admin only)

STATIC_URL = 'static/'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# The API has no users: design requests and run listings are open.
REST_FRAMEWORK = {
    'DEFAULT_AUTHENTICATION_CLASSES': [],
    'DEFAULT_PERMISSION_CLASSES': [
        'rest_framework.permissions.AllowAny',
    ],
    'UNAUTHENTICATED_USER': None,
}

# Celery Configuration
CELERY_BROKER_URL = os.getenv('CELERY_BROKER_URL', 'redis://localhost:6379/0')
CELERY_RESULT_BACKEND = os.getenv('CELERY_RESULT_BACKEND', 'redis://localhost:6379/0')
# Without a worker the runs execute in-process.
CELERY_TASK_ALWAYS_EAGER = os.getenv('CELERY_TASK_ALWAYS_EAGER', 'True') == 'True'
CELERY_TASK_EAGER_PROPAGATES = True
CELERY_TIMEZONE = 'UTC'

# Numerical defaults for watermark design, learning and experiments.
WATERMARK = {
    'DEFAULT_BETA': float(os.getenv('WATERMARK_BETA', 1 / 3)),
    'DEFAULT_DELTA_FRACTION': 0.1,
    'LARGE_MODEL_DELTA_FRACTION': 0.05,
    'LARGE_MODEL_SIZE': 64,
    'DEFAULT_TARGET_FAR': 0.05,
    'CALIBRATION_SAMPLES': int(os.getenv('WATERMARK_CALIBRATION_SAMPLES', 10000)),
    'DEFAULT_FIT_EVERY': 1,
    'DEFAULT_BURN_IN': 1000,
    'SLOPE_START': 1000,
    'OUTPUT_DIR': os.getenv('WATERMARK_OUTPUT_DIR', str(BASE_DIR / 'runs')),
}

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': os.getenv('LOG_LEVEL', 'INFO'),
    },
}

# Long statistical tests (full-length learning runs) are opt-in.
WATERMARK_SLOW_TESTS = os.getenv('WATERMARK_SLOW_TESTS', 'False') == 'True'
