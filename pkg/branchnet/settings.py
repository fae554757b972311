"""
Django settings for the branchnet project.

The numerical toolkit lives in the ``branching`` app; everything it needs to
know about defaults is collected in the ``BRANCHING`` dict at the bottom of
this file.
"""

from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = 'django-insecure-branchnet-local-inspection-only'

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = True

ALLOWED_HOSTS = ['localhost', '127.0.0.1']


# Application definition

INSTALLED_APPS = [
    'rest_framework',
    'corsheaders',
    'branching',
]

MIDDLEWARE = [
    'corsheaders.middleware.CorsMiddleware',
    'django.middleware.security.SecurityMiddleware',
    'django.middleware.common.CommonMiddleware',
]

ROOT_URLCONF = 'branchnet.urls'

WSGI_APPLICATION = 'branchnet.wsgi.application'


# Runs are tracked in a JSON index, there is no database.
DATABASES = {}


LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# CORS settings for a local dashboard reading run artifacts
CORS_ALLOWED_ORIGINS = [
    "http://localhost:3000",
    "http://127.0.0.1:3000",
]

CORS_ALLOW_METHODS = ['GET', 'DELETE', 'OPTIONS']

# REST Framework settings
REST_FRAMEWORK = {
    'DEFAULT_RENDERER_CLASSES': [
        'rest_framework.renderers.JSONRenderer',
    ],
    'DEFAULT_PARSER_CLASSES': [
        'rest_framework.parsers.JSONParser',
    ],
    'DEFAULT_AUTHENTICATION_CLASSES': [],
    'DEFAULT_PERMISSION_CLASSES': [],
    'UNAUTHENTICATED_USER': None,
}


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
            'formatter': 'plain',
        },
    },
    'loggers': {
        'branching': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': False,
        },
    },
}


# Toolkit defaults. They are echoed into every artifact so runs stay
# comparable.
BRANCHING = {
    'TRAIN_DEFAULTS': {
        'omega': 16,
        'alpha': 2.0,
        'l0': 1.0,
        'ema_decay': 0.99,
        'lr': 0.05,
        'momentum': 0.9,
        'batch_size': 64,
        'iters_per_round': 300,
        'final_iters': 2000,
        'val_fraction': 0.1,
        'seed': 0,
    },
    'DATA_DEFAULTS': {
        'task_count': 6,
        'group_count': 2,
        'input_shape': (1, 16, 16),
        'samples': 8000,
        'label_noise': 0.05,
        'task_spread': 0.2,
        'hidden_width': 32,
        'feature_width': 8,
        'seed': 0,
    },
    # Conv widths of the image template (a VGG-like inverse pyramid) and the
    # dense widths shared by both templates.
    'IMAGE_TEMPLATE': {
        'conv_widths': (64, 128),
        'dense_widths': (512, 512),
    },
    'FLAT_TEMPLATE': {
        'dense_widths': (512, 512),
    },
    'RUN_INDEX': BASE_DIR / 'runs.json',
}
