"""
Django settings for the placenta segmentation project.

The project is driven through management commands (``phantom``, ``pretrain``,
``adapt``, ``evaluate``, ``report``); there is no web front end. Settings hold
the framework configuration plus ``RUN_CONFIG_DEFAULTS``, the defaults every
run configuration is merged over.

For the full list of framework settings and their values, see
https://docs.djangoproject.com/en/5.0/ref/settings/
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get('PLACENTA_SECRET_KEY', 'placenta-local-only-not-a-secret')

DEBUG = False

ALLOWED_HOSTS = []

TOOL_VERSION = '0.3.0'


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    'rest_framework',
    'phantom',
    'dataprep',
    'networks',
    'losses',
    'mae_trainer',
    'mpl_trainer',
    'metrics',
    'experiments',
]

MIDDLEWARE = []


# Run records (experiments app)

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.environ.get('PLACENTA_DB', BASE_DIR / 'db.sqlite3'),
    }
}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


REST_FRAMEWORK = {
    'DEFAULT_RENDERER_CLASSES': [
        'rest_framework.renderers.JSONRenderer',
    ],
    'UNAUTHENTICATED_USER': None,
}


DATASETS_DIR = BASE_DIR / 'datasets'
RUNS_DIR = BASE_DIR / 'runs'

# Prefix for environment overrides of run-config keys:
# PLACENTA_<SECTION>__<KEY>=<yaml literal>
CONFIG_ENV_PREFIX = 'PLACENTA_'

RUN_CONFIG_DEFAULTS = {
    'phantom': {
        'subjects': 30,
        'slices_per_subject': 2,
        'height': 256,
        'width': 256,
        'pixel_spacing': [1.0, 1.0],  # mm, isotropic phantom
        # 8 echoes, uniform spacing over 3.15-37.45 ms (spacing assumed)
        'te_ms': [3.15, 8.05, 12.95, 17.85, 22.75, 27.65, 32.55, 37.45],
        'noise_sigma': 4.0,
        'source_echo': 1,
        'target_echoes': [2, 6],
        'mae_echoes': None,  # None: 5 echoes drawn from the remaining pool
        'mae_echo_count': 5,
        'test_subjects': 5,
        'mae_subjects': 10,
        'validation_fraction': 0.1,  # of labeled source subjects
        'workers': 1,
    },
    'dataprep': {
        'crop_fraction': 0.5,
        'view_size': 256,
        'augment_prob': 0.35,
        'jitter_gain': 0.1,
        'jitter_offset': 0.05,
        'percentile': 99.5,
    },
    'networks': {
        'depth': 8,
        'embed_dim': 512,
        'num_heads': 8,
        'patch_size': 16,
        'mlp_ratio': 4.0,
        'decoder_dim': 256,
        'decoder_depth': 2,
        'aspp_channels': 256,
        'aspp_dilations': [6, 12, 18],
        'num_classes': 2,
    },
    'loss': {
        'beta': 0.5,  # source-vs-target supervision ratio
        'gamma_glc': 1.0,
        'delta_glc': 0.1,
        'gamma_sc_mae': 0.4,
        'gamma_sc_mpl': 0.4,
        'lambda_enc': 0.5,
        'lambda_dec': 0.5,
        'epsilon': 1e-8,
        'dice_smooth': 1.0,
        'paper_literal_cosine': False,
    },
    # Published pretraining recipe, except max_steps and the keys after gamma_sc.
    'mae': {
        'epochs': 300,
        'max_steps': None,  # caps epochs * steps_per_epoch when set
        'lr': 2e-4,
        'weight_decay': 0.05,
        'beta1': 0.9,
        'beta2': 0.95,
        'batch_size': 4,  # echo pairs per step; published "batch size 4" read as pairs
        'mask_ratio': 0.70,
        'gamma_sc': 0.4,
        'cos_weight': 0.0,  # local-global alignment during pretraining, off unless asked for
        'lr_schedule': 'constant',  # no schedule published
        'augment': True,
        'checkpoint_every': 500,
        'log_every': 10,
    },
    # Published adaptation recipe, except max_steps and the keys after ema_stages.
    'mpl': {
        'epochs': 150,  # warm-up included
        'warmup_epochs': 50,
        'patience': 75,
        'max_steps': None,
        'lr': 1e-4,
        'weight_decay': 0.01,
        'batch_size': 1,
        'mask_ratio': 0.70,
        'target_echo': 6,  # the harder of the two published target-echo scenarios
        'ema_stages': [[1000, 0.99], [2000, 0.999], [None, 0.9999]],
        'sc_decoder_source': 'segmentation',
        'augment': True,
        'panel_every': 10,
        'log_every': 10,
    },
    'evaluation': {
        'nsd_tolerance': 1.0,  # voxels
        'hd_percentile': None,  # None: exact (max) Hausdorff distance
        'connectivity': 4,
        'echoes': None,  # None: every echo in the test split
    },
    'seeds': {
        'phantom': 7,
        'data': 1,
        'model': 2,
    },
    'output': {
        'dataset_dir': str(DATASETS_DIR / 'phantom'),
        'runs_dir': str(RUNS_DIR),
        'deterministic': False,
        'device': 'auto',
    },
}


LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {message}',
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
        'level': 'INFO',
    },
    'loggers': {
        name: {'level': os.environ.get('PLACENTA_LOG_LEVEL', 'INFO')}
        for name in (
            'phantom', 'dataprep', 'networks', 'losses',
            'mae_trainer', 'mpl_trainer', 'metrics', 'experiments',
        )
    },
}
