"""
Django settings for the specmatch project.

specmatch uses Django for its management-command CLI, settings, logging setup,
config validation (forms) and test runner. There is no database and no web
surface.
"""

import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Required by Django even though nothing here signs anything.
SECRET_KEY = os.getenv('SECRET_KEY', 'specmatch-insecure-local-key')

DEBUG = os.getenv('DEBUG', 'False') == 'True'

ALLOWED_HOSTS = []

# Application definition

INSTALLED_APPS = [
    'meshes',
    'spectral',
    'autodiff',
    'features',
    'contrastive',
    'fmaps',
    'training',
    'evaluation',
    'methodmap',
]

# No database: every command works on files.
DATABASES = {}

USE_I18N = False

USE_TZ = True

TIME_ZONE = 'UTC'


# Numerical runtime

# Cap for the thread pools used by Dijkstra sources, NN search chunks,
# bench repetitions and the opt-in parallel training mode.
SPECMATCH_THREADS = max(1, int(os.getenv('SPECMATCH_THREADS', '1')))

# Precomputed spectra live here unless a run config says otherwise.
SPECMATCH_CACHE_DIR = Path(os.getenv('SPECMATCH_CACHE_DIR', str(BASE_DIR / 'cache')))

SPECMATCH_LOG_LEVEL = os.getenv('SPECMATCH_LOG_LEVEL', 'INFO').upper()

# Desk-scale acceptance runs in the test suite (tens of minutes on one core).
SPECMATCH_SLOW_TESTS = os.getenv('SPECMATCH_SLOW_TESTS', '') not in ('', '0')

# Defaults for every run-config section. Keys here are the full schema:
# config files may only use these keys (train.epochs has no default).
SPECMATCH_DEFAULTS = {
    'spectral': {
        'k': 200,
        'n_hks': 16,
        'hks_scaling': 'standardize',
        'eig_seed': 0,
    },
    'net': {
        'in_dim': 16,
        'width': 128,
        'n_blocks': 4,
        't_min': 1e-3,
        't_max': 1e-1,
    },
    'loss': {
        'p_c': 30,
        'p_s': 30,
        'tau_c': 1.0,
        'tau_s': 1.0,
        'theta_cross': 1.0,
        'theta_self': 0.1,
        'theta_align': 1.0,
        'alpha': 0.07,
        'negative_sampling': 'none',
        'n_negatives': None,
        'tie_p': False,
    },
    'baseline': {
        'lambda_reg': 1e-3,
        'theta_bi': 1.0,
        'theta_or': 1.0,
    },
    'train': {
        'learning_rate': 1e-3,
        'beta1': 0.9,
        'beta2': 0.999,
        'eps': 1e-8,
        'epochs': None,
        'pair_policy': 'all',
        'pairs_per_epoch': None,
        'max_iterations': None,
        'seed': 0,
        'disable_cross': False,
        'disable_self': False,
        'baseline_losses_mode': False,
        'checkpoint_every': 1,
        'grad_clip': 10.0,
        'parallel_pairs': 1,
    },
    'paths': {
        'manifest': None,
        'cache_dir': None,
        'out_dir': None,
    },
    'sweep': {
        'p_values': [10, 20, 30, 40, 50],
    },
}

# Logging configuration - everything from the apps goes to the console
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
        app: {
            'handlers': ['console'],
            'level': SPECMATCH_LOG_LEVEL,
            'propagate': False,
        }
        for app in INSTALLED_APPS + ['specmatch']
    },
}
