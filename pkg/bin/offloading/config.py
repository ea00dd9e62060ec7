import os
import copy
import logging

import yaml


logger = logging.getLogger(__name__)

ROOT_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..'))
CONFIG_PATH = os.path.join(ROOT_DIR, 'config.yml')
BACKEND_ENV = 'NOMA_MEC_BACKEND'

DEFAULTS = {
    'channel': {
        'reference_snr_db': 8.0,
        'reference_distance': 1.0,
        'pathloss_exponent': 4.0,
        'noise_power_db': -50.0,
        'distances': None,
        'D1': 2.0,
        'Delta': 0.25,
        'E_th': 5.0,
        'P_t_db': 5.0,
        'seed': 0,
    },
    'sca': {
        'max_iterations': 500,
        'rel_tolerance': 1e-5,
        'abs_tolerance': 1e-7,
        'proximal_weight': None,
        'compact_first_slot': True,
        'start': 'interior',
    },
    'solver': {
        'backend': 'clarabel',
        'tolerance': 1e-8,
        'max_iterations': None,
    },
    'oracle': {
        'power_step': 0.02,
        'time_step': 0.01,
        'refinement_rounds': 2,
        'max_points': 4_000_000,
    },
    'experiment': {
        'trials': 20,
        'jobs': 1,
    },
    'logging': {
        'level': 'INFO',
        'directory': 'logs',
    },
}


def _merge(defaults, loaded, path=''):
    merged = copy.deepcopy(defaults)
    for key, value in (loaded or {}).items():
        name = '{}.{}'.format(path, key) if path else key
        if key not in defaults:
            logger.warning('Ignoring unknown config key {}'.format(name))
        elif isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                logger.warning('Ignoring config key {}: expected a mapping'.format(name))
                continue
            merged[key] = _merge(defaults[key], value, name)
        else:
            merged[key] = value
    return merged


def load_config(path=None):
    """
    Load the YAML configuration
    :param path: config file; defaults to config.yml at the repository root
    :return: dict with the sections of DEFAULTS
    """
    path = path or CONFIG_PATH
    if not os.path.exists(path):
        logger.info('No config file at {}, using defaults'.format(path))
        return copy.deepcopy(DEFAULTS)

    with open(path, 'r') as infile:
        cfg = yaml.safe_load(infile)
    if cfg is not None and not isinstance(cfg, dict):
        raise ValueError('{} must hold a mapping at the top level'.format(path))
    return _merge(DEFAULTS, cfg)


def resolve_backend(flag=None, cfg=None):
    """
    Backend name by precedence: command-line flag, environment variable, config file, clarabel
    """
    if flag:
        return flag
    if os.environ.get(BACKEND_ENV):
        return os.environ[BACKEND_ENV]
    if cfg and cfg.get('solver', {}).get('backend'):
        return cfg['solver']['backend']
    return 'clarabel'


def log_path(area, stamp, cfg=None):
    """
    File the entry point named `area` logs to, creating the directory if needed
    :return: absolute path logs/<area>/<stamp>.log
    """
    directory = (cfg or DEFAULTS)['logging']['directory']
    if not os.path.isabs(directory):
        directory = os.path.join(ROOT_DIR, directory)
    directory = os.path.join(directory, area)
    os.makedirs(directory, exist_ok=True)
    return os.path.join(directory, '{}.log'.format(stamp))
