import sys
import logging
import warnings
import datetime as dt

import cli
import config
from model import OffloadingError

# Ignore warnings
warnings.filterwarnings("ignore")

# Load config file
cfg = config.load_config()

# Get datetime
today = dt.datetime.utcnow().strftime('%Y-%m-%dT%H%M%S')

# Create logger; the handler sits on the root logger so library modules are captured too
logger = logging.getLogger(__name__)
root = logging.getLogger()
root.setLevel(cfg['logging']['level'])

# Create a file handler
handler = logging.FileHandler(config.log_path('experiments', today, cfg))
handler.setLevel(cfg['logging']['level'])

# Create a logging format
formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
handler.setFormatter(formatter)

# Add the handlers to the logger
root.addHandler(handler)


def main(argv=None):
    """
    Main entry point for the code
    :return: exit code
    """

    args = cli.experiment_parser().parse_args(argv)
    logger.info('date_run for this experiment (UTC): {}'.format(today))

    try:
        spec, backend = extract(args)
        rows = model(spec, backend, args.jobs or cfg['experiment']['jobs'])
        table = transform(spec, rows)
        load(spec, table, backend)
    except cli.UsageError as e:
        logger.error('Usage error: {}'.format(e))
        print('error: {}'.format(e), file=sys.stderr)
        return cli.EXIT_USAGE
    except (OffloadingError, OSError) as e:
        logger.exception('Experiment failed')
        print('error: {}'.format(e), file=sys.stderr)
        return cli.EXIT_FAILURE
    return cli.EXIT_OK


def extract(args):
    """
    Read the experiment spec and apply command-line overrides
    :param args: parsed arguments
    :return: (ExperimentSpec, backend name)
    """

    logger.info('Begin Extract')

    global cfg
    if args.config:
        cfg = config.load_config(args.config)
    spec = cli.apply_overrides(cli.load_spec(args.spec, cfg), args)
    backend = cli.backend_from(args, cfg)

    logger.info('Spec {}: kind {}, {} sweep points, {} trials, seed {}, backend {}'.format(
        args.spec, spec.kind, len(spec.sweep), spec.trials, spec.seed, backend))
    logger.info('Extract completed successfully')

    return spec, backend


def model(spec, backend, jobs):
    """
    Solve every (sweep point, trial, scheme)
    :return: per-trial rows
    """

    logger.info('Begin modelling')
    rows = cli.solve_experiment(spec, backend, cfg['solver']['tolerance'], cfg['solver']['max_iterations'], jobs)
    logger.info('Modelling completed successfully: {} solves'.format(len(rows)))

    return rows


def transform(spec, rows):
    """
    Aggregate trials into the experiment table
    :return: pandas DataFrame
    """

    logger.info('Begin data transformation')
    table = cli.aggregate(spec, rows)
    logger.info('Data transformation completed successfully')

    return table


def load(spec, table, backend):
    """
    Write the CSV with its metadata header
    :param table: dataframe
    :return: path
    """

    logger.info('Begin data load')
    path = cli.save_experiment(spec, table, backend, cfg['solver']['tolerance'], cfg['solver']['max_iterations'])
    logger.info('Data load completed successfully')

    return path


# Main section
if __name__ == '__main__':
    sys.exit(main())
