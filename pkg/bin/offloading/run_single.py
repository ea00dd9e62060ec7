import sys
import logging
import warnings
import datetime as dt

import cli
import conic
import config
import oracle
from sca import ScaSettings
from model import OffloadingError

# Ignore warnings
warnings.filterwarnings("ignore")

# Load config file
cfg = config.load_config()

# Get datetime
today = dt.datetime.utcnow().strftime('%Y-%m-%dT%H%M%S')

# Create logger
logger = logging.getLogger(__name__)
root = logging.getLogger()
root.setLevel(cfg['logging']['level'])

# Create a file handler
handler = logging.FileHandler(config.log_path('single', today, cfg))
handler.setLevel(cfg['logging']['level'])

# Create a logging format
formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
handler.setFormatter(formatter)

# Add the handlers to the logger
root.addHandler(handler)


def main(argv=None):
    """
    Solve one scenario file, print the schedule and its audit
    :return: exit code
    """

    args = cli.single_parser().parse_args(argv)
    logger.info('date_run for this solve (UTC): {}'.format(today))

    settings_cfg = config.load_config(args.config) if args.config else cfg
    try:
        backend = conic.make_backend(cli.backend_from(args, settings_cfg),
                                     tolerance=settings_cfg['solver']['tolerance'],
                                     max_iterations=settings_cfg['solver']['max_iterations'])
        grid = oracle.GridSpec.from_dict(settings_cfg['oracle']) if args.oracle else None
        status = cli.run_single(args.scenario, args.scheme,
                                settings=ScaSettings.from_dict(settings_cfg['sca']),
                                backend=backend,
                                out=args.out,
                                dump=args.dump_subproblem,
                                grid=grid)
    except cli.UsageError as e:
        logger.error('Usage error: {}'.format(e))
        print('error: {}'.format(e), file=sys.stderr)
        return cli.EXIT_USAGE
    except (OffloadingError, OSError) as e:
        logger.exception('Solve failed')
        print('error: {}'.format(e), file=sys.stderr)
        return cli.EXIT_FAILURE

    logger.info('Solve of {} finished with exit code {}'.format(args.scenario, status))
    return status


# Main section
if __name__ == '__main__':
    sys.exit(main())
