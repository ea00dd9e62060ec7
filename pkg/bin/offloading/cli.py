import os
import sys
import json
import logging
import argparse
from dataclasses import dataclass, field, asdict
from concurrent.futures import ProcessPoolExecutor

import yaml
import numpy as np
import pandas as pd
import cvxpy as cp

import conic
import model
import config
import oracle
import channel
from sca import SOLVERS, ScaSettings, Termination
from bounds import ExpansionPoint
from channel import ChannelConfig
from model import OffloadingError, Scenario


logger = logging.getLogger(__name__)

BUILD_ID = 'noma-mec-offloading 0.1.0'
KINDS = ('convergence', 'vs_energy', 'vs_users', 'vs_delta', 'single')
SCHEMES = ('noma', 'oma')

# Key columns of each experiment, in CSV order
KEY_COLUMNS = {
    'vs_energy': ['E_th', 'P_t_db'],
    'vs_users': ['M', 'E_th', 'P_t_db'],
    'vs_delta': ['Delta', 'E_th', 'P_t_db', 'D1'],
    'single': ['M', 'E_th', 'P_t_db'],
    'convergence': ['E_th', 'P_t_db'],
}

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(OffloadingError):
    """Bad experiment spec, scenario file or command-line flag"""


@dataclass
class ExperimentSpec:
    """
    One experiment. The meaning of sweep and configs depends on kind:
      convergence: sweep of [E_th, P_t_db] pairs, one channel realization of `users` users
      vs_energy:   sweep of E_th values, configs of P_t_db values
      vs_users:    sweep of user counts, configs of [E_th, P_t_db] pairs
      vs_delta:    sweep of Delta values, configs of [E_th, P_t_db, D1] triples
      single:      sweep of [E_th, P_t_db] pairs, one CSV row per trial
    """
    kind: str
    sweep: list
    configs: list = None
    users: int = 4
    trials: int = 20
    seed: int = 0
    schemes: tuple = SCHEMES
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    sca: ScaSettings = field(default_factory=ScaSettings)
    output: str = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError('unknown experiment kind {!r}; choose from {}'.format(self.kind, ', '.join(KINDS)))
        if not self.sweep:
            raise UsageError('sweep must list at least one value')
        if int(self.trials) < 1:
            raise UsageError('trials must be at least 1')
        if int(self.users) < 1:
            raise UsageError('users must be at least 1')
        if int(self.seed) < 0:
            raise UsageError('seed must be nonnegative')
        self.schemes = tuple(self.schemes)
        if not self.schemes or any(s not in SCHEMES for s in self.schemes):
            raise UsageError('schemes must be drawn from {}'.format(', '.join(SCHEMES)))
        if self.configs is None:
            self.configs = self._default_configs()
        self._check_shapes()

    def _default_configs(self):
        c = self.channel
        return {
            'vs_energy': [c.P_t_db],
            'vs_users': [[c.E_th, c.P_t_db]],
            'vs_delta': [[c.E_th, c.P_t_db, c.D1]],
        }.get(self.kind, [])

    def _check_shapes(self):
        def width(values, n, label):
            for v in values:
                if not isinstance(v, (list, tuple)) or len(v) != n:
                    raise UsageError('{} entries must have {} values, got {!r}'.format(label, n, v))

        if self.kind in ('convergence', 'single'):
            width(self.sweep, 2, 'sweep')
        elif self.kind == 'vs_users':
            if any(int(m) != m or m < 1 for m in self.sweep):
                raise UsageError('vs_users sweep must list positive user counts')
            width(self.configs, 2, 'configs')
        elif self.kind == 'vs_delta':
            width(self.configs, 3, 'configs')
        if self.kind in ('vs_energy', 'vs_users', 'vs_delta') and not self.configs:
            raise UsageError('configs must list at least one entry')

    @classmethod
    def from_dict(cls, data, cfg=None):
        """
        Build a spec from a parsed YAML/JSON document merged over config.yml defaults
        :param data: dict
        :param cfg: loaded configuration (config.load_config)
        :return: ExperimentSpec
        """
        cfg = cfg or config.DEFAULTS
        if not isinstance(data, dict):
            raise UsageError('experiment spec must be a mapping')
        known = {'kind', 'sweep', 'configs', 'users', 'trials', 'seed', 'schemes', 'channel', 'sca', 'output'}
        unknown = set(data) - known
        if unknown:
            raise UsageError('unknown spec field(s): {}'.format(', '.join(sorted(unknown))))
        if 'kind' not in data or 'sweep' not in data:
            raise UsageError('experiment spec needs kind and sweep')
        try:
            channel_cfg = ChannelConfig.from_dict({**cfg['channel'], **(data.get('channel') or {})})
            sca_settings = ScaSettings.from_dict({**cfg['sca'], **(data.get('sca') or {})})
        except (TypeError, ValueError) as e:
            raise UsageError(str(e))
        return cls(kind=data['kind'],
                   sweep=list(data['sweep']),
                   configs=data.get('configs'),
                   users=data.get('users', 4),
                   trials=data.get('trials', cfg['experiment']['trials']),
                   seed=data.get('seed', channel_cfg.seed),
                   schemes=data.get('schemes', SCHEMES),
                   channel=channel_cfg,
                   sca=sca_settings,
                   output=data.get('output'))

    def to_dict(self):
        data = asdict(self)
        data['channel'] = self.channel.to_dict()
        data['sca'] = self.sca.to_dict()
        data['schemes'] = list(self.schemes)
        return data


def load_spec(path, cfg=None):
    """
    Parse an experiment spec file (YAML or JSON)
    :raises UsageError: with file:line:column for syntax errors
    """
    try:
        with open(path, 'r') as infile:
            data = yaml.safe_load(infile)
    except OSError as e:
        raise UsageError('cannot read spec {}: {}'.format(path, e.strerror))
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        where = '{}:{}:{}'.format(path, mark.line + 1, mark.column + 1) if mark else path
        raise UsageError('{}: {}'.format(where, getattr(e, 'problem', None) or e))
    return ExperimentSpec.from_dict(data, cfg)


@dataclass(frozen=True)
class WorkUnit:
    """One (sweep point, trial, scheme) solve, picklable for worker processes"""
    key: tuple
    trial: int
    scheme: str
    users: int
    channel: dict
    sca: dict
    seed: int
    backend: str
    tolerance: float
    max_iterations: int = None
    trajectory: bool = False


def _points(spec):
    """
    Expand the sweep into (key, users, channel overrides) triples in sweep order
    """
    points = []
    if spec.kind in ('convergence', 'single'):
        for E_th, P_t_db in spec.sweep:
            key = (E_th, P_t_db) if spec.kind == 'convergence' else (spec.users, E_th, P_t_db)
            points.append((key, spec.users, {'E_th': E_th, 'P_t_db': P_t_db}))
    elif spec.kind == 'vs_energy':
        for P_t_db in spec.configs:
            for E_th in spec.sweep:
                points.append(((E_th, P_t_db), spec.users, {'E_th': E_th, 'P_t_db': P_t_db}))
    elif spec.kind == 'vs_users':
        for E_th, P_t_db in spec.configs:
            for M in spec.sweep:
                points.append(((int(M), E_th, P_t_db), int(M), {'E_th': E_th, 'P_t_db': P_t_db}))
    else:
        for E_th, P_t_db, D1 in spec.configs:
            for Delta in spec.sweep:
                points.append(((Delta, E_th, P_t_db, D1), spec.users,
                               {'E_th': E_th, 'P_t_db': P_t_db, 'D1': D1, 'Delta': Delta}))
    return points


def plan_units(spec, backend='clarabel', tolerance=conic.DEFAULT_SOLVER_TOLERANCE, max_iterations=None):
    """
    Every solve the experiment needs. A convergence experiment uses one realization.
    :param max_iterations: per-solve iteration cap handed to the conic backend, None for its default
    :return: list of WorkUnit
    """
    trials = 1 if spec.kind == 'convergence' else int(spec.trials)
    units = []
    for key, users, overrides in _points(spec):
        channel_dict = spec.channel.with_overrides(**overrides).to_dict()
        for trial in range(trials):
            for scheme in spec.schemes:
                units.append(WorkUnit(key=key, trial=trial, scheme=scheme, users=users,
                                      channel=channel_dict, sca=spec.sca.to_dict(), seed=int(spec.seed),
                                      backend=backend, tolerance=tolerance, max_iterations=max_iterations,
                                      trajectory=spec.kind == 'convergence'))
    return units


def run_unit(unit):
    """
    Draw the trial's channel and solve one scheme; failures are reported, not raised
    :param unit: WorkUnit
    :return: dict row
    """
    row = {'key': unit.key, 'trial': unit.trial, 'scheme': unit.scheme, 'failed': False,
           'objective_bits': np.nan, 'iterations': 0, 'termination': '', 'trajectory_bits': []}
    try:
        channel_cfg = ChannelConfig.from_dict(unit.channel)
        scenario = channel.draw_scenario(channel_cfg, unit.users, channel.trial_rng(unit.seed, unit.trial))
        backend = conic.make_backend(unit.backend, tolerance=unit.tolerance, max_iterations=unit.max_iterations)
        report = SOLVERS[unit.scheme](scenario, ScaSettings.from_dict(unit.sca), backend)
    except (OffloadingError, ValueError, ArithmeticError) as e:
        logger.warning('Trial {} {} at {} failed: {}'.format(unit.trial, unit.scheme, unit.key, e))
        row.update(failed=True, termination=Termination.SOLVER_FAILURE.value)
        return row

    row.update(objective_bits=model.nats_to_bits(report.objective),
               iterations=report.iterations,
               termination=report.termination.value,
               failed=not report.succeeded)
    if unit.trajectory:
        row['trajectory_bits'] = [model.nats_to_bits(v) for v in report.objective_trajectory]
    if row['failed']:
        logger.warning('Trial {} {} at {} excluded: {}'.format(unit.trial, unit.scheme, unit.key, report.message))
    return row


def run_units(units, jobs=1):
    """
    Solve every unit, in worker processes when jobs > 1
    :return: rows sorted by sweep key, trial and scheme
    """
    if jobs > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            rows = list(executor.map(run_unit, units, chunksize=max(1, len(units) // (4 * jobs))))
    else:
        rows = [run_unit(u) for u in units]
    return sorted(rows, key=lambda r: (r['key'], r['trial'], SCHEMES.index(r['scheme'])))


def aggregate(spec, rows):
    """
    Turn per-trial rows into the experiment's CSV table
    :param spec: ExperimentSpec
    :param rows: output of run_units
    :return: pandas DataFrame
    """
    keys = KEY_COLUMNS[spec.kind]

    if spec.kind == 'convergence':
        records = []
        for row in rows:
            for n, value in enumerate(row['trajectory_bits']):
                records.append(dict(zip(keys, row['key']), iteration=n, scheme=row['scheme'], objective_bits=value))
        return pd.DataFrame(records, columns=['iteration', 'scheme'] + keys + ['objective_bits'])

    frame = pd.DataFrame([dict(zip(keys, r['key']), trial=r['trial'], scheme=r['scheme'], failed=r['failed'],
                               objective_bits=r['objective_bits'], iterations=r['iterations'],
                               termination=r['termination']) for r in rows])

    if spec.kind == 'single':
        return frame[['trial', 'scheme'] + keys + ['objective_bits', 'iterations', 'termination']]

    # Failed trials keep their row in the count but not in the mean
    frame['objective_bits'] = frame['objective_bits'].where(~frame['failed'])
    table = frame.groupby(keys + ['scheme'], sort=False).agg(
        mean_bits=('objective_bits', 'mean'),
        stderr_bits=('objective_bits', 'sem'),
        trials=('objective_bits', 'count'),
        failed=('failed', 'sum'),
    ).reset_index()
    table['stderr_bits'] = table['stderr_bits'].fillna(0.0)
    table['trials'] = table['trials'].astype(int)
    table['failed'] = table['failed'].astype(int)

    # A point where every trial failed has no mean and gets no row
    lost = table['trials'] == 0
    for _, point in table[lost].iterrows():
        logger.warning('Every {} trial failed at {}; the point is left out of the table'.format(
            point['scheme'], ', '.join('{}={}'.format(k, point[k]) for k in keys)))
    table = table[~lost].reset_index(drop=True)
    return table[keys + ['scheme', 'mean_bits', 'stderr_bits', 'trials', 'failed']]


def metadata(spec, backend, tolerance, max_iterations=None):
    return [
        ('kind', spec.kind),
        ('seed', spec.seed),
        ('rng', channel.RNG_NAME),
        ('backend', backend),
        ('solver_tolerance', tolerance),
        ('solver_max_iterations', '' if max_iterations is None else max_iterations),
        ('sca_rel_tolerance', spec.sca.rel_tolerance),
        ('sca_abs_tolerance', spec.sca.abs_tolerance),
        ('sca_max_iterations', spec.sca.max_iterations),
        ('sca_start', spec.sca.start),
        ('build', BUILD_ID),
        ('cvxpy', cp.__version__),
    ]


def write_csv(table, path, header=()):
    """
    Write '# key,value' metadata lines followed by the table
    :return: path
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='') as outfile:
        for key, value in header:
            outfile.write('# {},{}\n'.format(key, value))
        table.to_csv(outfile, index=False, lineterminator='\n', float_format='%.10g')
    return path


def solve_experiment(spec, backend='clarabel', tolerance=conic.DEFAULT_SOLVER_TOLERANCE, max_iterations=None, jobs=1):
    """
    Solve every (sweep point, trial, scheme) of the experiment
    :return: per-trial rows from run_units
    """
    units = plan_units(spec, backend, tolerance, max_iterations)
    logger.info('Running {} experiment: {} solves on {} job(s)'.format(spec.kind, len(units), jobs))
    rows = run_units(units, jobs)
    failures = sum(r['failed'] for r in rows)
    if failures:
        logger.warning('{} of {} solves failed and were excluded'.format(failures, len(rows)))
    return rows


def save_experiment(spec, table, backend='clarabel', tolerance=conic.DEFAULT_SOLVER_TOLERANCE, max_iterations=None,
                    output=None):
    """
    Write the experiment table with its metadata header
    :param output: CSV path, overriding spec.output
    :return: path
    """
    path = output or spec.output or '{}.csv'.format(spec.kind)
    write_csv(table, path, metadata(spec, backend, tolerance, max_iterations))
    logger.info('Wrote {} rows to {}'.format(len(table), path))
    return path


def run_experiment(spec, backend='clarabel', tolerance=conic.DEFAULT_SOLVER_TOLERANCE, jobs=1, output=None,
                   max_iterations=None):
    """
    Run every trial of the experiment and write its CSV
    :param spec: ExperimentSpec
    :param backend: solver backend name
    :param jobs: worker processes
    :param output: CSV path, overriding spec.output
    :return: (path, DataFrame)
    """
    rows = solve_experiment(spec, backend, tolerance, max_iterations, jobs)
    table = aggregate(spec, rows)
    path = save_experiment(spec, table, backend, tolerance, max_iterations, output)
    return path, table


def load_scenario(path):
    """
    Parse a scenario JSON file
    :raises UsageError: file:line:column on malformed JSON, field message on invalid content
    """
    try:
        with open(path, 'r') as infile:
            data = json.load(infile)
    except OSError as e:
        raise UsageError('cannot read scenario {}: {}'.format(path, e.strerror))
    except json.JSONDecodeError as e:
        raise UsageError('{}:{}:{}: {}'.format(path, e.lineno, e.colno, e.msg))
    if not isinstance(data, dict):
        raise UsageError('{}: scenario must be a JSON object'.format(path))
    try:
        return Scenario.from_dict(data)
    except ValueError as e:
        raise UsageError('{}: {}'.format(path, e))


def format_report(scenario, report, audit):
    """
    Human-readable schedule, timeline, per-user offloads and slacks
    :return: str
    """
    alloc = report.allocation
    lines = ['{} schedule ({} after {} iterations)'.format(report.scheme.upper(), report.termination.value,
                                                          report.iterations)]
    if report.scheme == 'noma':
        for m in range(scenario.user_count):
            powers = ' '.join('{:.6f}'.format(alloc.powers[m, j]) for j in range(m + 1))
            lines.append('  user {} powers [W]: {}'.format(m + 1, powers))
        timeline = model.slot_timeline(alloc)
        offloads = [model.offloaded_nats(alloc, scenario, m) for m in range(scenario.user_count)]
    else:
        for m in range(scenario.user_count):
            lines.append('  user {} power [W]: {:.6f}'.format(m + 1, alloc.powers[m]))
        timeline = model.oma_timeline(alloc)
        offloads = [model.offloaded_nats_oma(alloc, scenario, m) for m in range(scenario.user_count)]

    lines.append('  timeline:')
    for slot in timeline:
        lines.append('    slot {}: {:.6f} s to {:.6f} s, users {}'.format(
            slot.index + 1, slot.start, slot.end, ', '.join(str(u + 1) for u in slot.active_users)))
    lines.append('  offloaded bits:')
    for m, value in enumerate(offloads):
        lines.append('    user {}: {:.6f}'.format(m + 1, model.nats_to_bits(value)))
    lines.append('  minimum offloaded bits: {:.6f}'.format(model.nats_to_bits(report.objective)))
    lines.append('  energy slack [J]: {:.3e}'.format(audit.energy_slack))
    lines.append('  deadline slack [s]: {}'.format(' '.join('{:.3e}'.format(s) for s in audit.deadline_slack)))
    lines.append('  power slack [W]: {}'.format(' '.join('{:.3e}'.format(s) for s in audit.power_slack)))
    lines.append('  feasible: {}'.format('yes' if audit.feasible else 'no'))
    return '\n'.join(lines)


def dump_subproblem(scenario, scheme, settings, path):
    """Write the first SCA subproblem in plain text"""
    if scheme == 'noma':
        problem, _ = conic.build_noma_subproblem(scenario, ExpansionPoint.initial(scenario),
                                                 proximal_weight=settings.proximal_weight,
                                                 compact_first_slot=settings.compact_first_slot)
    else:
        zeros = model.OmaAllocation.zeros(scenario)
        problem, _ = conic.build_oma_subproblem(scenario, zeros.powers, zeros.slots,
                                                proximal_weight=settings.proximal_weight)
    with open(path, 'w') as outfile:
        outfile.write(conic.format_problem(problem))
    logger.info('Wrote the first {} subproblem to {}'.format(scheme, path))


def oracle_check(scenario, scheme, report, grid):
    """
    Compare an SCA result with the brute-force optimum
    :return: (oracle result, gap in bits) or None when the instance is too large
    """
    search = oracle.brute_force_noma if scheme == 'noma' else oracle.brute_force_oma
    try:
        result = search(scenario, grid)
    except oracle.DimensionError as e:
        logger.warning('Skipping oracle check: {}'.format(e))
        return None
    return result, model.nats_to_bits(result.objective - report.objective)


def run_single(scenario_path, scheme='noma', settings=None, backend=None, out=None, dump=None, stream=None,
               grid=None):
    """
    Solve one scenario file and print the schedule
    :param scenario_path: JSON scenario
    :param scheme: noma, oma or both
    :param settings: ScaSettings
    :param backend: SolverBackend
    :param out: optional path for the allocation JSON; printed when omitted
    :param dump: optional path for the first subproblem listing
    :param grid: oracle.GridSpec; when given, also run the brute-force search and print the gap
    :return: exit code, 0 iff every solve succeeded and passed the audit
    """
    stream = stream or sys.stdout
    settings = settings or ScaSettings()
    scenario = load_scenario(scenario_path)
    schemes = SCHEMES if scheme == 'both' else (scheme,)

    status = EXIT_OK
    results = []
    for name in schemes:
        if dump:
            dump_subproblem(scenario, name, settings, dump if len(schemes) == 1 else '{}.{}'.format(dump, name))
        report = SOLVERS[name](scenario, settings, backend)
        audit = (model.audit_noma if name == 'noma' else model.audit_oma)(report.allocation, scenario)
        print(format_report(scenario, report, audit), file=stream)
        if not report.succeeded or not audit.feasible:
            logger.warning('{} solve of {} did not pass: {} {}'.format(name, scenario_path,
                                                                    report.termination.value, report.message))
            status = EXIT_FAILURE
        result = model.allocation_to_dict(report.allocation, scenario)
        result.update(objective_bits=model.nats_to_bits(report.objective),
                      termination=report.termination.value,
                      iterations=report.iterations,
                      feasible=audit.feasible)
        if grid is not None:
            checked = oracle_check(scenario, name, report, grid)
            if checked:
                found, gap = checked
                print('  oracle bits: {:.6f} (gap {:+.3e}, grid error {:.3e})'.format(
                    model.nats_to_bits(found.objective), gap, model.nats_to_bits(found.grid_error)), file=stream)
                result.update(oracle_bits=model.nats_to_bits(found.objective),
                              oracle_grid_error_bits=model.nats_to_bits(found.grid_error))
        results.append(result)

    document = json.dumps({'scenario': scenario.to_dict(), 'results': results}, indent=2)
    if out:
        with open(out, 'w') as outfile:
            outfile.write(document + '\n')
        logger.info('Wrote allocation to {}'.format(out))
    else:
        print(document, file=stream)
    return status


def experiment_parser():
    parser = argparse.ArgumentParser(description='Run a NOMA/OMA offloading experiment and write a CSV.')
    parser.add_argument('--spec', required=True, help='experiment spec (YAML or JSON)')
    parser.add_argument('--seed', type=int, help='override the spec seed')
    parser.add_argument('--trials', type=int, help='override trials per sweep point')
    parser.add_argument('--out', help='CSV output path')
    parser.add_argument('--scheme', choices=['noma', 'oma', 'both'], help='schemes to solve')
    parser.add_argument('--backend', choices=sorted(conic.BACKENDS), help='conic solver backend')
    parser.add_argument('--jobs', type=int, help='worker processes')
    parser.add_argument('--config', help='config file (defaults to config.yml at the repository root)')
    return parser


def single_parser():
    parser = argparse.ArgumentParser(description='Solve one scenario and print the schedule.')
    parser.add_argument('--scenario', required=True, help='scenario JSON file')
    parser.add_argument('--scheme', choices=['noma', 'oma', 'both'], default='noma')
    parser.add_argument('--backend', choices=sorted(conic.BACKENDS), help='conic solver backend')
    parser.add_argument('--out', help='write the allocation JSON here instead of standard output')
    parser.add_argument('--dump-subproblem', help='write the first conic subproblem listing here')
    parser.add_argument('--oracle', action='store_true', help='also run the brute-force search (M <= 3 NOMA, M <= 4 OMA)')
    parser.add_argument('--config', help='config file (defaults to config.yml at the repository root)')
    return parser


def apply_overrides(spec, args):
    """Command-line flags win over the spec file"""
    if args.seed is not None:
        spec.seed = args.seed
    if args.trials is not None:
        if args.trials < 1:
            raise UsageError('--trials must be at least 1')
        spec.trials = args.trials
    if args.scheme is not None:
        spec.schemes = SCHEMES if args.scheme == 'both' else (args.scheme,)
    if args.out is not None:
        spec.output = args.out
    return spec


def backend_from(args, cfg):
    name = config.resolve_backend(args.backend, cfg)
    if name.lower() not in conic.BACKENDS:
        raise UsageError('unknown backend {!r}; choose from {}'.format(name, ', '.join(sorted(conic.BACKENDS))))
    return name.lower()
