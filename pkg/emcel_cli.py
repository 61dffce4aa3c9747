#!/usr/bin/env python3

import logging
import argparse
import csv
import math
import os
import platform
import sys
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pydantic
import scipy
from pydantic import ValidationError

import emcel_analysis
import emcel_chain
import emcel_embedding
from emcel_const import (ArgumentError, ConfigurationError, DomainError,
                         EmcelError, ExitCode, ExperimentConfig,
                         InternalConsistencyError, ModelSpec,
                         UnsupportedModelError)
from emcel_measure import (check_condition_C, default_audit_grid, is_brownian,
                           triangle_integral)
from emcel_models import build_model, list_models
from emcel_scale import build_scheme, verify_condition_A

logger = logging.getLogger(__name__)

VERSION = "1.0"
COMMANDS = ["scale", "simulate", "rate-study", "embed-study",
            "check-conditions", "list-models"]
MODULES = [__name__, 'emcel_measure', 'emcel_scale', 'emcel_chain',
           'emcel_embedding', 'emcel_analysis', 'emcel_models', 'emcel_runner']


def _floats(value: str) -> List[float]:
    return [float(x) for x in value.split(',') if x.strip()]


def _atoms(value: str) -> List[Tuple[float, float]]:
    atoms = []
    for pair in value.split(';'):
        if not pair.strip():
            continue
        x, w = pair.split(':')
        atoms.append((float(x), float(w)))
    return atoms


def _y_grid(value: str) -> Tuple[float, float, int]:
    """ Parse start:stop:num.
    """
    start, stop, num = value.split(':')
    return float(start), float(stop), int(num)


# config key -> (section, field, converter)
KEYS = {
    'model.id': ('model', 'id', str),
    'model.sigma': ('model', 'sigma', float),
    'model.rho': ('model', 'rho', float),
    'model.site': ('model', 'site', float),
    'model.mass': ('model', 'mass', float),
    'model.left': ('model', 'left', float),
    'model.right': ('model', 'right', float),
    'model.left_kind': ('model', 'left_kind', str),
    'model.right_kind': ('model', 'right_kind', str),
    'model.density': ('model', 'density', str),
    'model.density_params': ('model', 'density_params', _floats),
    'model.atoms': ('model', 'atoms', _atoms),
    'model.cantor_mass': ('model', 'cantor_mass', float),
    'model.cantor_left': ('model', 'cantor_left', float),
    'model.cantor_right': ('model', 'cantor_right', float),
    'run.y0': ('run', 'y0', float),
    'run.T': ('run', 'T', float),
    'run.h_list': ('run', 'h_list', _floats),
    'run.h_max': ('run', 'h_max', float),
    'run.n_paths': ('run', 'n_paths', int),
    'run.p': ('run', 'p', float),
    'run.seed': ('run', 'seed', int),
    'run.output': ('run', 'output', str),
    'run.reflect_at': ('run', 'reflect_at', float),
    'run.reference_factor': ('run', 'reference_factor', int),
    'check.k1': ('check', 'k1', float),
    'check.k2': ('check', 'k2', int),
    'check.lam': ('check', 'lam', float),
    'check.grid_size': ('check', 'grid_size', int),
    'scale.h': ('scale', 'scale_h', float),
    'scale.y_grid': ('scale', 'y_grid', _y_grid),
}


def load_config(filepath: str) -> ExperimentConfig:
    """ Read a key = value experiment file.

    Comment lines start with '#'. Lines without '=' are skipped; an
    unknown key or a value that does not convert is an error.

    :return: the validated configuration

    :param filepath: path of the config file
    """
    model = {}
    run = {}
    with open(filepath, 'r') as f:
        for number, line in enumerate(f, 1):
            line = line.strip()
            if not line or line[0] == '#':
                continue
            if '=' not in line:
                msg_tab = ["Skip on config file input due to invalid line"]
                msg_tab.append(str(number))
                msg = ": ".join(msg_tab)
                logging.debug(msg)
                continue
            key, value = (s.strip() for s in line.split('=', 1))
            if key not in KEYS:
                raise ConfigurationError("unknown key %s (line %d)"
                                         % (key, number))
            section, field, convert = KEYS[key]
            try:
                converted = convert(value)
            except ValueError:
                raise ConfigurationError("invalid value %r for %s (line %d)"
                                         % (value, key, number))
            if section == 'model':
                model[field] = converted
            else:
                run[field] = converted
    if 'id' not in model:
        raise ConfigurationError("model.id is missing")
    return ExperimentConfig(model=ModelSpec(**model), **run)


def _format(value) -> str:
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], (list, tuple)):
            return "; ".join("%r:%r" % (x, w) for x, w in value)
        return ", ".join(repr(float(x)) for x in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_manifest(config: ExperimentConfig, command: str, filename: str):
    """ Write the resolved configuration as a config file that can be re-run.
    """
    with open(filename, 'w') as out_file:
        out_file.write("# emcel %s manifest, command: %s\n" % (VERSION, command))
        out_file.write("# python %s, numpy %s, scipy %s, pydantic %s\n"
                       % (platform.python_version(), np.__version__,
                          scipy.__version__, pydantic.VERSION))
        run_fields = config.model_dump(exclude={'model'})
        sections = {'model': config.model.model_dump(), 'run': run_fields,
                    'check': run_fields, 'scale': run_fields}
        for key, (section, field, _) in KEYS.items():
            value = sections[section][field]
            if value is None or (isinstance(value, list) and not value):
                continue
            if field == 'y_grid':
                text = "%r:%r:%d" % tuple(value)
            else:
                text = _format(value)
            out_file.write("%s = %s\n" % (key, text))


def _check_finite(values, what: str):
    if not np.all(np.isfinite(np.asarray(values, dtype=float))):
        raise InternalConsistencyError("NaN or infinite value in %s" % what)


def _check_grid(space, center: float, n: int) -> List[float]:
    """ n points of the interior within distance 5 of center.
    """
    lo = max(center - 5.0, space.left)
    hi = min(center + 5.0, space.right)
    grid = lo + (hi - lo) * (np.arange(n) + 0.5) / n
    return [float(y) for y in grid if space.in_interior(float(y))]


def command_scale(config, scheme, out):
    h = config.scale_h if config.scale_h is not None else config.h_list[0]
    if config.y_grid is None:
        ys = _check_grid(scheme.space, config.y0, config.grid_size)
    else:
        start, stop, num = config.y_grid
        ys = [float(y) for y in np.linspace(start, stop, num)]
    logger.info("%s" % scheme.thresholds(h))
    rows = []
    for y in ys:
        a = scheme.evaluate(h, y)
        if scheme.space.in_interior(y):
            residual = repr(triangle_integral(scheme.measure, y, a) - h)
            inside = scheme.in_I_h(h, y)
        else:
            residual, inside = "", False
        rows.append((y, a, residual, inside))
    _check_finite([a for _, a, _, _ in rows], "scale factors")
    filename = os.path.join(out, "scale_factors.csv")
    with open(filename, 'w', newline='') as out_file:
        f = csv.writer(out_file, delimiter=',', quotechar='"',
                       lineterminator='\n')
        f.writerow(["y", "a_h", "residual", "h", "in_I_h"])
        for y, a, residual, inside in rows:
            f.writerow([repr(y), repr(a), residual, repr(h), int(inside)])
    logger.info("%d scale factors written to %s" % (len(rows), filename))


def command_simulate(config, scheme, out, workers):
    h = config.h_list[0]
    nodes = emcel_chain.simulate_paths(scheme, h, config.y0, config.T,
                                       config.n_paths, config.seed, workers)
    paths = [emcel_chain.ChainPath(h, config.y0, row, config.T)
             for row in nodes]
    if config.reflect_at is not None:
        paths = [emcel_chain.apply_reflection(path, config.reflect_at)
                 for path in paths]
        nodes = np.vstack([path.nodes for path in paths])
    values = [emcel_analysis.terminal_value(path) for path in paths]
    _check_finite(values, "terminal values")
    emcel_chain.write_path_dump(nodes, h, os.path.join(out, "paths.csv"))
    emcel_chain.write_functional_results(
        values, os.path.join(out, "functional_results.csv"))
    logger.info("h=%g: mean terminal value %.6g over %d paths"
                % (h, float(np.mean(values)), len(values)))


def command_rate_study(config, m, scheme, out, workers):
    sigma = is_brownian(m)
    if sigma is not None:
        reference = emcel_analysis.exact_reference_sampler(config.y0, config.T,
                                                           sigma)
    else:
        h_ref = min(config.h_list) / config.reference_factor
        reference = emcel_analysis.FrozenChainReference(scheme, h_ref,
                                                        config.y0, config.T,
                                                        workers)
    logger.info("reference: %s" % reference.label)
    table = emcel_analysis.marginal_rate_study(
        scheme, config.y0, config.T, config.h_list, reference, config.p,
        config.n_paths, config.seed, workers)
    _check_finite([row.estimate for row in table.rows], "rate table")
    emcel_analysis.write_rate_table(table, os.path.join(out, "rate_table.csv"))
    if len(table.rows) >= 3 and all(row.estimate > 0 for row in table.rows):
        fit = emcel_analysis.fit_rate(table)
        emcel_analysis.write_rate_fit(fit, os.path.join(out, "rate_fit.txt"),
                                      target=min(0.25, config.lam / 2.0))
        logger.info("fitted slope %.4f (r^2 = %.4f)"
                    % (fit.slope, fit.r_squared))
    else:
        logger.info("less than 3 positive rows, no rate fit")


def command_embed_study(config, m, out, workers):
    if is_brownian(m) is None:
        raise UnsupportedModelError("the embedding study needs a Brownian "
                                    "model")
    rows = []
    for index, h in enumerate(config.h_list):
        N = max(1, int(math.floor(config.T / h + 1e-9)))
        run = emcel_embedding.simulate_embedding_times(h, N, config.n_paths,
                                                       config.seed, workers)
        if index == 0:
            emcel_embedding.write_embedding_times(
                run, os.path.join(out, "embedding_times.csv"))
        stats = emcel_embedding.temporal_error_stats(run, config.p,
                                                     config.seed)
        bound = (emcel_embedding.lower_bound_check(h, config.T)
                 if h < config.T else None)
        rows.append((stats, bound))
    _check_finite([s.sup_error_Lp for s, _ in rows] +
                  [s.var_tauN for s, _ in rows], "embedding statistics")

    with open(os.path.join(out, "embedding_stats.csv"), 'w',
              newline='') as out_file:
        f = csv.writer(out_file, delimiter=',', quotechar='"',
                       lineterminator='\n')
        f.writerow(["h", "N", "sup_error_Lp", "sup_error_std_error",
                    "var_tauN", "var_tauN_std_error", "var_tauN_exact",
                    "lower_bound"])
        for s, bound in rows:
            f.writerow([repr(s.h), s.N, repr(s.sup_error_Lp),
                        repr(s.sup_error_std_error), repr(s.var_tauN),
                        repr(s.var_tauN_std_error), repr(s.var_tauN_exact),
                        repr(bound) if bound is not None else ""])
    with open(os.path.join(out, "embedding_summary.json"), 'w') as out_file:
        out_file.write("[\n")
        out_file.write(",\n".join(s.model_dump_json(indent=2)
                                  for s, _ in rows))
        out_file.write("\n]\n")

    if len(rows) >= 3:
        table = emcel_analysis.RateTable(rows=[
            emcel_analysis.RateRow(h=s.h, estimate=s.sup_error_Lp,
                                   std_error=s.sup_error_std_error,
                                   n=s.n_paths) for s, _ in rows])
        fit = emcel_analysis.fit_rate(table)
        emcel_analysis.write_rate_fit(fit,
                                      os.path.join(out, "embedding_fit.txt"),
                                      target=0.5)
        logger.info("temporal error slope %.4f" % fit.slope)


def command_check_conditions(config, m, space, scheme, out):
    report_C = check_condition_C(m, space, config.k1, config.k2,
                                 default_audit_grid(space))
    report_A = verify_condition_A(scheme, config.lam, config.h_list,
                                  _check_grid(space, config.y0,
                                              config.grid_size))
    _check_finite([report_A.K_hat, report_A.gamma_hat], "condition report")
    with open(os.path.join(out, "conditions.json"), 'w') as out_file:
        out_file.write('{\n"condition_C": %s,\n"condition_A": %s\n}\n'
                       % (report_C.model_dump_json(indent=2),
                          report_A.model_dump_json(indent=2)))
    logger.info("Condition (C) %s, Condition (A) K_hat=%g gamma_hat=%g"
                % ("passes" if report_C.passes else "fails",
                   report_A.K_hat, report_A.gamma_hat))


def run(config_path: str, command: str, seed: Optional[int] = None,
        out: Optional[str] = None, workers: int = 1, h: Optional[float] = None,
        y_grid: Optional[Tuple[float, float, int]] = None) -> int:
    """ Run one study of a configuration file.

    :return: 0 on success, 2 on a validation error, 3 on a runtime error

    :param config_path: the experiment file
    :param command: one of the subcommands
    :param seed: overrides run.seed
    :param out: overrides run.output
    :param workers: number of threads
    :param h: time step of the scale command
    :param y_grid: (start, stop, num) of the scale command
    """
    if command == "list-models":
        print(list_models())
        return ExitCode.OK
    if command not in COMMANDS:
        logger.error("unknown command %s" % command)
        return ExitCode.VALIDATION

    try:
        config = load_config(config_path)
        updates = {}
        if seed is not None:
            updates['seed'] = seed
        if out is not None:
            updates['output'] = out
        if h is not None:
            updates['scale_h'] = h
        if y_grid is not None:
            updates['y_grid'] = y_grid
        if updates:
            config = ExperimentConfig(**{**config.model_dump(), **updates})
        m, space = build_model(config.model)
        if not space.in_interior(config.y0):
            raise DomainError("y0=%g outside the interior of %s"
                              % (config.y0, space))
        scheme = build_scheme(m, space, config.h_max)
    except (OSError, ValidationError, ConfigurationError, ArgumentError,
            DomainError) as e:
        logger.error("invalid configuration %s: %s" % (config_path, e))
        return ExitCode.VALIDATION
    except EmcelError as e:
        logger.error("cannot build the scale factors: %s" % e)
        return ExitCode.RUNTIME

    os.makedirs(config.output, exist_ok=True)
    logger.info("%s on %s, seed %d, output %s"
                % (command, scheme, config.seed, config.output))
    try:
        if command == "scale":
            command_scale(config, scheme, config.output)
        elif command == "simulate":
            command_simulate(config, scheme, config.output, workers)
        elif command == "rate-study":
            command_rate_study(config, m, scheme, config.output, workers)
        elif command == "embed-study":
            command_embed_study(config, m, config.output, workers)
        elif command == "check-conditions":
            command_check_conditions(config, m, space, scheme, config.output)
        write_manifest(config, command,
                       os.path.join(config.output, "manifest.cfg"))
    except UnsupportedModelError as e:
        logger.error("%s: %s" % (command, e))
        return ExitCode.VALIDATION
    except (EmcelError, ValueError, ArithmeticError) as e:
        logger.error("%s failed: %s" % (command, e))
        return ExitCode.RUNTIME
    return ExitCode.OK


def check_seed(value: str) -> int:
    """ Check of the seed in input is valid

    :return: the argument if it is valid

    :param value: the input argument
    """
    ivalue = int(value)
    if not 0 <= ivalue < 2 ** 64:
        raise argparse.ArgumentTypeError("%s is not a 64-bit seed" % value)
    return ivalue


def check_positive_int(value: str) -> int:
    ivalue = int(value)
    if ivalue < 1:
        raise argparse.ArgumentTypeError("%s is too small" % value)
    return ivalue


def check_y_grid(value: str) -> Tuple[float, float, int]:
    """ Parse start:stop:num.
    """
    try:
        grid = _y_grid(value)
    except ValueError:
        raise argparse.ArgumentTypeError("%s is not start:stop:num" % value)
    if grid[2] < 1:
        raise argparse.ArgumentTypeError("%s has no point" % value)
    return grid


def main(argv: Optional[Sequence[str]] = None) -> int:
    ### Command line arguments parsing
    parser = argparse.ArgumentParser(description='The EMCEL diffusion '
                                     'approximation studies')
    parser.add_argument('command',
                        choices=COMMANDS,
                        help='the study to run')
    parser.add_argument('-c', '--config',
                        dest='config',
                        help='the experiment configuration file',
                        required=False,
                        default=None)
    parser.add_argument('-s', '--seed',
                        dest='seed',
                        type=check_seed,
                        help='(default:  \'%(default)s\') overrides run.seed',
                        required=False,
                        default=None)
    parser.add_argument('-o', '--out',
                        dest='out',
                        help='(default:  \'%(default)s\') overrides run.output',
                        required=False,
                        default=None)
    parser.add_argument('-w', '--workers',
                        dest='workers',
                        type=check_positive_int,
                        help='(default:  \'%(default)s\') number of threads',
                        required=False,
                        default=1)
    parser.add_argument('--h',
                        dest='h',
                        type=float,
                        help='time step of the scale command '
                             '(default: first run.h_list value)',
                        required=False,
                        default=None)
    parser.add_argument('--y-grid',
                        dest='y_grid',
                        type=check_y_grid,
                        help='start:stop:num points of the scale command',
                        required=False,
                        default=None)
    parser.add_argument('-d', '--debug',
                        dest='debugFlag',
                        help='Raise the log level to debug',
                        action="store_true",
                        default=False)
    args = parser.parse_args(argv)

    ### Log level configuration
    logging.basicConfig(format='%(message)s', level=logging.WARNING)

    if args.debugFlag == True:
        logLevel = logging.DEBUG
    else:
        logLevel = logging.INFO

    for m in MODULES:
        logging.getLogger(m).setLevel(logLevel)

    if args.command != "list-models" and args.config is None:
        logger.error("%s needs --config" % args.command)
        return ExitCode.VALIDATION
    return run(args.config, args.command, args.seed, args.out, args.workers,
               args.h, args.y_grid)


if __name__ == "__main__":
    sys.exit(main())
