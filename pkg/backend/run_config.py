"""
Run-file parsing for the command-line surface

A run file is INI text: [section] headers, key = value lines and # comments.
Vectors are comma-separated; matrix rows are separated by ';'.
"""
import configparser
import logging
import re
from dataclasses import dataclass, field, replace

import numpy as np

import config
from backend.exceptions import ConfigurationError, DomainError, ModelError
from backend.market import HestonParams, KimOmbergParams, MarketModel, ModelKind
from backend.preferences import EZPreference

logger = logging.getLogger(__name__)

SECTION_RE = re.compile(r'^\s*\[([^\]]+)\]')
KEY_RE = re.compile(r'^\s*([^#;\[\s][^=:]*?)\s*[=:]')


def _float(text):
    return float(text)


def _int(text):
    return int(text)


def _bool(text):
    state = configparser.ConfigParser.BOOLEAN_STATES.get(text.strip().lower())
    if state is None:
        raise ValueError(f'not a boolean: {text!r}')
    return state


def _vector(text):
    return np.array([float(v) for v in text.split(',') if v.strip()])


def _matrix(text):
    rows = [_vector(row) for row in text.split(';') if row.strip()]
    if len({row.size for row in rows}) != 1:
        raise ValueError('matrix rows have different lengths')
    return np.vstack(rows)


def _formats(text):
    formats = [f.strip().lower() for f in text.split(',') if f.strip()]
    unknown = set(formats) - {'csv', 'jsonl', 'pdf', 'excel'}
    if unknown:
        raise ValueError(f'unknown output formats {sorted(unknown)}')
    return formats


MODEL_KEYS = {
    ModelKind.CONSTANT: {'r': _float, 'mu': _vector, 'sigma': _matrix, 'rho': _vector},
    ModelKind.HESTON: {'b': _float, 'ell': _float, 'a': _float, 'r0': _float, 'r1': _float,
                       'lam': _vector, 'sigma': _matrix, 'rho': _vector, 'sigma_power': _float},
    ModelKind.KIM_OMBERG: {'a': _float, 'b': _float, 'r0': _float, 'r1': _float, 'lam0': _vector,
                           'lam1': _vector, 'sigma': _matrix, 'rho': _vector},
}
MODEL_REQUIRED = {
    ModelKind.CONSTANT: ('r', 'mu', 'sigma', 'rho'),
    ModelKind.HESTON: ('b', 'ell', 'a', 'r0', 'r1', 'lam'),
    ModelKind.KIM_OMBERG: ('a', 'b', 'r0', 'r1', 'lam0', 'lam1'),
}
MODEL_COMMON = {'kind': str, 'horizon': _float, 'wealth': _float, 'x0': _float, 'override': _bool}

SCHEMA = {
    'preferences': {'delta': _float, 'gamma': _float, 'psi': _float},
    'solver': {'time_steps': _int, 'space_nodes': _int, 'tol': _float, 'max_iter': _int},
    'mc': {'paths': _int, 'steps': _int, 'seed': _int, 'batches': _int, 'threads': _int,
           'bound_paths': _int},
    'checks': {'lagrange_points': _int, 'perturbation': _float, 'lyapunov_c_under': _float,
               'lyapunov_c_over': _float, 'transform_samples': _int},
    'output': {'directory': str, 'formats': _formats, 'export_paths': _bool, 'timings': _bool},
}
REQUIRED_SECTIONS = ('preferences', 'model')
REQUIRED_KEYS = {'preferences': ('delta', 'gamma', 'psi'), 'model': ('kind', 'horizon')}


def _defaults():
    return {
        'solver': {'time_steps': config.PDE_TIME_STEPS, 'space_nodes': config.PDE_SPACE_NODES,
                   'tol': config.FIXED_POINT_TOL, 'max_iter': config.FIXED_POINT_MAX_ITER},
        'mc': {'paths': config.MC_PATHS, 'steps': config.MC_STEPS, 'seed': config.MC_SEED,
               'batches': config.MC_BATCHES, 'threads': config.THREADS, 'bound_paths': config.MC_PATHS},
        'checks': {'lagrange_points': config.LAGRANGE_POINTS, 'perturbation': config.DUAL_PERTURBATION,
                   'lyapunov_c_under': config.LYAPUNOV_C_UNDER, 'lyapunov_c_over': config.LYAPUNOV_C_OVER,
                   'transform_samples': config.TRANSFORM_SAMPLES},
        'output': {'directory': config.REPORTS_FOLDER, 'formats': ['csv', 'jsonl'],
                   'export_paths': False, 'timings': False},
    }


@dataclass
class RunConfig:
    """Validated run configuration"""
    preference: EZPreference
    model: MarketModel
    horizon: float
    wealth: float = 1.0
    override: bool = False
    solver: dict = field(default_factory=dict)
    mc: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    source: str = '<string>'

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding='utf-8') as handle:
                text = handle.read()
        except OSError as exc:
            raise ConfigurationError(f'cannot read {path}: {exc.strerror}') from exc
        return cls.from_string(text, source=str(path))

    @classmethod
    def from_string(cls, text, source='<string>'):
        return _RunFileParser(text, source).build()

    def with_overrides(self, seed=None, threads=None, directory=None):
        """Copy with command-line overrides applied"""
        mc = dict(self.mc)
        output = dict(self.output)
        if seed is not None:
            mc['seed'] = int(seed)
        if threads is not None:
            mc['threads'] = int(threads)
        if directory is not None:
            output['directory'] = str(directory)
        return replace(self, mc=mc, output=output)

    def describe(self):
        """Plain view of the run for metadata records"""
        return {
            'source': self.source,
            'preferences': self.preference.to_dict(),
            'model': self.model.describe(),
            'horizon': self.horizon,
            'wealth': self.wealth,
            'override': self.override,
            'solver': dict(self.solver),
            'mc': dict(self.mc),
            'checks': dict(self.checks),
        }


class _RunFileParser:
    """configparser for the values plus a line scan for error positions"""

    def __init__(self, text, source):
        self.source = source
        self.section_lines = {}
        self.key_lines = {}
        self._scan(text)
        self.parser = configparser.ConfigParser(comment_prefixes=('#',), inline_comment_prefixes=('#',),
                                                interpolation=None, default_section='\x00')
        try:
            self.parser.read_string(text, source=source)
        except configparser.MissingSectionHeaderError as exc:
            raise ConfigurationError('key outside of any [section]', exc.lineno) from exc
        except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as exc:
            raise ConfigurationError(exc.message.split(': ', 1)[-1], exc.lineno) from exc
        except configparser.ParsingError as exc:
            lineno, line = exc.errors[0]
            raise ConfigurationError(f'cannot parse {line.strip()!r}', lineno) from exc

    def _scan(self, text):
        section = None
        for lineno, line in enumerate(text.splitlines(), start=1):
            match = SECTION_RE.match(line)
            if match:
                section = match.group(1).strip()
                self.section_lines.setdefault(section, lineno)
                continue
            match = KEY_RE.match(line)
            if match and section is not None:
                self.key_lines.setdefault((section, match.group(1).strip().lower()), lineno)

    def _error(self, message, section, key=None):
        lineno = self.key_lines.get((section, key)) if key else None
        if lineno is None:
            lineno = self.section_lines.get(section, 0)
        return ConfigurationError(message, lineno)

    def _parse_section(self, section, schema, required=()):
        values = {}
        items = dict(self.parser.items(section)) if self.parser.has_section(section) else {}
        for key, raw in items.items():
            if key not in schema:
                raise self._error(f'unknown key {key!r} in [{section}]', section, key)
            try:
                values[key] = schema[key](raw)
            except ValueError as exc:
                raise self._error(f'invalid value for {section}.{key}: {exc}', section, key) from exc
        for key in required:
            if key not in values:
                raise self._error(f'missing required key {section}.{key}', section)
        return values

    def build(self):
        known = set(SCHEMA) | {'model'}
        for section in self.parser.sections():
            if section not in known:
                raise ConfigurationError(f'unknown section [{section}]', self.section_lines.get(section, 0))
        for section in REQUIRED_SECTIONS:
            if not self.parser.has_section(section):
                raise ConfigurationError(f'missing section [{section}]', 0)

        prefs = self._parse_section('preferences', SCHEMA['preferences'], REQUIRED_KEYS['preferences'])
        try:
            preference = EZPreference(prefs['delta'], prefs['gamma'], prefs['psi'])
        except DomainError as exc:
            raise self._error(str(exc), 'preferences') from exc

        kind_raw = self.parser.get('model', 'kind', fallback=None)
        try:
            kind = ModelKind(kind_raw.strip().lower()) if kind_raw else None
        except ValueError as exc:
            raise self._error(f'unknown model kind {kind_raw!r}', 'model', 'kind') from exc
        if kind is None:
            raise self._error('missing required key model.kind', 'model')
        schema = dict(MODEL_COMMON, **MODEL_KEYS[kind])
        raw = self._parse_section('model', schema, REQUIRED_KEYS['model'] + MODEL_REQUIRED[kind])
        model = self._build_model(kind, raw)
        if not raw['horizon'] > 0:
            raise self._error('model.horizon must be positive', 'model', 'horizon')
        wealth = raw.get('wealth', 1.0)
        if not wealth > 0:
            raise self._error('model.wealth must be positive', 'model', 'wealth')

        blocks = _defaults()
        for section, defaults in blocks.items():
            defaults.update(self._parse_section(section, SCHEMA[section]))
        for key in ('time_steps', 'space_nodes', 'max_iter'):
            if blocks['solver'][key] < 1:
                raise self._error(f'solver.{key} must be at least 1', 'solver', key)
        for key in ('paths', 'steps', 'batches', 'threads', 'bound_paths'):
            if blocks['mc'][key] < 1:
                raise self._error(f'mc.{key} must be at least 1', 'mc', key)
        if blocks['mc']['seed'] < 0:
            raise self._error('mc.seed must be non-negative', 'mc', 'seed')

        logger.debug('Parsed run file %s (%s model)', self.source, kind.value)
        return RunConfig(preference=preference, model=model, horizon=raw['horizon'], wealth=wealth,
                         override=raw.get('override', False), solver=blocks['solver'], mc=blocks['mc'],
                         checks=blocks['checks'], output=blocks['output'], source=self.source)

    def _build_model(self, kind, raw):
        params = {k: v for k, v in raw.items() if k not in MODEL_COMMON or k == 'x0'}
        try:
            if kind is ModelKind.CONSTANT:
                return MarketModel.constant(**params)
            if kind is ModelKind.HESTON:
                return MarketModel.heston(HestonParams(**params))
            return MarketModel.kim_omberg(KimOmbergParams(**params))
        except (DomainError, ModelError, ValueError) as exc:
            raise self._error(f'invalid {kind.value} model: {exc}', 'model') from exc
