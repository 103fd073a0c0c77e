"""Experiment configuration: INI sections parsed into frozen dataclasses.

Sections are [experiment], [probe], [distill], [mlp] and [oracle]. Every key
is optional; missing keys take the active profile's defaults. render_config
writes every key back in a canonical order, so parse_config(render_config(c))
reproduces c and the rendered text hashes stably.
"""
import configparser
import hashlib
import math
import re
import typing
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Mapping, Optional, Tuple

from distillation.distiller import DistillConfig
from distillation.exceptions import ConfigError, DistillationError
from distillation.probe import ProbeConfig
from distillation.source_model import MLPConfig

MAX_N = 8
MAX_L = 16


@dataclass(frozen=True)
class ExperimentSettings:
    profile: str = 'desk'
    n: int = 4
    l: int = 2
    depths: Tuple[int, ...] = (2,)
    ks: Tuple[int, ...] = (10,)
    backend: str = 'oracle'
    seed: int = 0
    n_jobs: int = 1
    output_dir: str = ''
    lrh_norms: Tuple[float, ...] = (math.inf, 0.001)
    lrh_steps: int = 100
    lrh_samples: int = 4000
    separation_range: Tuple[int, ...] = (3, 4, 5, 6)


@dataclass(frozen=True)
class OracleSettings:
    distractors: int = 0
    distractor_width: int = 2
    noise: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    probe: ProbeConfig = field(default_factory=lambda: ProbeConfig(samples=4000))
    distill: DistillConfig = field(default_factory=DistillConfig)
    mlp: MLPConfig = field(default_factory=MLPConfig)
    oracle: OracleSettings = field(default_factory=OracleSettings)


SECTIONS = ('experiment', 'probe', 'distill', 'mlp', 'oracle')

# Values the engine takes from elsewhere: seeds are forked per cell from the
# experiment seed, the selection depth follows the sweep depth.
DERIVED_KEYS = {('distill', 'seed'), ('distill', 'R'), ('distill', 'k'), ('distill', 'n_jobs'), ('mlp', 'seed')}

PROFILES: Dict[str, Dict[str, Dict[str, str]]] = {
    'desk': {},
    'full': {
        'experiment': {'n': '6', 'l': '6', 'depths': '2, 3, 4, 5', 'ks': '10, 50, 100, 200', 'backend': 'mlp'},
        'distill': {'phase1': 'topk'},
        'mlp': {'width': '256', 'steps': '50000'},
    },
}


def _section_keys(section: str) -> Dict[str, Any]:
    cls = type(getattr(ExperimentConfig(), section))
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if (section, f.name) not in DERIVED_KEYS}


def _coerce(text: str, hint: Any, section: str, key: str, line: Optional[int]) -> Any:
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if text.lower() in ('none', ''):
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(text, inner, section, key, line)
    if origin in (tuple, Tuple):
        items = [t for t in re.split(r'[,\s]+', text) if t]
        if not items:
            raise ConfigError('expected at least one value', section=section, key=key, line=line)
        return tuple(_coerce(t, args[0], section, key, line) for t in items)
    try:
        if hint is bool:
            lowered = text.lower()
            if lowered not in ('true', 'false', '1', '0', 'yes', 'no'):
                raise ValueError(text)
            return lowered in ('true', '1', 'yes')
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError:
        raise ConfigError(f'expected {hint.__name__}, got {text!r}', section=section, key=key, line=line) from None
    return text


def _format(value: Any) -> str:
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return 'inf' if math.isinf(value) else repr(value)
    if isinstance(value, tuple):
        return ', '.join(_format(v) for v in value)
    return str(value)


def _line_numbers(text: str) -> Dict[Tuple[str, str], int]:
    found: Dict[Tuple[str, str], int] = {}
    section = None
    for number, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        header = re.fullmatch(r'\[([^\]]+)\]', stripped)
        if header:
            section = header.group(1).strip()
            continue
        match = re.match(r'([^=:#;\s]+)\s*[=:]', stripped)
        if match and section:
            found[(section, match.group(1))] = number
    return found


def parse_config(text: str = '', overrides: Optional[Mapping[str, str]] = None,
                 defaults: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Parse INI text; overrides and defaults are keyed 'section.key'.

    Precedence, lowest first: built-in defaults, `defaults` (from Django
    settings), the profile, the file, the overrides.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as error:
        raise ConfigError(f'malformed config: {error}', line=getattr(error, 'lineno', None)) from None
    lines = _line_numbers(text)

    Entry = Dict[Tuple[str, str], Tuple[str, Optional[int]]]
    base_values: Entry = {_split_key(k): (str(v), None) for k, v in (defaults or {}).items()}
    file_values: Entry = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f'unknown section [{section}]', section=section,
                              line=_section_line(text, section))
        for key, raw in parser[section].items():
            file_values[(section, key)] = (raw, lines.get((section, key)))
    override_values: Entry = {_split_key(k): (str(v), None) for k, v in (overrides or {}).items()}

    chosen = {**base_values, **file_values, **override_values}.get(('experiment', 'profile'), ('desk', None))
    profile = chosen[0].strip()
    if profile not in PROFILES:
        raise ConfigError(f'unknown profile {profile!r}', section='experiment', key='profile', line=chosen[1])
    profile_values: Entry = {(section, key): (raw, None)
                             for section, entries in PROFILES[profile].items() for key, raw in entries.items()}
    merged = {**base_values, **profile_values, **file_values, **override_values}

    built: Dict[str, Any] = {}
    base = ExperimentConfig()
    for section in SECTIONS:
        hints = _section_keys(section)
        updates = {}
        for (sec, key), (raw, line) in merged.items():
            if sec != section:
                continue
            if key not in hints:
                raise ConfigError('unknown key', section=section, key=key, line=line)
            updates[key] = _coerce(raw, hints[key], section, key, line)
        built[section] = replace(getattr(base, section), **updates)
    cfg = ExperimentConfig(**built)
    validate_config(cfg, lines)
    return cfg


def _section_line(text: str, section: str) -> Optional[int]:
    for number, raw in enumerate(text.splitlines(), start=1):
        if raw.strip() == f'[{section}]':
            return number
    return None


def _split_key(dotted: str) -> Tuple[str, str]:
    section, _, key = dotted.partition('.')
    if not key or section not in SECTIONS:
        raise ConfigError(f'override {dotted!r} must look like section.key')
    return section, key


def validate_config(cfg: ExperimentConfig, lines: Optional[Dict[Tuple[str, str], int]] = None):
    lines = lines or {}

    def fail(section: str, key: str, message: str):
        raise ConfigError(message, section=section, key=key, line=lines.get((section, key)))

    e = cfg.experiment
    if not 2 <= e.n <= MAX_N:
        fail('experiment', 'n', f'must lie in [2, {MAX_N}], got {e.n}')
    if not 0 <= e.l <= MAX_L:
        fail('experiment', 'l', f'must lie in [0, {MAX_L}], got {e.l}')
    if any(d < 1 for d in e.depths):
        fail('experiment', 'depths', 'depths must be positive')
    if any(k < 1 for k in e.ks):
        fail('experiment', 'ks', 'k values must be positive')
    if e.backend not in ('oracle', 'mlp'):
        fail('experiment', 'backend', f'must be oracle or mlp, got {e.backend!r}')
    if e.seed < 0:
        fail('experiment', 'seed', 'must be non-negative')
    if e.n_jobs == 0:
        fail('experiment', 'n_jobs', 'must be non-zero')
    if e.lrh_steps < 0 or e.lrh_samples < 2:
        fail('experiment', 'lrh_samples', 'lrh_steps must be >= 0 and lrh_samples >= 2')
    if any(v < 0 for v in e.lrh_norms):
        fail('experiment', 'lrh_norms', 'norm bounds must be non-negative')
    if any(n < 3 for n in e.separation_range):
        fail('experiment', 'separation_range', 'the restricted family needs n >= 3')
    if cfg.distill.phase1 not in ('exact', 'topk'):
        fail('distill', 'phase1', f'must be exact or topk, got {cfg.distill.phase1!r}')
    if cfg.distill.phase2 not in ('shortlist', 'exact_joint'):
        fail('distill', 'phase2', f'must be shortlist or exact_joint, got {cfg.distill.phase2!r}')
    if cfg.distill.gate not in (None, 'schedule'):
        fail('distill', 'gate', f'must be none or schedule, got {cfg.distill.gate!r}')
    if cfg.oracle.distractors < 0 or cfg.oracle.distractor_width < 1 or cfg.oracle.noise < 0:
        fail('oracle', 'distractors', 'distractors and noise must be non-negative, width positive')
    for section, validate in (('probe', cfg.probe.validate), ('mlp', cfg.mlp.validate)):
        try:
            validate()
        except DistillationError as error:
            key = error.context.get('key') or next(iter(error.context), None)
            fail(section, key, error.message)


def render_config(cfg: ExperimentConfig) -> str:
    chunks = []
    for section in SECTIONS:
        values = getattr(cfg, section)
        chunks.append(f'[{section}]')
        for key in _section_keys(section):
            chunks.append(f'{key} = {_format(getattr(values, key))}')
        chunks.append('')
    return '\n'.join(chunks)


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of the canonical text; where outputs go and how many jobs run do not count"""
    keyed = replace(cfg, experiment=replace(cfg.experiment, output_dir='', n_jobs=1))
    return hashlib.sha256(render_config(keyed).encode('utf-8')).hexdigest()[:16]
