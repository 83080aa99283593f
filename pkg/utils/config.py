"""
Run configuration: one flat ``key=value`` text file that fully determines a run.

Values are layered preset < config file < command-line flags. All
randomness derives from the single ``seed`` key through ``derive_seed``.
"""
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from utils.classifier import ForestConfig, MiningConfig
from utils.cloud_io import ClassCatalog, read_text
from utils.errors import ParameterError, ParseError, StorageError
from utils.features import INDOOR, OUTDOOR, ScaleConfig
from utils.strategies import TrainingStrategy

logger = logging.getLogger(__name__)

PRESETS = {'outdoor': OUTDOOR, 'indoor': INDOOR}

SEED_PURPOSES = {'sampling': 1, 'forest': 2, 'mining': 3, 'trials': 4}


def derive_seed(seed, purpose):
    """Independent 32-bit seed for one use of the top-level seed."""
    if purpose not in SEED_PURPOSES:
        raise ParameterError(f"unknown seed purpose {purpose!r}")
    return int(np.random.SeedSequence([seed, SEED_PURPOSES[purpose]]).generate_state(1)[0])


def _optional_int(text):
    return None if text.strip().lower() in ('', 'none') else int(text)


def _optional_float(text):
    return None if text.strip().lower() in ('', 'none') else float(text)


def _boolean(text):
    lowered = text.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    preset: str = 'outdoor'
    r0: float = OUTDOOR.r0
    n_scales: int = OUTDOOR.n_scales
    phi: float = OUTDOOR.phi
    rho: float = OUTDOOR.rho
    n_trees: int = 100
    max_depth: int | None = 25
    min_samples_leaf: int = 1
    features_per_split: int | None = None
    bootstrap: bool = True
    initial_per_class: int = 1000
    rounds: int = 5
    add_per_round: int | None = None
    budget: int = 50000
    n_per_class: int = 1000
    strategy: str = TrainingStrategy.balanced.name
    trials: int = 20
    rhos: str = '1,2,3,4,5'
    cell_size: float | None = None
    classes: str = ''
    ignored_id: int = 0
    seed: int = 0
    threads: int = 1
    cloud: str = ''
    labels: str = ''
    features: str = ''
    model: str = ''
    output: str = ''
    queries: str = ''

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ParameterError(f"unknown preset {self.preset!r}, expected one of {sorted(PRESETS)}")
        if self.seed < 0:
            raise ParameterError(f"seed must be non-negative, got {self.seed}")
        if self.threads < 1:
            raise ParameterError(f"threads must be at least 1, got {self.threads}")
        if self.n_per_class < 1:
            raise ParameterError(f"n_per_class must be positive, got {self.n_per_class}")
        if self.strategy not in TrainingStrategy.__members__:
            choices = list(TrainingStrategy.__members__)
            raise ParameterError(f"unknown strategy {self.strategy!r}, expected one of {choices}")
        if self.trials < 2:
            raise ParameterError(f"trials must be at least 2, got {self.trials}")
        if self.cell_size is not None and not self.cell_size > 0:
            raise ParameterError(f"cell_size must be positive, got {self.cell_size}")
        # building the parts validates them
        _ = (self.scale_config, self.forest_config, self.mining_config, self.rho_values)

    @property
    def scale_config(self):
        return ScaleConfig(self.r0, self.n_scales, self.phi, self.rho)

    @property
    def forest_config(self):
        return ForestConfig(self.n_trees, self.max_depth, self.min_samples_leaf, self.features_per_split,
                            self.bootstrap, derive_seed(self.seed, 'forest'))

    @property
    def mining_config(self):
        return MiningConfig(self.initial_per_class, self.rounds, self.add_per_round, self.budget,
                            derive_seed(self.seed, 'mining'))

    @property
    def training_strategy(self):
        return TrainingStrategy[self.strategy]

    @property
    def rho_values(self):
        """The ``rhos`` list as floats."""
        try:
            values = [float(v) for v in self.rhos.split(',') if v.strip()]
        except ValueError:
            raise ParameterError(f"bad rho list {self.rhos!r}") from None
        if not values:
            raise ParameterError("empty rho list")
        return values

    @property
    def sampling_seed(self):
        return derive_seed(self.seed, 'sampling')

    @property
    def trials_seed(self):
        return derive_seed(self.seed, 'trials')

    def catalog(self, labels=None):
        """Configured class catalog, or one read off ``labels`` when none is configured."""
        if self.classes:
            return ClassCatalog.parse(self.classes, self.ignored_id)
        if labels is None:
            raise ParameterError("no classes configured and no labels to infer them from")
        return ClassCatalog.from_labels(labels, self.ignored_id)

    @classmethod
    def from_mapping(cls, values):
        """Build from key -> value, converting strings to the field types."""
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ParameterError(f"unknown config keys: {', '.join(unknown)}")
        converted = {}
        for key, value in values.items():
            if isinstance(value, str):
                try:
                    value = CONVERTERS[key](value)
                except ValueError as exc:
                    raise ParameterError(f"bad value for {key}: {exc}") from None
            converted[key] = value
        return cls(**converted)

    def to_text(self):
        return ''.join(f"{f.name}={_format_value(getattr(self, f.name))}\n" for f in fields(self))


def _format_value(value):
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return str(value).lower()
    return str(value)


CONVERTERS = {
    'preset': str.strip, 'r0': float, 'n_scales': int, 'phi': float, 'rho': float,
    'n_trees': int, 'max_depth': _optional_int, 'min_samples_leaf': int,
    'features_per_split': _optional_int, 'bootstrap': _boolean,
    'initial_per_class': int, 'rounds': int, 'add_per_round': _optional_int, 'budget': int,
    'n_per_class': int, 'strategy': str.strip, 'trials': int, 'rhos': str.strip, 'cell_size': _optional_float,
    'classes': str.strip, 'ignored_id': int, 'seed': int, 'threads': int,
    'cloud': str.strip, 'labels': str.strip, 'features': str.strip, 'model': str.strip, 'output': str.strip,
    'queries': str.strip,
}


def parse_config_text(text):
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise ParseError(f"expected key=value, got {raw.strip()!r}", line=number)
        key = key.strip().replace('-', '_')
        if key not in CONVERTERS:
            raise ParameterError(f"line {number}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def load_config_file(path):
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"no such config file: {path}")
    return parse_config_text(read_text(path))


def resolve_config(file_values=None, overrides=None):
    """Layer preset, file values and overrides (``None`` overrides are skipped)."""
    file_values = dict(file_values or {})
    overrides = {key: value for key, value in (overrides or {}).items() if value is not None}
    preset = overrides.get('preset') or file_values.get('preset') or 'outdoor'
    if preset not in PRESETS:
        raise ParameterError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
    base = PRESETS[preset]
    merged = {'preset': preset, 'r0': base.r0, 'n_scales': base.n_scales, 'phi': base.phi, 'rho': base.rho}
    merged.update(file_values)
    merged.update(overrides)
    config = RunConfig.from_mapping(merged)
    logger.debug("Run configuration:\n%s", config.to_text())
    return config
