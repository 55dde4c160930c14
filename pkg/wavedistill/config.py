"""Command-line configuration and validation of the experiment configuration."""

import argparse
import copy
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from . import __doc__, __project_name__, __version__
from .distill import BANDS, GAMMA_MODES
from .scenes import SPLITS
from .storage import PRESETS
from .wavelet import available_bases, get_basis

SUBCOMMANDS = ('gen-data', 'train-teacher', 'train-amplifier', 'distill', 'ablate', 'sweep-gamma', 'gradcheck')


class ConfigError(ValueError):
    """Exception raised when the experiment configuration is invalid; holds one diagnostic per offending key."""

    def __init__(self, diagnostics: Sequence[str]) -> None:
        ValueError.__init__(self)
        self.diagnostics = list(diagnostics)

    def __str__(self) -> str:
        return f'{self.__class__.__name__}: invalid configuration:\n' + '\n'.join(
            f'  {line}' for line in self.diagnostics
        )


Check = Callable[[Any], Optional[str]]


def _integer(minimum: int) -> Check:
    def check(value: Any) -> Optional[str]:
        if not isinstance(value, int) or isinstance(value, bool):
            return f'must be an integer, got {value!r}'
        if value < minimum:
            return f'must be >= {minimum}, got {value}'
        return None

    return check


def _real(minimum: float = 0.0, maximum: Optional[float] = None, strict: bool = False) -> Check:
    def check(value: Any) -> Optional[str]:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            return f'must be a number, got {value!r}'
        if value < minimum or (strict and value == minimum):
            return f'must be {">" if strict else ">="} {minimum}, got {value}'
        if maximum is not None and value > maximum:
            return f'must be <= {maximum}, got {value}'
        return None

    return check


def _boolean(value: Any) -> Optional[str]:
    return None if isinstance(value, bool) else f'must be true or false, got {value!r}'


def _choice(choices: Sequence[str]) -> Check:
    def check(value: Any) -> Optional[str]:
        return None if value in choices else f'must be one of {", ".join(choices)}; got {value!r}'

    return check


def _text(value: Any) -> Optional[str]:
    return None if isinstance(value, str) and value else f'must be a non-empty string, got {value!r}'


def _seeds(value: Any) -> Optional[str]:
    if not isinstance(value, list) or not value:
        return f'must be a non-empty list of integers, got {value!r}'
    for seed in value:
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            return f'must hold non-negative integers, got {seed!r}'
    if len(set(value)) != len(value):
        return f'must not repeat seeds, got {value}'
    return None


def _scene_size(value: Any) -> Optional[str]:
    problem = _integer(16)(value)
    if problem is None and value % 16:
        return f'must be divisible by 16 (the coarsest pyramid level is decomposed), got {value}'
    return problem


SCHEMA: Dict[str, Any] = {
    'seeds': _seeds,
    'output_dir': _text,
    'workers': _integer(1),
    'dataset': {
        'train_size': _integer(1),
        'val_size': _integer(1),
        'scene_size': _scene_size,
        'num_classes': _integer(1),
        'seed': _integer(0),
    },
    'detector': {
        'teacher_width': _integer(1),
        'student_width': _integer(1),
        'pyramid_width': _integer(1),
    },
    'optimizer': {
        'lr': _real(),
        'momentum': _real(0.0, 1.0),
        'weight_decay': _real(),
        'batch_size': _integer(1),
        'teacher_epochs': _integer(0),
        'student_epochs': _integer(0),
        'grad_clip': _real(),
    },
    'distill': {
        'alpha': _real(),
        'beta': _real(),
        'lambda': _real(),
        'mu': _real(),
        'gamma': _real(0.0, 2.0),
        'gamma_mode': _choice(GAMMA_MODES),
        'amplifier_epochs': _integer(0),
        'explicit': _boolean,
        'implicit': _boolean,
        'disw': _boolean,
        'band': _choice(BANDS),
        'basis': _choice(available_bases()),
    },
    'evaluation': {
        'score_threshold': _real(0.0, 1.0),
        'nms_iou': _real(0.0, 1.0),
        'smooth_l1_beta': _real(0.0, strict=True),
    },
}


def _walk(config: Any, schema: Dict[str, Any], prefix: str, diagnostics: List[str]) -> None:
    if not isinstance(config, dict):
        diagnostics.append(f'{prefix.rstrip(".") or "<root>"}: must be a mapping, got {config!r}')
        return
    for key in config:
        if key not in schema:
            diagnostics.append(f'unknown key: {prefix}{key}')
    for key, check in schema.items():
        if key not in config:
            diagnostics.append(f'{prefix}{key}: missing')
        elif isinstance(check, dict):
            _walk(config[key], check, f'{prefix}{key}.', diagnostics)
        else:
            problem = check(config[key])
            if problem:
                diagnostics.append(f'{prefix}{key}: {problem}')


def validate_config(config: Dict[str, Any]) -> Dict[str, Any]:
    """Checks every key of a merged experiment configuration; raises ConfigError listing all problems at once."""
    diagnostics: List[str] = []
    _walk(config, SCHEMA, '', diagnostics)
    if not diagnostics:
        coarsest = config['dataset']['scene_size'] // 8
        taps = get_basis(config['distill']['basis']).length
        if coarsest < taps:
            diagnostics.append(
                f'dataset.scene_size: the coarsest pyramid level ({coarsest}x{coarsest}) is shorter than the '
                f'{config["distill"]["basis"]} filter ({taps} taps); use a scene size of at least {8 * taps}'
            )
    if diagnostics:
        raise ConfigError(diagnostics)
    return config


def apply_overrides(config: Dict[str, Any], command_config: 'CommandConfig') -> Dict[str, Any]:
    """Returns a copy of ``config`` with the command-line flags applied (flags take precedence over the file)."""
    config = copy.deepcopy(config)
    if command_config.seed is not None:
        config['seeds'] = [command_config.seed]
    if command_config.out is not None:
        config['output_dir'] = str(command_config.out)
    if command_config.workers is not None:
        config['workers'] = command_config.workers
    distill = config.setdefault('distill', {})
    if command_config.no_explicit:
        distill['explicit'] = False
    if command_config.no_implicit:
        distill['implicit'] = False
    if command_config.no_disw:
        distill['disw'] = False
    if command_config.band is not None:
        distill['band'] = command_config.band
    if command_config.basis is not None:
        distill['basis'] = command_config.basis
    return config


class BaseConfig(object):
    """Base configuration class."""

    def __init__(self, project_name: str, config_dir: Path, config: Path, verbose: bool) -> None:
        self.project_name = project_name
        self.config_dir = config_dir
        self.config = config
        self.verbose = verbose


class CommandConfig(BaseConfig):
    """Command line arguments configuration."""

    def __init__(
        self,
        project_name: str,
        config_dir: Path,
        config: Path,
        verbose: bool = False,
        args: Optional[Sequence[str]] = None,
    ) -> None:
        super().__init__(project_name, config_dir, config, verbose)
        self.subcommand: Optional[str] = None
        self.preset: Optional[str] = None
        self.seed: Optional[int] = None
        self.out: Optional[Path] = None
        self.workers: Optional[int] = None
        self.dump_features: bool = False
        self.no_explicit: bool = False
        self.no_implicit: bool = False
        self.no_disw: bool = False
        self.band: Optional[str] = None
        self.basis: Optional[str] = None
        self.split: Optional[str] = None
        self.features: bool = False
        self.log_level: str = 'DEBUG'

        if args is not None:
            self.parse_args(args)

    def parse_args(self, args: Optional[Sequence[str]] = None) -> argparse.ArgumentParser:
        """Python arguments parser; ``args=None`` parses ``sys.argv``."""
        parser = argparse.ArgumentParser(
            prog=self.project_name,
            description=__doc__.replace('\n\n', '--par--').replace('\n', ' ').replace('--par--', '\n\n'),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        parser.add_argument(
            'subcommand',
            nargs='?',
            choices=SUBCOMMANDS,
            help='what to run: ' + ', '.join(SUBCOMMANDS),
            metavar='SUBCOMMAND',
        )
        parser.add_argument('-V', '--version', action='version', version=f'{__project_name__} {__version__}')
        parser.add_argument('-v', '--verbose', action='store_true', help='show logging output')

        group = parser.add_argument_group('override file defaults')
        group.add_argument(
            '--config', default=self.config, type=Path, help='read configuration from FILE', metavar='FILE'
        )
        group.add_argument(
            '--preset',
            choices=list(PRESETS),
            help='apply a named hyperparameter preset on top of the configuration file',
        )
        group.add_argument('--seed', type=int, help='run this seed only instead of the configured list', metavar='N')
        group.add_argument('--out', type=Path, help='write all artifacts under DIR', metavar='DIR')
        group.add_argument('--workers', type=int, help='run up to N variants concurrently', metavar='N')

        group = parser.add_argument_group('distillation terms')
        group.add_argument('--no-explicit', action='store_true', help='switch off the explicit spectral loss')
        group.add_argument('--no-implicit', action='store_true', help='switch off the knowledge-amplifier loss')
        group.add_argument('--no-disw', action='store_true', help='weigh all cells of the explicit loss equally')
        group.add_argument('--band', choices=BANDS, help='distil the low band, the high band or both')
        group.add_argument('--basis', choices=available_bases(), help='wavelet basis of the decomposition')

        group = parser.add_argument_group('miscellaneous')
        group.add_argument(
            '--dump-features',
            action='store_true',
            help='dump teacher and student pyramid levels and their wavelet bands for the first validation scene',
        )
        group.add_argument('--split', choices=list(SPLITS), help='gen-data: generate this split only')
        group.add_argument('--features', action='store_true', help='list wavelet bases, presets and reporters')
        group.add_argument(
            '--log-level',
            default='DEBUG',
            choices=('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'),
            help='level of logging output if -v is selected (default: %(default)s)',
        )

        parsed = parser.parse_args(args)
        for arg in vars(parsed):
            setattr(self, arg, getattr(parsed, arg))
        if self.subcommand is None and not self.features:
            parser.error('a subcommand is required')

        return parser

    @property
    def overrides(self) -> Tuple[str, ...]:
        """The flags that change the experiment configuration, for logging."""
        names = ('seed', 'out', 'workers', 'no_explicit', 'no_implicit', 'no_disw', 'band', 'basis')
        return tuple(name for name in names if getattr(self, name) not in (None, False))
