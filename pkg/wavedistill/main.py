"""The main class.

For the entrypoint, see cli.py.
"""

from __future__ import annotations

import logging
import threading
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

from . import __version__
from .config import CommandConfig, apply_overrides, validate_config
from .detector import DetectorParams, DetectorSpec, forward, init_detector
from .distill import BANDS, AmplifierSet, DistillConfig, build_amplifiers, distill_student, train_high_amplifier
from .reporters import write_json, write_trace
from .scenes import SPLITS, SceneDataset, generate_dataset
from .storage import CheckpointStorage, DatasetStorage, YamlConfigStorage
from .tensor import dump
from .training import EvaluationConfig, SGDConfig, train_detector
from .wavelet import dwt2d

logger = logging.getLogger(__name__)

GAMMAS = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75)
SWEEP_MODES = ('spectral', 'stream')


class Variant(NamedTuple):
    """A named set of overrides of the ``distill`` configuration section."""

    name: str
    settings: Dict[str, Any]


def ablation_variants() -> List[Variant]:
    """The undistilled baseline and every combination of stream, band and (for the explicit stream) DISW."""
    variants = [Variant('baseline', {'explicit': False, 'implicit': False})]
    for stream, explicit, implicit in (('explicit', True, False), ('implicit', False, True), ('both', True, True)):
        for band in BANDS:
            for disw in (True, False) if explicit else (False,):
                name = f'{stream}-{band}' + (('-disw' if disw else '-nodisw') if explicit else '')
                settings = {'explicit': explicit, 'implicit': implicit, 'band': band, 'disw': disw}
                variants.append(Variant(name, settings))
    return variants


def sweep_variants() -> List[Variant]:
    """Every gamma of both sweep modes."""
    return [
        Variant(f'{mode}-gamma-{gamma:g}', {'gamma_mode': mode, 'gamma': gamma})
        for mode in SWEEP_MODES
        for gamma in GAMMAS
    ]


REFERENCE = Variant('reference', {'gamma_mode': 'none', 'gamma': 1.0})


class Experiment(object):
    """Owns the validated configuration and the storages of one output directory; trains what is missing."""

    def __init__(self, command_config: CommandConfig, config_storage: YamlConfigStorage) -> None:
        self.command_config = command_config
        self.config_storage = config_storage
        logger.info(f'Config file is {command_config.config}')
        if command_config.overrides:
            logger.info(f'Command-line overrides: {", ".join(command_config.overrides)}')

        self.config: Dict[str, Any] = validate_config(apply_overrides(config_storage.config, command_config))
        self.output_dir = Path(self.config['output_dir'])
        self.checkpoints = CheckpointStorage(self.output_dir.joinpath('checkpoints'))
        self.datasets = DatasetStorage(self.output_dir.joinpath('data'))
        self.optimizer = SGDConfig.from_config(self.config['optimizer'])
        self.evaluation = EvaluationConfig.from_config(self.config['evaluation'])
        self.distill_config = DistillConfig.from_config(self.config['distill'])
        logger.info(f'Output directory is {self.output_dir}')

        self._lock = threading.RLock()
        self._datasets: Dict[str, SceneDataset] = {}
        self._teacher: Optional[DetectorParams] = None
        self._amplifiers: Dict[str, AmplifierSet] = {}

    @property
    def seeds(self) -> List[int]:
        return list(self.config['seeds'])

    @property
    def base_seed(self) -> int:
        """Seed of everything shared by all runs: datasets, teacher and amplifiers."""
        return int(self.config['dataset']['seed'])

    def spec(self, width: int) -> DetectorSpec:
        detector, dataset = self.config['detector'], self.config['dataset']
        return DetectorSpec.from_width(width, detector['pyramid_width'], dataset['num_classes'])

    def distill_settings(self, variant: Variant) -> Dict[str, Any]:
        return self.distill_config._replace(**variant.settings)._asdict()

    # datasets

    def generate_data(self, splits: Optional[List[str]] = None) -> List[SceneDataset]:
        cfg = self.config['dataset']
        sizes = {'train': cfg['train_size'], 'val': cfg['val_size']}
        generated = []
        for split in splits or list(SPLITS):
            dataset = generate_dataset(sizes[split], cfg['scene_size'], cfg['num_classes'], cfg['seed'], split)
            self.datasets.save(dataset)
            with self._lock:
                self._datasets[split] = dataset
            generated.append(dataset)
        return generated

    def dataset(self, split: str) -> SceneDataset:
        """The split from memory or disk, generated if missing or generated with other settings."""
        with self._lock:
            if split not in self._datasets:
                cfg = self.config['dataset']
                expected = {'train': cfg['train_size'], 'val': cfg['val_size']}[split]
                dataset = self.datasets.load(split) if self.datasets.exists(split) else None
                if dataset is not None and (
                    len(dataset) != expected
                    or dataset.scene_size != cfg['scene_size']
                    or dataset.num_classes != cfg['num_classes']
                    or dataset.seed != cfg['seed']
                ):
                    logger.warning(f'Stored {dataset!r} does not match the configuration; regenerating')
                    dataset = None
                if dataset is None:
                    dataset = self.generate_data([split])[0]
                self._datasets[split] = dataset
            return self._datasets[split]

    # teacher and amplifiers

    def train_teacher(self) -> DetectorParams:
        spec = self.spec(self.config['detector']['teacher_width'])
        params, result = train_detector(
            init_detector(spec, self.base_seed),
            self.dataset('train'),
            self.optimizer,
            self.config['optimizer']['teacher_epochs'],
            self.base_seed,
            self.dataset('val'),
            self.evaluation,
            label='teacher',
        )
        self.checkpoints.save_detector('teacher', params, self.teacher_provenance())
        directory = self.output_dir.joinpath('teacher')
        directory.mkdir(parents=True, exist_ok=True)
        write_trace(directory.joinpath('trace.csv'), result.epochs)
        write_json(
            directory.joinpath('summary.json'),
            {
                'version': __version__,
                'spec': spec._asdict(),
                'final_val_ap50': result.epochs[-1]['val_ap50'] if result.epochs else None,
                'checksum': params.checksum(),
            },
        )
        with self._lock:
            self._teacher = params
        return params

    def teacher_provenance(self) -> Dict[str, Any]:
        """Everything the teacher checkpoint depends on."""
        optimizer = {k: v for k, v in self.config['optimizer'].items() if k != 'student_epochs'}
        return {
            'dataset': dict(self.config['dataset']),
            'teacher_width': self.config['detector']['teacher_width'],
            'pyramid_width': self.config['detector']['pyramid_width'],
            'optimizer': optimizer,
        }

    def teacher(self) -> DetectorParams:
        """The teacher from memory or disk, trained if missing or trained with other settings."""
        with self._lock:
            if self._teacher is None:
                if self.checkpoints.provenance('teacher') == self.teacher_provenance():
                    self._teacher = self.checkpoints.load_detector('teacher')
                elif self.checkpoints.exists('teacher'):
                    logger.warning('Stored teacher was trained with other settings; retraining')
                    self._teacher = self.train_teacher()
                else:
                    logger.info('No teacher checkpoint found; training one')
                    self._teacher = self.train_teacher()
            return self._teacher

    def train_amplifier(self, basis: Optional[str] = None) -> AmplifierSet:
        basis = basis or self.distill_config.basis
        teacher = self.teacher()
        epochs = self.distill_config.amplifier_epochs
        head, result = train_high_amplifier(
            teacher,
            self.dataset('train'),
            epochs,
            self.optimizer,
            self.base_seed,
            basis,
            self.dataset('val'),
            self.evaluation,
        )
        name = f'amplifier-{basis}'
        self.checkpoints.save_head(name, head, self.amplifier_provenance(basis, teacher))
        directory = self.output_dir.joinpath(name)
        directory.mkdir(parents=True, exist_ok=True)
        write_trace(directory.joinpath('trace.csv'), result.epochs)
        write_json(
            directory.joinpath('summary.json'),
            {
                'version': __version__,
                'basis': basis,
                'epochs': epochs,
                'final_val_ap50': result.epochs[-1]['val_ap50'] if result.epochs else None,
            },
        )
        amplifiers = build_amplifiers(teacher, head)
        with self._lock:
            self._amplifiers[basis] = amplifiers
        return amplifiers

    def amplifier_provenance(self, basis: str, teacher: DetectorParams) -> Dict[str, Any]:
        """Everything a high-frequency amplifier checkpoint depends on."""
        optimizer = {k: v for k, v in self.config['optimizer'].items() if k not in ('teacher_epochs', 'student_epochs')}
        return {
            'teacher': teacher.checksum(),
            'dataset': dict(self.config['dataset']),
            'basis': basis,
            'amplifier_epochs': self.distill_config.amplifier_epochs,
            'optimizer': optimizer,
        }

    def amplifiers(self, basis: str) -> AmplifierSet:
        with self._lock:
            if basis not in self._amplifiers:
                name = f'amplifier-{basis}'
                teacher = self.teacher()
                if self.checkpoints.provenance(name) == self.amplifier_provenance(basis, teacher):
                    self._amplifiers[basis] = build_amplifiers(teacher, self.checkpoints.load_head(name))
                elif self.checkpoints.exists(name):
                    logger.warning(f'Stored {name} was trained with other settings or another teacher; retraining')
                    self._amplifiers[basis] = self.train_amplifier(basis)
                else:
                    logger.info(f'No {name} checkpoint found; training one')
                    self._amplifiers[basis] = self.train_amplifier(basis)
            return self._amplifiers[basis]

    def prepare(self, variants: List[Variant]) -> None:
        """Loads or builds everything the variants share, before they run concurrently."""
        self.dataset('train')
        self.dataset('val')
        configs = [DistillConfig(**self.distill_settings(v)) for v in variants]
        if self.command_config.dump_features or any(c.active for c in configs):
            self.teacher()
        for basis in sorted({c.basis for c in configs if c.active and c.implicit}):
            self.amplifiers(basis)

    # students

    def run_student(self, variant: Variant, seed: int, run_dir: Path) -> Tuple[DetectorParams, List[Dict[str, float]]]:
        """Trains one student and writes its trace, summary and checkpoint under ``run_dir``."""
        config = DistillConfig(**self.distill_settings(variant))
        config.validate()
        teacher = self.teacher() if config.active or self.command_config.dump_features else None
        amplifiers = self.amplifiers(config.basis) if config.active and config.implicit else None
        result = distill_student(
            teacher,
            init_detector(self.spec(self.config['detector']['student_width']), seed),
            self.dataset('train'),
            amplifiers,
            config,
            self.optimizer,
            self.config['optimizer']['student_epochs'],
            seed,
            self.dataset('val'),
            self.evaluation,
            label=f'{variant.name}/seed-{seed}',
        )
        run_dir.mkdir(parents=True, exist_ok=True)
        records = result.train.epochs
        write_trace(run_dir.joinpath('trace.csv'), records)
        write_json(
            run_dir.joinpath('summary.json'),
            {
                'version': __version__,
                'variant': variant.name,
                'seed': seed,
                'settings': config._asdict(),
                'final': records[-1] if records else None,
                'checksum': result.params.checksum(),
            },
        )
        CheckpointStorage(run_dir).save_detector('student', result.params)
        if teacher is not None and self.command_config.dump_features:
            self.dump_features(teacher, result.params, config.basis, run_dir.joinpath('features'))
        return result.params, records

    def dump_features(self, teacher: DetectorParams, student: DetectorParams, basis: str, directory: Path) -> None:
        """Dumps the pyramid levels of the first validation scene and their wavelet bands."""
        directory.mkdir(parents=True, exist_ok=True)
        image = self.dataset('val').images[:1]
        for role, params in (('teacher', teacher), ('student', student)):
            for stride, level in zip((4, 8), forward(params, image, with_head=False).pyramid):
                bands = dwt2d(level[0], basis)
                dump(level[0], directory.joinpath(f'{role}_p{stride}.tensor'))
                dump(bands.low, directory.joinpath(f'{role}_p{stride}_low.tensor'))
                dump(bands.high, directory.joinpath(f'{role}_p{stride}_high.tensor'))
        logger.info(f'Dumped features to {directory}')
