"""Handles all storage: the experiment configuration file, detector checkpoints and generated datasets."""

from __future__ import annotations

import copy
import json
import logging
import os
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import msgpack
import numpy as np
import yaml

from . import __docs_url__, __project_name__, __version__
from .detector import DetectorParams, DetectorSpec, Params
from .disw import read_annotations, write_annotations
from .scenes import SceneDataset
from .tensor import TensorFormatError, dump, load
from .util import checksum

logger = logging.getLogger(__name__)

DEFAULT_CONFIG: Dict[str, Any] = {
    'seeds': [0, 1, 2],
    'output_dir': 'wavedistill-out',
    'workers': 1,
    'dataset': {
        'train_size': 512,
        'val_size': 128,
        'scene_size': 64,
        'num_classes': 3,
        'seed': 0,
    },
    'detector': {
        'teacher_width': 32,
        'student_width': 12,
        'pyramid_width': 16,
    },
    'optimizer': {
        'lr': 0.01,
        'momentum': 0.9,
        'weight_decay': 1e-4,
        'batch_size': 16,
        'teacher_epochs': 20,
        'student_epochs': 12,
        'grad_clip': 0.0,  # 0 disables clipping
    },
    'distill': {
        'alpha': 1e-3,
        'beta': 1e-3,
        'lambda': 1e-2,
        'mu': 1e-2,
        'gamma': 1.0,
        'gamma_mode': 'none',  # none, spectral or stream
        'amplifier_epochs': 10,
        'explicit': True,
        'implicit': True,
        'disw': True,
        'band': 'both',  # low, high or both
        'basis': 'haar',  # haar, db4 or sym4
    },
    'evaluation': {
        'score_threshold': 0.3,
        'nms_iou': 0.5,
        'smooth_l1_beta': 1.0,
    },
}

# Published hyperparameters of full-scale detectors on aerial benchmarks; the toy task has its own scale, so these
# are starting points for retuning, not drop-in values.
PRESETS: Dict[str, Dict[str, Any]] = {
    'toy': {},
    # RetinaNet on DIOR, SGD lr 0.005
    'retinanet-dior': {
        'optimizer': {'lr': 0.005},
        'distill': {'alpha': 1e-5, 'beta': 1e-5, 'lambda': 1.0, 'mu': 1.0},
    },
    # RetinaNet on DOTA, SGD lr 0.005
    'retinanet-dota': {
        'optimizer': {'lr': 0.005},
        'distill': {'alpha': 7e-5, 'beta': 5e-5, 'lambda': 0.7, 'mu': 0.5},
    },
    # Faster R-CNN on DIOR, SGD lr 0.02
    'faster-rcnn-dior': {
        'optimizer': {'lr': 0.02},
        'distill': {'alpha': 0.5, 'beta': 0.5, 'lambda': 1e-5, 'mu': 1e-5},
    },
    # Faster R-CNN on DOTA, SGD lr 0.02
    'faster-rcnn-dota': {
        'optimizer': {'lr': 0.02},
        'distill': {'alpha': 0.12, 'beta': 1.2, 'lambda': 1.5e-3, 'mu': 3e-3},
    },
}

MANIFEST = 'manifest.json'
TENSOR_SUFFIX = '.tensor'


def dict_deep_merge(source: dict, destination: dict) -> dict:
    """Deep merges source dict into destination dict."""
    for key, value in source.items():
        if isinstance(value, dict) and isinstance(destination.get(key, {}), dict):
            node = destination.setdefault(key, {})
            dict_deep_merge(value, node)
        else:
            destination[key] = value

    return destination


class BaseStorage(ABC):
    @abstractmethod
    def load(self, *args: Any) -> Any:
        ...

    @abstractmethod
    def save(self, *args: Any, **kwargs: Any) -> Any:
        ...


class BaseFileStorage(BaseStorage, ABC):
    def __init__(self, filename: Optional[Union[str, os.PathLike]]) -> None:
        self.filename = Path(filename) if filename is not None else None


class YamlConfigStorage(BaseFileStorage):
    """The experiment configuration: ``DEFAULT_CONFIG``, overlaid by the YAML file, overlaid by a preset chosen on the
    command line."""

    def __init__(self, filename: Optional[Union[str, os.PathLike]], preset: Optional[str] = None) -> None:
        super().__init__(filename)
        if preset is not None and preset not in PRESETS:
            raise ValueError(f'Unknown preset {preset!r} (supported: {", ".join(PRESETS)})')
        self.preset = preset
        self.config: Dict[str, Any] = {}
        self.load()

    @classmethod
    def parse(cls, filename: Optional[Path]) -> Any:
        """Return contents of YAML file if it exists"""
        if filename is not None and filename.is_file():
            with open(filename) as fp:
                return yaml.safe_load(fp)
        return None

    def load(self, *args: Any) -> None:
        config = dict_deep_merge(self.parse(self.filename) or {}, copy.deepcopy(DEFAULT_CONFIG))
        if self.preset:
            dict_deep_merge(copy.deepcopy(PRESETS[self.preset]), config)
        self.config = config

    def save(self, *args: Any, **kwargs: Any) -> None:
        """Save self.config into self.filename using YAML."""
        with open(self.filename, 'w') as fp:  # type: ignore[arg-type]
            fp.write(f'# {__project_name__} configuration file. See {__docs_url__}configuration.html\n')
            yaml.safe_dump(self.config, fp, default_flow_style=False, sort_keys=False, allow_unicode=True)

    @classmethod
    def write_default_config(cls, filename: Path) -> None:
        config_storage = cls(None)
        config_storage.filename = filename
        config_storage.save()


class CheckpointStorage(BaseFileStorage):
    """Named checkpoints in a directory: ``<name>/manifest.json`` plus one tensor dump per parameter."""

    def __init__(self, dirname: Union[str, os.PathLike]) -> None:
        super().__init__(dirname)

    def _dir(self, name: str) -> Path:
        return self.filename.joinpath(name)  # type: ignore[union-attr]

    def exists(self, name: str) -> bool:
        return self._dir(name).joinpath(MANIFEST).is_file()

    def save(self, name: str, tensors: Params, layout: Dict[str, Any]) -> Path:  # type: ignore[override]
        directory = self._dir(name)
        directory.mkdir(parents=True, exist_ok=True)
        for param, value in tensors.items():
            dump(value, directory.joinpath(param + TENSOR_SUFFIX))
        manifest = {
            'version': __version__,
            'layout': layout,
            'parameters': [{'name': param, 'shape': list(value.shape)} for param, value in tensors.items()],
            'sha256': checksum(tensors.items()),
        }
        directory.joinpath(MANIFEST).write_text(json.dumps(manifest, indent=2) + '\n')
        logger.info(f'Saved checkpoint {name} ({len(tensors)} tensors) to {directory}')
        return directory

    def provenance(self, name: str) -> Optional[Dict[str, Any]]:
        """The settings a checkpoint was trained with, as recorded in its manifest; None if missing or unrecorded."""
        if not self.exists(name):
            return None
        manifest = json.loads(self._dir(name).joinpath(MANIFEST).read_text())
        return manifest['layout'].get('provenance')

    def load(self, name: str) -> Tuple[Dict[str, Any], Params]:  # type: ignore[override]
        directory = self._dir(name)
        manifest = json.loads(directory.joinpath(MANIFEST).read_text())
        tensors = {}
        for entry in manifest['parameters']:
            value = load(directory.joinpath(entry['name'] + TENSOR_SUFFIX))
            if list(value.shape) != entry['shape']:
                raise TensorFormatError(
                    f'Checkpoint {name}: {entry["name"]} has shape {list(value.shape)}, manifest says {entry["shape"]}'
                )
            tensors[entry['name']] = value
        if checksum(tensors.items()) != manifest['sha256']:
            raise TensorFormatError(f'Checkpoint {name}: checksum mismatch')
        logger.debug(f'Loaded checkpoint {name} from {directory}')
        return manifest['layout'], tensors

    def save_detector(self, name: str, params: DetectorParams, provenance: Optional[Dict[str, Any]] = None) -> Path:
        layout: Dict[str, Any] = {'kind': 'detector', 'spec': params.spec._asdict()}
        if provenance is not None:
            layout['provenance'] = provenance
        return self.save(name, params.tensors, layout)

    def load_detector(self, name: str) -> DetectorParams:
        layout, tensors = self.load(name)
        if layout.get('kind') != 'detector':
            raise TensorFormatError(f'Checkpoint {name} holds a {layout.get("kind")}, not a detector')
        spec = layout['spec']
        return DetectorParams(
            DetectorSpec(
                backbone_widths=tuple(spec['backbone_widths']),  # type: ignore[arg-type]
                pyramid_width=spec['pyramid_width'],
                num_classes=spec['num_classes'],
                in_channels=spec['in_channels'],
            ),
            tensors,
        )

    def save_head(self, name: str, head: Params, provenance: Optional[Dict[str, Any]] = None) -> Path:
        layout: Dict[str, Any] = {'kind': 'head'}
        if provenance is not None:
            layout['provenance'] = provenance
        return self.save(name, head, layout)

    def load_head(self, name: str) -> Params:
        layout, tensors = self.load(name)
        if layout.get('kind') != 'head':
            raise TensorFormatError(f'Checkpoint {name} holds a {layout.get("kind")}, not a head')
        return tensors


class DatasetStorage(BaseFileStorage):
    """Dataset splits as ``<split>.msgpack`` (images) plus ``<split>_annotations.jsonl``."""

    def __init__(self, dirname: Union[str, os.PathLike]) -> None:
        super().__init__(dirname)

    def _paths(self, split: str) -> Tuple[Path, Path]:
        return (
            self.filename.joinpath(f'{split}.msgpack'),  # type: ignore[union-attr]
            self.filename.joinpath(f'{split}_annotations.jsonl'),  # type: ignore[union-attr]
        )

    def exists(self, split: str) -> bool:
        return all(path.is_file() for path in self._paths(split))

    def save(self, dataset: SceneDataset) -> None:  # type: ignore[override]
        self.filename.mkdir(parents=True, exist_ok=True)  # type: ignore[union-attr]
        images_path, annotations_path = self._paths(dataset.split)
        record = {
            'format': 1,
            'split': dataset.split,
            'scene_size': dataset.scene_size,
            'num_classes': dataset.num_classes,
            'seed': dataset.seed,
            'images': [np.ascontiguousarray(image, dtype='<f8').tobytes() for image in dataset.images],
        }
        images_path.write_bytes(msgpack.packb(record, use_bin_type=True))
        write_annotations(annotations_path, dict(enumerate(dataset.annotations)))
        logger.info(f'Saved {dataset!r} to {images_path}')

    def load(self, split: str) -> SceneDataset:  # type: ignore[override]
        images_path, annotations_path = self._paths(split)
        record = msgpack.unpackb(images_path.read_bytes(), raw=False)
        size = record['scene_size']
        images: List[np.ndarray] = []
        for raw in record['images']:
            if len(raw) != 3 * size * size * 8:
                raise TensorFormatError(f'{images_path}: image payload of {len(raw)} bytes for scene size {size}')
            images.append(np.frombuffer(raw, dtype='<f8').reshape(3, size, size).astype(np.float64))
        annotations = read_annotations(annotations_path)
        dataset = SceneDataset(
            np.stack(images),
            [annotations.get(i, []) for i in range(len(images))],
            record['num_classes'],
            record['seed'],
            record['split'],
        )
        logger.info(f'Loaded {dataset!r} from {images_path}')
        return dataset
