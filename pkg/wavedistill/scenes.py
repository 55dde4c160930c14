"""Synthetic scenes of small, often densely packed, rectangular objects on a noisy background."""

from __future__ import annotations

import logging
from typing import Iterator, List, NamedTuple, Sequence

import numpy as np

from .detector import STRIDES
from .disw import ObjectAnnotation
from .tensor import ShapeError, Tensor, make_rng

logger = logging.getLogger(__name__)

CHANNELS = 3
NOISE_SIGMA = 0.1
MIN_OBJECTS, MAX_OBJECTS = 1, 8
MIN_SIZE, MAX_SIZE = 4, 16
CLUSTER_OBJECTS = (3, 5)
CLUSTER_SIZE = (4, 8)
CLUSTER_PROBABILITY = 0.5
SPLITS = {'train': 0, 'val': 1}


class SyntheticScene(NamedTuple):
    image: Tensor  # 3 x S x S
    annotations: List[ObjectAnnotation]
    seed: int
    index: int


def _solid(height: int, width: int) -> Tensor:
    return np.ones((height, width))


def _stripes(height: int, width: int) -> Tensor:
    return np.tile((np.arange(height) % 2 == 0)[:, np.newaxis], (1, width)).astype(np.float64)


def _checkerboard(height: int, width: int) -> Tensor:
    return ((np.arange(height)[:, np.newaxis] + np.arange(width)[np.newaxis, :]) % 2 == 0).astype(np.float64)


PATTERNS = (_solid, _stripes, _checkerboard)


def paint(image: Tensor, annotation: ObjectAnnotation) -> None:
    """Adds the fill pattern of the object's class: pattern ``class_id % 3`` in channel ``class_id % 3``."""
    x1, y1, x2, y2 = (int(v) for v in annotation.box)
    pattern = PATTERNS[annotation.class_id % len(PATTERNS)](y2 - y1, x2 - x1)
    image[annotation.class_id % CHANNELS, y1:y2, x1:x2] += pattern


def _random_box(rng: np.random.Generator, size: int, min_size: int, max_size: int) -> List[float]:
    width, height = (int(v) for v in rng.integers(min_size, max_size + 1, size=2))
    x1 = int(rng.integers(0, size - width + 1))
    y1 = int(rng.integers(0, size - height + 1))
    return [x1, y1, x1 + width, y1 + height]


def _cluster_boxes(rng: np.random.Generator, size: int, count: int) -> List[List[float]]:
    lo, hi = CLUSTER_SIZE
    hi = min(hi, size // 2)
    cx, cy = (int(v) for v in rng.integers(hi, size - hi + 1, size=2))
    boxes = []
    for _ in range(count):
        width, height = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        dx, dy = (int(v) for v in rng.integers(-lo, lo + 1, size=2))
        x1 = min(max(cx + dx - width // 2, 0), size - width)
        y1 = min(max(cy + dy - height // 2, 0), size - height)
        boxes.append([x1, y1, x1 + width, y1 + height])
    return boxes


def generate_scene(seed: int, index: int, size: int = 64, num_classes: int = 3) -> SyntheticScene:
    """Generates scene ``index`` of the stream ``seed``; identical arguments give an identical scene.

    Half of the scenes hold a dense cluster of 3-5 overlapping small boxes; the remaining objects (1-8 in total)
    are scattered with sides of 4-16 pixels (capped at half the scene size).
    """
    if size % max(STRIDES) or size < 2 * max(STRIDES):
        raise ShapeError(f'Scene size must be a multiple of {max(STRIDES)} and at least {2 * max(STRIDES)}, got {size}')
    if num_classes < 1:
        raise ValueError(f'Need at least one class, got {num_classes}')
    rng = make_rng(seed, index)
    image = rng.normal(0.0, NOISE_SIGMA, size=(CHANNELS, size, size))
    count = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    boxes: List[List[float]] = []
    if rng.random() < CLUSTER_PROBABILITY:
        boxes += _cluster_boxes(rng, size, int(rng.integers(CLUSTER_OBJECTS[0], CLUSTER_OBJECTS[1] + 1)))
    while len(boxes) < count:
        boxes.append(_random_box(rng, size, MIN_SIZE, min(MAX_SIZE, size // 2)))
    annotations = []
    for box in boxes:
        annotation = ObjectAnnotation(int(rng.integers(0, num_classes)), tuple(float(v) for v in box))
        paint(image, annotation)
        annotations.append(annotation)
    return SyntheticScene(image=image, annotations=annotations, seed=seed, index=index)


class SceneDataset(object):
    """A split of stacked scene images and their annotations."""

    def __init__(
        self,
        images: Tensor,
        annotations: Sequence[Sequence[ObjectAnnotation]],
        num_classes: int,
        seed: int,
        split: str = 'train',
    ) -> None:
        if images.ndim != 4 or images.shape[1] != CHANNELS or images.shape[2] != images.shape[3]:
            raise ShapeError(f'Expected N x {CHANNELS} x S x S images, got {images.shape}')
        if len(annotations) != images.shape[0]:
            raise ValueError(f'{len(annotations)} annotation lists for {images.shape[0]} images')
        self.images = images
        self.annotations = [list(a) for a in annotations]
        self.num_classes = num_classes
        self.seed = seed
        self.split = split

    def __repr__(self) -> str:
        return f'<SceneDataset {self.split} of {len(self)} scenes {self.scene_size}x{self.scene_size}>'

    def __len__(self) -> int:
        return self.images.shape[0]

    def __iter__(self) -> Iterator[SyntheticScene]:
        for i in range(len(self)):
            yield SyntheticScene(self.images[i], self.annotations[i], self.seed, i)

    @property
    def scene_size(self) -> int:
        return self.images.shape[-1]

    @property
    def image_size(self) -> tuple:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, indices: Sequence[int]) -> 'SceneDataset':
        indices = list(indices)
        return SceneDataset(
            self.images[indices], [self.annotations[i] for i in indices], self.num_classes, self.seed, self.split
        )

    def batch_annotations(self, indices: Sequence[int]) -> List[List[ObjectAnnotation]]:
        return [self.annotations[i] for i in indices]

    @property
    def num_objects(self) -> int:
        return sum(len(a) for a in self.annotations)


def generate_dataset(
    size: int, scene_size: int = 64, num_classes: int = 3, seed: int = 0, split: str = 'train'
) -> SceneDataset:
    """Generates ``size`` scenes; each split draws from its own stream so train and val never share a scene."""
    if split not in SPLITS:
        raise ValueError(f'Unknown split {split!r} (supported: {list(SPLITS)})')
    if size < 1:
        raise ValueError(f'Dataset size must be >= 1, got {size}')
    stream_seed = int(make_rng(seed, SPLITS[split]).integers(0, 2**63))
    scenes = [generate_scene(stream_seed, i, scene_size, num_classes) for i in range(size)]
    dataset = SceneDataset(
        np.stack([s.image for s in scenes]), [s.annotations for s in scenes], num_classes, seed, split
    )
    logger.info(f'Generated {dataset!r} with {dataset.num_objects} objects (seed {seed})')
    return dataset
