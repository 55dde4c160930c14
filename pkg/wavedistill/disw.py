"""Density-Independent Scale Weights.

Every cell of a decomposed feature grid weighs 1 plus, for each object covering it, the reciprocal of the number of
cells that object covers. Overlapping objects add up; nothing is clipped.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from os import PathLike
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Sequence, Set, Tuple, Union

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]
Extents = Tuple[int, int]


class AnnotationError(ValueError):
    """Exception raised on a malformed or out-of-bounds annotation."""

    ...


class ObjectAnnotation(NamedTuple):
    """An axis-aligned object box (x1, y1, x2, y2) in image pixels."""

    class_id: int
    box: Box

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


class CellSet(NamedTuple):
    """The rectangle of grid cells an object projects onto."""

    rows: range
    cols: range

    @property
    def size(self) -> int:
        return len(self.rows) * len(self.cols)

    def cells(self) -> Set[Tuple[int, int]]:
        return {(r, c) for r in self.rows for c in self.cols}


class DISWMap(NamedTuple):
    weights: Tensor  # h x w, every entry >= 1
    grid_stride: Tuple[float, float]  # image pixels per cell along (rows, columns)


def validate_box(box: Box, image_size: Extents) -> None:
    x1, y1, x2, y2 = box
    height, width = image_size
    if not all(math.isfinite(v) for v in box):
        raise AnnotationError(f'Box {box} has non-finite coordinates')
    if not (x1 < x2 and y1 < y2):
        raise AnnotationError(f'Box {box} is degenerate (need x1 < x2 and y1 < y2)')
    if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
        raise AnnotationError(f'Box {box} lies outside the {height}x{width} image')


def _span(lo: float, hi: float, image_extent: int, grid_extent: int) -> range:
    start = math.floor(lo * grid_extent / image_extent)
    stop = math.ceil(hi * grid_extent / image_extent)
    center = math.floor((lo + hi) / 2 * grid_extent / image_extent)
    center = min(max(center, 0), grid_extent - 1)
    start = min(max(start, 0), center)
    stop = max(min(stop, grid_extent), center + 1)
    return range(start, stop)


def project_box(box: Box, image_size: Extents, grid_size: Extents) -> CellSet:
    """Projects an image-space box onto a grid.

    The projection keeps every cell whose area intersects the scaled box and always contains the cell holding the box
    center, so it is never empty.

    :param box: (x1, y1, x2, y2) in image pixels.
    :param image_size: (height, width) of the image.
    :param grid_size: (height, width) of the grid.
    """
    validate_box(box, image_size)
    x1, y1, x2, y2 = box
    return CellSet(
        rows=_span(y1, y2, image_size[0], grid_size[0]),
        cols=_span(x1, x2, image_size[1], grid_size[1]),
    )


def build_disw(annotations: Iterable[ObjectAnnotation], image_size: Extents, grid_size: Extents) -> DISWMap:
    """Builds the weight map of one image on one grid."""
    weights = np.ones(grid_size, dtype=np.float64)
    for annotation in annotations:
        cells = project_box(annotation.box, image_size, grid_size)
        weights[cells.rows.start : cells.rows.stop, cells.cols.start : cells.cols.stop] += 1.0 / cells.size
    stride = (image_size[0] / grid_size[0], image_size[1] / grid_size[1])
    return DISWMap(weights=weights, grid_stride=stride)


def build_disw_batch(
    annotation_lists: Sequence[Sequence[ObjectAnnotation]],
    image_size: Extents,
    feature_extents: Sequence[Extents],
) -> List[Tensor]:
    """Per pyramid level, the stacked N x H/2 x W/2 weight maps on the decomposed grid of that level."""
    levels = []
    for height, width in feature_extents:
        grid = (height // 2, width // 2)
        levels.append(np.stack([build_disw(annotations, image_size, grid).weights for annotations in annotation_lists]))
    return levels


def _parse_line(line: str, line_number: int) -> Tuple[int, ObjectAnnotation]:
    try:
        if line.startswith('{'):
            record = json.loads(line)
            fields = [record[k] for k in ('image_id', 'class_id', 'x1', 'y1', 'x2', 'y2')]
        else:
            fields = line.split()
            if len(fields) != 6:
                raise ValueError(f'expected 6 fields, got {len(fields)}')
        image_id, class_id = int(fields[0]), int(fields[1])
        box = tuple(float(v) for v in fields[2:])
    except (KeyError, ValueError, TypeError) as e:
        raise AnnotationError(f'Line {line_number}: cannot parse annotation {line!r}: {e}') from e
    if class_id < 0:
        raise AnnotationError(f'Line {line_number}: negative class id {class_id}')
    return image_id, ObjectAnnotation(class_id, box)  # type: ignore[arg-type]


def read_annotations(path: Union[str, PathLike]) -> Dict[int, List[ObjectAnnotation]]:
    """Reads an annotation file: one object per line, JSON objects or ``image_id class_id x1 y1 x2 y2``."""
    annotations: Dict[int, List[ObjectAnnotation]] = defaultdict(list)
    with open(path) as fp:
        for i, line in enumerate(fp, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            image_id, annotation = _parse_line(line, i)
            annotations[image_id].append(annotation)
    count = sum(len(v) for v in annotations.values())
    logger.info(f'Read {count} annotations of {len(annotations)} images from {path}')
    return dict(annotations)


def write_annotations(path: Union[str, PathLike], annotations: Mapping[int, Sequence[ObjectAnnotation]]) -> None:
    """Writes annotations as JSON lines, sorted by image id."""
    with open(path, 'w') as fp:
        for image_id in sorted(annotations):
            for annotation in annotations[image_id]:
                x1, y1, x2, y2 = annotation.box
                record = {'image_id': image_id, 'class_id': annotation.class_id, 'x1': x1, 'y1': y1, 'x2': x2, 'y2': y2}
                fp.write(json.dumps(record) + '\n')
    logger.debug(f'Wrote annotations of {len(annotations)} images to {Path(path)}')
