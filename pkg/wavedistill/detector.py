"""A small anchor-free detector: three strided 3x3 conv layers, a two-level feature pyramid (strides 4 and 8) and a
shared head with a classification and a regression branch.

Forward passes return a cache that :func:`backward` consumes; every gradient is hand-written.
"""

from __future__ import annotations

import logging
import math
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .disw import ObjectAnnotation
from .tensor import (
    ShapeError,
    Tensor,
    conv2d,
    conv2d_backward,
    make_rng,
    upsample_nearest2x,
    upsample_nearest2x_backward,
)
from .util import checksum

logger = logging.getLogger(__name__)

STRIDES = (4, 8)
HEAD_PREFIX = 'head.'

Params = Dict[str, Tensor]


class DetectorSpec(NamedTuple):
    backbone_widths: Tuple[int, int, int]
    pyramid_width: int
    num_classes: int
    in_channels: int = 3

    @classmethod
    def from_width(cls, width: int, pyramid_width: int, num_classes: int) -> 'DetectorSpec':
        return cls(backbone_widths=(width, width, width), pyramid_width=pyramid_width, num_classes=num_classes)


class Prediction(NamedTuple):
    """Per-level head output: K class logits and 4 (l, t, r, b) distances per cell, in units of the level stride."""

    cls: Tensor  # N x K x h x w
    reg: Tensor  # N x 4 x h x w


class Detection(NamedTuple):
    class_id: int
    score: float
    box: Tuple[float, float, float, float]


class Targets(NamedTuple):
    cls: Tensor  # K x h x w, one-hot on positive cells
    reg: Tensor  # 4 x h x w, normalized distances (zero on negatives)
    positive: Tensor  # h x w bool


class LossParts(NamedTuple):
    total: float
    classification: float
    regression: float


def _layer_shapes(spec: DetectorSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    w1, w2, w3 = spec.backbone_widths
    p, k = spec.pyramid_width, spec.num_classes
    return [
        ('backbone.conv1', (w1, spec.in_channels, 3, 3)),
        ('backbone.conv2', (w2, w1, 3, 3)),
        ('backbone.conv3', (w3, w2, 3, 3)),
        ('fpn.lateral4', (p, w2, 1, 1)),
        ('fpn.lateral8', (p, w3, 1, 1)),
        ('fpn.smooth4', (p, p, 3, 3)),
        ('fpn.smooth8', (p, p, 3, 3)),
    ] + [(HEAD_PREFIX + name, shape) for name, shape in _head_shapes(p, k)]


def _head_shapes(in_channels: int, num_classes: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [
        ('conv1', (in_channels, in_channels, 3, 3)),
        ('conv2', (in_channels, in_channels, 3, 3)),
        ('cls', (num_classes, in_channels, 1, 1)),
        ('reg', (4, in_channels, 1, 1)),
    ]


def _he_init(layers: Sequence[Tuple[str, Tuple[int, ...]]], rng: np.random.Generator) -> Params:
    params: Params = {}
    for name, shape in layers:
        fan_in = shape[1] * shape[2] * shape[3]
        params[f'{name}.weight'] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        params[f'{name}.bias'] = np.zeros(shape[0])
    return params


class DetectorParams(object):
    """The named parameter tensors of one detector, in a fixed order."""

    def __init__(self, spec: DetectorSpec, tensors: Params) -> None:
        expected = [f'{name}.{kind}' for name, _ in _layer_shapes(spec) for kind in ('weight', 'bias')]
        if list(tensors) != expected:
            raise ValueError(f'Parameter names {list(tensors)} do not match the detector layout {expected}')
        for name, shape in _layer_shapes(spec):
            if tensors[f'{name}.weight'].shape != shape or tensors[f'{name}.bias'].shape != shape[:1]:
                raise ShapeError(f'Parameter {name} has shape {tensors[f"{name}.weight"].shape}, expected {shape}')
        self.spec = spec
        self.tensors = tensors

    def __repr__(self) -> str:
        return f'<DetectorParams {self.spec} {self.size} values>'

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def head(self) -> Params:
        """A copy of the head parameters with the 'head.' prefix removed."""
        return {k[len(HEAD_PREFIX) :]: v.copy() for k, v in self.tensors.items() if k.startswith(HEAD_PREFIX)}

    def copy(self) -> 'DetectorParams':
        return DetectorParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def replace(self, tensors: Params) -> 'DetectorParams':
        return DetectorParams(self.spec, dict(tensors))

    def checksum(self) -> str:
        return checksum(self.tensors.items())


def init_detector(spec: DetectorSpec, seed: int) -> DetectorParams:
    """He-scaled normal weights and zero biases, drawn in layer order from ``make_rng(seed)``."""
    return DetectorParams(spec, _he_init(_layer_shapes(spec), make_rng(seed)))


def init_head(in_channels: int, num_classes: int, seed: int) -> Params:
    """A fresh head (e.g. a high-frequency amplifier) for ``in_channels`` input channels."""
    return _he_init(_head_shapes(in_channels, num_classes), make_rng(seed))


def head_checksum(head: Params) -> str:
    return checksum(head.items())


def _conv(params: Params, name: str, x: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return conv2d(x, params[f'{name}.weight'], stride=stride, padding=padding, bias=params[f'{name}.bias'])


def _conv_backward(
    params: Params,
    name: str,
    grad: Tensor,
    x: Tensor,
    grads: Optional[Params],
    stride: int = 1,
    padding: int = 0,
    need_input_grad: bool = True,
) -> Optional[Tensor]:
    grad_input, grad_weight, grad_bias = conv2d_backward(
        grad,
        x,
        params[f'{name}.weight'],
        stride=stride,
        padding=padding,
        need_kernel_grad=grads is not None,
        need_input_grad=need_input_grad,
    )
    if grads is not None:
        for key, value in ((f'{name}.weight', grad_weight), (f'{name}.bias', grad_bias)):
            grads[key] = grads[key] + value if key in grads else value
    return grad_input


def _relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def head_forward(head: Params, feature: Tensor) -> Tuple[Prediction, Dict[str, Tensor]]:
    """Applies a head (or knowledge amplifier) to one N x C x h x w level."""
    if feature.ndim != 4 or feature.shape[1] != head['conv1.weight'].shape[1]:
        raise ShapeError(f'Head expects {head["conv1.weight"].shape[1]} input channels, got feature {feature.shape}')
    a1 = _conv(head, 'conv1', feature, padding=1)
    h1 = _relu(a1)
    a2 = _conv(head, 'conv2', h1, padding=1)
    h2 = _relu(a2)
    prediction = Prediction(cls=_conv(head, 'cls', h2), reg=_conv(head, 'reg', h2))
    return prediction, {'x': feature, 'a1': a1, 'h1': h1, 'a2': a2, 'h2': h2}


def head_backward(
    head: Params, cache: Dict[str, Tensor], grad: Prediction, grads: Optional[Params] = None
) -> Tensor:
    """Back-propagates prediction gradients through a head.

    :param grads: If given, parameter gradients are accumulated into it; frozen heads pass None.
    :returns: The gradient with respect to the input feature.
    """
    g_h2 = _conv_backward(head, 'cls', grad.cls, cache['h2'], grads) + _conv_backward(
        head, 'reg', grad.reg, cache['h2'], grads
    )
    g_a2 = g_h2 * (cache['a2'] > 0)
    g_h1 = _conv_backward(head, 'conv2', g_a2, cache['h1'], grads, padding=1)
    g_a1 = g_h1 * (cache['a1'] > 0)
    return _conv_backward(head, 'conv1', g_a1, cache['x'], grads, padding=1)


class ForwardResult(NamedTuple):
    pyramid: List[Tensor]  # N x P x S/4 x S/4, N x P x S/8 x S/8
    predictions: List[Prediction]
    cache: Dict[str, Any]


def check_images(images: Tensor, spec: DetectorSpec) -> Tensor:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[np.newaxis]
    if images.ndim != 4 or images.shape[1] != spec.in_channels:
        raise ShapeError(f'Expected N x {spec.in_channels} x S x S images, got {images.shape}')
    if images.shape[2] % max(STRIDES) or images.shape[3] % max(STRIDES):
        raise ShapeError(f'Image extents {images.shape[2:]} must be divisible by {max(STRIDES)}')
    return images


def forward(params: DetectorParams, images: Tensor, with_head: bool = True) -> ForwardResult:
    """Runs backbone, pyramid and (optionally) the head.

    :param images: N x 3 x S x S (a single 3 x S x S image is treated as N=1); S divisible by 8.
    :param with_head: False skips the head, e.g. for a frozen teacher whose pyramid is all that is needed.
    """
    p = params.tensors
    x = check_images(images, params.spec)
    a1 = _conv(p, 'backbone.conv1', x, stride=2, padding=1)
    r1 = _relu(a1)
    a2 = _conv(p, 'backbone.conv2', r1, stride=2, padding=1)
    r2 = _relu(a2)
    a3 = _conv(p, 'backbone.conv3', r2, stride=2, padding=1)
    r3 = _relu(a3)
    m8 = _conv(p, 'fpn.lateral8', r3)
    m4 = _conv(p, 'fpn.lateral4', r2) + upsample_nearest2x(m8)
    pyramid = [_conv(p, 'fpn.smooth4', m4, padding=1), _conv(p, 'fpn.smooth8', m8, padding=1)]
    cache: Dict[str, Any] = {'x': x, 'a1': a1, 'r1': r1, 'a2': a2, 'r2': r2, 'a3': a3, 'r3': r3, 'm4': m4, 'm8': m8}

    predictions: List[Prediction] = []
    if with_head:
        head = {k[len(HEAD_PREFIX) :]: v for k, v in p.items() if k.startswith(HEAD_PREFIX)}
        cache['head'] = []
        for level in pyramid:
            prediction, head_cache = head_forward(head, level)
            predictions.append(prediction)
            cache['head'].append(head_cache)
    return ForwardResult(pyramid=pyramid, predictions=predictions, cache=cache)


def backward(
    params: DetectorParams,
    cache: Dict[str, Any],
    grad_pyramid: Optional[Sequence[Optional[Tensor]]] = None,
    grad_predictions: Optional[Sequence[Prediction]] = None,
) -> Params:
    """Gradients of all parameters given gradients on the pyramid levels and/or on the head predictions.

    Pyramid gradients (from distillation) and head gradients (from the detection loss) are summed at each level.
    """
    p = params.tensors
    grads: Params = {}
    levels = len(STRIDES)
    g_levels: List[Optional[Tensor]] = list(grad_pyramid) if grad_pyramid is not None else [None] * levels

    if grad_predictions is not None:
        head = {k[len(HEAD_PREFIX) :]: v for k, v in p.items() if k.startswith(HEAD_PREFIX)}
        head_grads: Params = {}
        for i, (grad, head_cache) in enumerate(zip(grad_predictions, cache['head'])):
            g_feature = head_backward(head, head_cache, grad, head_grads)
            g_levels[i] = g_feature if g_levels[i] is None else g_levels[i] + g_feature
        grads.update({HEAD_PREFIX + k: v for k, v in head_grads.items()})

    g_p4, g_p8 = (
        g if g is not None else np.zeros(cache['m4'].shape[:1] + (params.spec.pyramid_width,) + shape)
        for g, shape in zip(g_levels, (cache['m4'].shape[2:], cache['m8'].shape[2:]))
    )
    g_m4 = _conv_backward(p, 'fpn.smooth4', g_p4, cache['m4'], grads, padding=1)
    g_m8 = _conv_backward(p, 'fpn.smooth8', g_p8, cache['m8'], grads, padding=1) + upsample_nearest2x_backward(g_m4)
    g_r2 = _conv_backward(p, 'fpn.lateral4', g_m4, cache['r2'], grads)
    g_r3 = _conv_backward(p, 'fpn.lateral8', g_m8, cache['r3'], grads)
    g_a3 = g_r3 * (cache['a3'] > 0)
    g_r2 = g_r2 + _conv_backward(p, 'backbone.conv3', g_a3, cache['r2'], grads, stride=2, padding=1)
    g_a2 = g_r2 * (cache['a2'] > 0)
    g_r1 = _conv_backward(p, 'backbone.conv2', g_a2, cache['r1'], grads, stride=2, padding=1)
    g_a1 = g_r1 * (cache['a1'] > 0)
    _conv_backward(p, 'backbone.conv1', g_a1, cache['x'], grads, stride=2, padding=1, need_input_grad=False)

    # head params stay zero when only the pyramid receives gradient
    return {name: grads[name] if name in grads else np.zeros_like(value) for name, value in p.items()}


def assign_targets(
    annotations: Sequence[ObjectAnnotation], grid_size: Tuple[int, int], stride: int, num_classes: int
) -> Targets:
    """A cell is positive when its center lies inside a box; where boxes overlap the smallest one wins."""
    height, width = grid_size
    cls_target = np.zeros((num_classes, height, width))
    reg_target = np.zeros((4, height, width))
    positive = np.zeros((height, width), dtype=bool)
    cy = (np.arange(height)[:, np.newaxis] + 0.5) * stride
    cx = (np.arange(width)[np.newaxis, :] + 0.5) * stride
    owner_area = np.full((height, width), np.inf)
    for annotation in annotations:
        if not 0 <= annotation.class_id < num_classes:
            raise ValueError(f'Class id {annotation.class_id} outside [0, {num_classes})')
        x1, y1, x2, y2 = annotation.box
        inside = (cx >= x1) & (cx < x2) & (cy >= y1) & (cy < y2) & (annotation.area < owner_area)
        if not inside.any():
            continue
        owner_area[inside] = annotation.area
        positive |= inside
        cls_target[:, inside] = 0.0
        cls_target[annotation.class_id, inside] = 1.0
        distances = np.stack(np.broadcast_arrays(cx - x1, cy - y1, x2 - cx, y2 - cy)) / stride
        reg_target[:, inside] = distances[:, inside]
    return Targets(cls=cls_target, reg=reg_target, positive=positive)


def softplus(x: Tensor) -> Tensor:
    return np.logaddexp(0.0, x)


def sigmoid(x: Tensor) -> Tensor:
    return np.exp(-np.logaddexp(0.0, -x))


def smooth_l1(diff: Tensor, beta: float = 1.0) -> Tuple[Tensor, Tensor]:
    """Elementwise smooth-L1 values and derivatives."""
    small = np.abs(diff) < beta
    value = np.where(small, 0.5 * diff**2 / beta, np.abs(diff) - 0.5 * beta)
    derivative = np.where(small, diff / beta, np.sign(diff))
    return value, derivative


def detection_loss(
    predictions: Sequence[Prediction],
    annotations: Sequence[Sequence[ObjectAnnotation]],
    beta: float = 1.0,
) -> Tuple[LossParts, List[Prediction]]:
    """Classification + regression loss averaged over the scenes of a batch, with its gradient on the predictions.

    Classification is a per-class binary cross-entropy over all cells of all levels, positives up-weighted by the
    scene's negative/positive cell ratio and normalized by the cell count. Regression is smooth-L1 on the normalized
    distances of positive cells, normalized by the positive count; it is exactly zero for a scene without positives.
    """
    batch = predictions[0].cls.shape[0]
    if len(annotations) != batch:
        raise ShapeError(f'{len(annotations)} annotation lists for a batch of {batch}')
    num_classes = predictions[0].cls.shape[1]
    grads = [Prediction(cls=np.zeros_like(p.cls), reg=np.zeros_like(p.reg)) for p in predictions]
    cls_total = reg_total = 0.0

    for n in range(batch):
        targets = [
            assign_targets(annotations[n], p.cls.shape[2:], stride, num_classes)
            for p, stride in zip(predictions, STRIDES)
        ]
        num_cells = sum(t.positive.size for t in targets)
        num_pos = sum(int(t.positive.sum()) for t in targets)
        if num_pos == 0:
            logger.warning(f'Scene {n} of the batch has no positive cells')
        pos_weight = (num_cells - num_pos) / num_pos if num_pos else 1.0

        for prediction, target, grad in zip(predictions, targets, grads):
            logits = prediction.cls[n]
            weight = np.where(target.cls == 1.0, pos_weight, 1.0)
            cls_total += float(np.sum(weight * (softplus(logits) - target.cls * logits))) / num_cells
            grad.cls[n] = weight * (sigmoid(logits) - target.cls) / (num_cells * batch)

            if num_pos:
                mask = target.positive[np.newaxis]
                value, derivative = smooth_l1(prediction.reg[n] - target.reg, beta)
                reg_total += float(np.sum(value * mask)) / num_pos
                grad.reg[n] = derivative * mask / (num_pos * batch)

    parts = LossParts(
        total=(cls_total + reg_total) / batch, classification=cls_total / batch, regression=reg_total / batch
    )
    return parts, grads


def box_iou(box: Sequence[float], boxes: Tensor) -> Tensor:
    """IoU of one (x1, y1, x2, y2) box against an M x 4 array of boxes."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(box[0], boxes[:, 0])
    iy1 = np.maximum(box[1], boxes[:, 1])
    ix2 = np.minimum(box[2], boxes[:, 2])
    iy2 = np.minimum(box[3], boxes[:, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = area + areas - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(boxes: Tensor, scores: Tensor, iou_threshold: float = 0.5) -> List[int]:
    """Greedy non-maximum suppression; returns kept indices, highest score first (ties keep input order)."""
    order = list(np.argsort(-np.asarray(scores), kind='stable'))
    keep: List[int] = []
    while order:
        best = order.pop(0)
        keep.append(int(best))
        if order:
            ious = box_iou(boxes[best], boxes[order])
            order = [i for i, iou in zip(order, ious) if iou <= iou_threshold]
    return keep


def decode(
    predictions: Sequence[Prediction],
    image_size: Tuple[int, int],
    score_threshold: float = 0.3,
    nms_iou: float = 0.5,
) -> List[List[Detection]]:
    """Per image: argmax class per cell, boxes from the distances, score threshold, then class-wise NMS."""
    height, width = image_size
    batch = predictions[0].cls.shape[0]
    results: List[List[Detection]] = []
    for n in range(batch):
        boxes, scores, classes = [], [], []
        for prediction, stride in zip(predictions, STRIDES):
            probs = sigmoid(prediction.cls[n])
            best = probs.argmax(axis=0)
            score = probs.max(axis=0)
            rows, cols = np.nonzero(score >= score_threshold)
            if rows.size == 0:
                continue
            cy = (rows + 0.5) * stride
            cx = (cols + 0.5) * stride
            dist = np.clip(prediction.reg[n][:, rows, cols], 0.0, None) * stride
            level_boxes = np.stack(
                [
                    np.clip(cx - dist[0], 0, width),
                    np.clip(cy - dist[1], 0, height),
                    np.clip(cx + dist[2], 0, width),
                    np.clip(cy + dist[3], 0, height),
                ],
                axis=1,
            )
            boxes.append(level_boxes)
            scores.append(score[rows, cols])
            classes.append(best[rows, cols])
        detections: List[Detection] = []
        if boxes:
            all_boxes = np.concatenate(boxes)
            all_scores = np.concatenate(scores)
            all_classes = np.concatenate(classes)
            for class_id in np.unique(all_classes):
                idx = np.nonzero(all_classes == class_id)[0]
                for k in nms(all_boxes[idx], all_scores[idx], nms_iou):
                    i = idx[k]
                    detections.append(Detection(int(class_id), float(all_scores[i]), tuple(all_boxes[i].tolist())))
        detections.sort(key=lambda d: -d.score)
        results.append(detections)
    return results


def average_precision(recall: Tensor, precision: Tensor) -> float:
    """Area under the precision envelope (all-point interpolation)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changes = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def evaluate_ap50(
    detections: Sequence[Sequence[Detection]],
    annotations: Sequence[Sequence[ObjectAnnotation]],
    iou_threshold: float = 0.5,
) -> float:
    """Mean over annotated classes of the average precision at IoU 0.5, greedy highest-score-first matching."""
    if len(detections) != len(annotations):
        raise ValueError(f'{len(detections)} detection lists for {len(annotations)} images')
    classes = sorted({a.class_id for image in annotations for a in image})
    if not classes:
        return 0.0
    aps = []
    for class_id in classes:
        gt = [np.array([a.box for a in image if a.class_id == class_id]).reshape(-1, 4) for image in annotations]
        num_gt = sum(len(g) for g in gt)
        candidates = [
            (d.score, image_id, d.box)
            for image_id, image in enumerate(detections)
            for d in image
            if d.class_id == class_id
        ]
        candidates.sort(key=lambda c: -c[0])
        matched = [np.zeros(len(g), dtype=bool) for g in gt]
        tp = np.zeros(len(candidates))
        for i, (_, image_id, box) in enumerate(candidates):
            if len(gt[image_id]):
                ious = box_iou(box, gt[image_id])
                ious[matched[image_id]] = -1.0
                best = int(np.argmax(ious))
                if ious[best] >= iou_threshold:
                    matched[image_id][best] = True
                    tp[i] = 1.0
        if not candidates:
            aps.append(0.0)
            continue
        tp_cum = np.cumsum(tp)
        fp_cum = np.cumsum(1.0 - tp)
        aps.append(average_precision(tp_cum / num_gt, tp_cum / (tp_cum + fp_cum)))
    return float(np.mean(aps))
