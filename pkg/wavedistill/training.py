"""Stochastic gradient descent with momentum, shared by the teacher, amplifier and student trainers."""

from __future__ import annotations

import logging
import math
import time
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .detector import (
    STRIDES,
    DetectorParams,
    Params,
    Prediction,
    backward,
    decode,
    detection_loss,
    evaluate_ap50,
    forward,
)
from .disw import ObjectAnnotation
from .scenes import SceneDataset
from .tensor import NonFiniteError, Tensor, make_rng
from .util import format_duration

logger = logging.getLogger(__name__)

StepFunction = Callable[[Params, np.ndarray], Tuple[Dict[str, float], Params]]
EpochHook = Callable[[int, Params], Dict[str, float]]


class DivergenceError(RuntimeError):
    """Exception raised when a training loss stops being finite."""

    def __init__(self, label: str, epoch: int, step: int, last_loss: Optional[float]) -> None:
        RuntimeError.__init__(self)
        self.label = label
        self.epoch = epoch
        self.step = step
        self.last_loss = last_loss

    def __str__(self) -> str:
        return (
            f'{self.__class__.__name__}: training of {self.label} diverged at epoch {self.epoch}, step {self.step} '
            f'(last finite loss {self.last_loss})'
        )


class SGDConfig(NamedTuple):
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 8
    grad_clip: float = 0.0

    @classmethod
    def from_config(cls, optimizer: Dict[str, Any]) -> 'SGDConfig':
        return cls(
            lr=float(optimizer['lr']),
            momentum=float(optimizer['momentum']),
            weight_decay=float(optimizer['weight_decay']),
            batch_size=int(optimizer['batch_size']),
            grad_clip=float(optimizer['grad_clip']),
        )


class EvaluationConfig(NamedTuple):
    score_threshold: float = 0.3
    nms_iou: float = 0.5
    smooth_l1_beta: float = 1.0

    @classmethod
    def from_config(cls, evaluation: Dict[str, Any]) -> 'EvaluationConfig':
        return cls(
            score_threshold=float(evaluation['score_threshold']),
            nms_iou=float(evaluation['nms_iou']),
            smooth_l1_beta=float(evaluation['smooth_l1_beta']),
        )


class TrainResult(NamedTuple):
    params: Params
    steps: List[float]  # total loss of every step
    epochs: List[Dict[str, float]]  # per-epoch means of the loss parts plus whatever the epoch hook adds


def global_norm(grads: Params) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def sgd_step(params: Params, grads: Params, velocity: Params, config: SGDConfig) -> Tuple[Params, Params]:
    """One update ``v = momentum * v + g; p = p - lr * v`` with ``g`` including weight decay, after optional clipping
    of the global gradient norm. Returns new dicts; the inputs are not modified."""
    scale = 1.0
    if config.grad_clip > 0:
        norm = global_norm(grads)
        if norm > config.grad_clip:
            scale = config.grad_clip / norm
            logger.debug(f'Clipped gradient norm {norm:.4g} to {config.grad_clip}')
    new_params: Params = {}
    new_velocity: Params = {}
    for name, value in params.items():
        g = grads[name] * scale if scale != 1.0 else grads[name]
        if config.weight_decay:
            g = g + config.weight_decay * value
        v = config.momentum * velocity[name] + g if name in velocity else g
        new_velocity[name] = v
        new_params[name] = value - config.lr * v
    return new_params, new_velocity


def iterate_batches(num_items: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """The shuffled mini-batches of one epoch; the permutation comes from ``make_rng(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError(f'Batch size must be >= 1, got {batch_size}')
    order = make_rng(seed, epoch).permutation(num_items)
    return [order[i : i + batch_size] for i in range(0, num_items, batch_size)]


def run_sgd(
    params: Params,
    step_fn: StepFunction,
    num_items: int,
    epochs: int,
    config: SGDConfig,
    seed: int,
    label: str = 'model',
    epoch_hook: Optional[EpochHook] = None,
) -> TrainResult:
    """Runs ``epochs`` epochs of mini-batch SGD.

    :param step_fn: Maps (current params, batch indices) to (named loss parts including 'total', gradients).
    :param epoch_hook: Called after every epoch with the updated params; its values join the epoch record.
    """
    params = dict(params)
    velocity: Params = {}
    steps: List[float] = []
    records: List[Dict[str, float]] = []
    last_loss: Optional[float] = None
    for epoch in range(epochs):
        start = time.perf_counter()
        sums: Dict[str, float] = {}
        batches = iterate_batches(num_items, config.batch_size, seed, epoch)
        for step, indices in enumerate(batches):
            try:
                parts, grads = step_fn(params, indices)
            except NonFiniteError as e:
                raise DivergenceError(label, epoch, step, last_loss) from e
            total = parts['total']
            if not math.isfinite(total) or not all(np.isfinite(g).all() for g in grads.values()):
                raise DivergenceError(label, epoch, step, last_loss)
            logger.debug(f'{label} epoch {epoch} step {step}: loss {total:.6g}')
            params, velocity = sgd_step(params, grads, velocity, config)
            steps.append(total)
            last_loss = total
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + value
        record: Dict[str, float] = {'epoch': epoch}
        record.update({key: value / len(batches) for key, value in sums.items()})
        if epoch_hook is not None:
            record.update(epoch_hook(epoch, params))
        records.append(record)
        logger.info(
            f'{label} epoch {epoch + 1}/{epochs}: '
            + ', '.join(f'{k} {v:.4g}' for k, v in record.items() if k != 'epoch')
            + f' ({format_duration(time.perf_counter() - start)} s)'
        )
    return TrainResult(params=params, steps=steps, epochs=records)


def detection_step(params: DetectorParams, dataset: SceneDataset, beta: float = 1.0) -> StepFunction:
    """The plain supervised step: forward, detection loss, backward."""

    def step(tensors: Params, indices: np.ndarray) -> Tuple[Dict[str, float], Params]:
        current = params.replace(tensors)
        result = forward(current, dataset.images[indices])
        parts, grad_predictions = detection_loss(result.predictions, dataset.batch_annotations(indices), beta)
        grads = backward(current, result.cache, grad_pyramid=None, grad_predictions=grad_predictions)
        return {'total': parts.total, 'det': parts.total}, grads

    return step


def predict(params: DetectorParams, images: Tensor, batch_size: int = 32) -> List[Prediction]:
    """Head predictions for many images, concatenated over batches."""
    chunks = [forward(params, images[i : i + batch_size]).predictions for i in range(0, images.shape[0], batch_size)]
    return [
        Prediction(
            cls=np.concatenate([c[level].cls for c in chunks]), reg=np.concatenate([c[level].reg for c in chunks])
        )
        for level in range(len(STRIDES))
    ]


def evaluate_predictions(
    predictions: Sequence[Prediction],
    annotations: Sequence[Sequence[ObjectAnnotation]],
    image_size: Tuple[int, int],
    evaluation: EvaluationConfig,
) -> float:
    detections = decode(predictions, image_size, evaluation.score_threshold, evaluation.nms_iou)
    return evaluate_ap50(detections, annotations)


def evaluate_detector(params: DetectorParams, dataset: SceneDataset, evaluation: EvaluationConfig) -> float:
    """AP at IoU 0.5 of the detector over a dataset."""
    return evaluate_predictions(predict(params, dataset.images), dataset.annotations, dataset.image_size, evaluation)


def train_detector(
    params: DetectorParams,
    train_set: SceneDataset,
    config: SGDConfig,
    epochs: int,
    seed: int,
    val_set: Optional[SceneDataset] = None,
    evaluation: EvaluationConfig = EvaluationConfig(),
    label: str = 'detector',
) -> Tuple[DetectorParams, TrainResult]:
    """Supervised training on the detection loss; with a validation set every epoch record carries ``val_ap50``."""
    hook: Optional[EpochHook] = None
    if val_set is not None:

        def hook(epoch: int, tensors: Params) -> Dict[str, float]:
            return {'val_ap50': evaluate_detector(params.replace(tensors), val_set, evaluation)}  # type: ignore

    step = detection_step(params, train_set, evaluation.smooth_l1_beta)
    result = run_sgd(params.tensors, step, len(train_set), epochs, config, seed, label, hook)
    return params.replace(result.params), result
