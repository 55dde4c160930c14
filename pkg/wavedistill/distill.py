"""Spectral decoupling distillation.

The student's pyramid levels are pulled towards the teacher's in two ways:

* explicitly, by a DISW-weighted squared difference of the low and high wavelet bands of each level;
* implicitly, by the prediction discrepancy of frozen knowledge amplifiers applied to both pyramids. The full-frequency
  amplifier is a copy of the teacher head and sees the raw levels; the high-frequency amplifier is trained on the
  fused high bands of the teacher and sees the fused high bands of both.

Distillation gradients reach the student backbone and neck only; the student head learns from the detection loss.
"""

from __future__ import annotations

import logging
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .detector import (
    STRIDES,
    DetectorParams,
    Params,
    Prediction,
    backward,
    detection_loss,
    forward,
    head_backward,
    head_checksum,
    head_forward,
    init_head,
    sigmoid,
    smooth_l1,
    softplus,
)
from .disw import ObjectAnnotation, build_disw_batch
from .scenes import SceneDataset
from .tensor import ShapeError, Tensor
from .training import EvaluationConfig, SGDConfig, TrainResult, evaluate_detector, evaluate_predictions, run_sgd
from .wavelet import SpectralComponents, dwt2d, dwt2d_backward, fuse_high, fuse_high_backward

logger = logging.getLogger(__name__)

GAMMA_MODES = ('none', 'spectral', 'stream')
BANDS = ('low', 'high', 'both')
TERMS = ('ex_low', 'ex_high', 'im_full', 'im_high')


class FrozenParameterError(RuntimeError):
    """Exception raised when teacher or amplifier parameters changed during distillation."""

    ...


class DistillConfig(NamedTuple):
    alpha: float = 1e-3
    beta: float = 1e-3
    lam: float = 1e-2
    mu: float = 1e-2
    gamma: float = 1.0
    gamma_mode: str = 'none'
    amplifier_epochs: int = 10
    explicit: bool = True
    implicit: bool = True
    disw: bool = True
    band: str = 'both'
    basis: str = 'haar'

    @classmethod
    def from_config(cls, distill: Dict[str, Any]) -> 'DistillConfig':
        config = cls(
            alpha=float(distill['alpha']),
            beta=float(distill['beta']),
            lam=float(distill['lambda']),
            mu=float(distill['mu']),
            gamma=float(distill['gamma']),
            gamma_mode=str(distill['gamma_mode']),
            amplifier_epochs=int(distill['amplifier_epochs']),
            explicit=bool(distill['explicit']),
            implicit=bool(distill['implicit']),
            disw=bool(distill['disw']),
            band=str(distill['band']),
            basis=str(distill['basis']),
        )
        config.validate()
        return config

    def validate(self) -> None:
        for name in ('alpha', 'beta', 'lam', 'mu'):
            if getattr(self, name) < 0:
                raise ValueError(f'{name} must be >= 0, got {getattr(self, name)}')
        if not 0 <= self.gamma <= 2:
            raise ValueError(f'gamma must lie in [0, 2], got {self.gamma}')
        if self.gamma_mode not in GAMMA_MODES:
            raise ValueError(f'Unknown gamma mode {self.gamma_mode!r} (supported: {GAMMA_MODES})')
        if self.band not in BANDS:
            raise ValueError(f'Unknown band {self.band!r} (supported: {BANDS})')

    def term_weights(self) -> Dict[str, float]:
        """The effective multiplier of each distillation term after switches, band selection and gamma."""
        low = self.band in ('low', 'both')
        high = self.band in ('high', 'both')
        weights = {
            'ex_low': self.alpha if self.explicit and low else 0.0,
            'ex_high': self.beta if self.explicit and high else 0.0,
            'im_full': self.lam if self.implicit and low else 0.0,
            'im_high': self.mu if self.implicit and high else 0.0,
        }
        if self.gamma_mode == 'spectral':
            for term in ('ex_low', 'im_full'):
                weights[term] *= self.gamma
            for term in ('ex_high', 'im_high'):
                weights[term] *= 2.0 - self.gamma
        elif self.gamma_mode == 'stream':
            for term in ('ex_low', 'ex_high'):
                weights[term] *= self.gamma
            for term in ('im_full', 'im_high'):
                weights[term] *= 2.0 - self.gamma
        return weights

    @property
    def active(self) -> bool:
        return any(w > 0 for w in self.term_weights().values())


class AmplifierSet(NamedTuple):
    full: Params  # copy of the teacher head
    high: Params  # trained on fused high-band teacher features

    def checksum(self) -> str:
        named = {**{f'full.{k}': v for k, v in self.full.items()}, **{f'high.{k}': v for k, v in self.high.items()}}
        return head_checksum(named)


class TermResult(NamedTuple):
    loss: float  # weighted sum
    first: float  # unweighted low (explicit) or full-frequency (implicit) term
    second: float  # unweighted high term
    grad: List[Tensor]  # of the weighted sum, per level, wrt the student features


def _check_pyramids(teacher: Sequence[Tensor], student: Sequence[Tensor]) -> None:
    if len(teacher) != len(student):
        raise ShapeError(f'Teacher has {len(teacher)} pyramid levels, student {len(student)}')
    for level, (t, s) in enumerate(zip(teacher, student)):
        if t.shape != s.shape:
            raise ShapeError(f'Level {level}: teacher features {t.shape} do not match student features {s.shape}')


def explicit_loss(
    teacher_pyramid: Sequence[Tensor],
    student_pyramid: Sequence[Tensor],
    disw_maps: Optional[Sequence[Tensor]],
    basis: object = 'haar',
    alpha: float = 1.0,
    beta: float = 1.0,
) -> TermResult:
    """``alpha * sum P (L_t - L_s)^2 + beta * sum P (H_t - H_s)^2`` summed over levels, channels and orientations.

    :param teacher_pyramid: Per level ``... x C x H x W`` (teacher features are constants).
    :param disw_maps: Per level ``... x H/2 x W/2`` weights broadcast over channels and orientations; None for
        uniform weights.
    """
    _check_pyramids(teacher_pyramid, student_pyramid)
    low_total = high_total = 0.0
    grads = []
    for level, (t, s) in enumerate(zip(teacher_pyramid, student_pyramid)):
        ct, cs = dwt2d(t, basis), dwt2d(s, basis)
        if disw_maps is None:
            weights = np.ones(cs.low.shape[:-3] + cs.low.shape[-2:])
        else:
            weights = np.asarray(disw_maps[level], dtype=np.float64)
            if weights.shape != cs.low.shape[:-3] + cs.low.shape[-2:]:
                raise ShapeError(f'Level {level}: DISW map {weights.shape} does not match the bands {cs.low.shape}')
        w_low = weights[..., np.newaxis, :, :]
        w_high = weights[..., np.newaxis, np.newaxis, :, :]
        d_low = ct.low - cs.low
        d_high = ct.high - cs.high
        low_total += float(np.sum(w_low * d_low**2))
        high_total += float(np.sum(w_high * d_high**2))
        grad = SpectralComponents(-2.0 * alpha * w_low * d_low, -2.0 * beta * w_high * d_high)
        grads.append(dwt2d_backward(grad, basis))
    return TermResult(loss=alpha * low_total + beta * high_total, first=low_total, second=high_total, grad=grads)


def prediction_discrepancy(
    student: Prediction, teacher: Prediction, beta: float = 1.0
) -> Tuple[float, Prediction]:
    """Sum of the Bernoulli KL divergence (teacher sigmoid as target) over all logits and the smooth-L1 distance
    over all regression outputs, with its gradient on the student prediction."""
    s, t = student.cls, teacher.cls
    q = sigmoid(t)
    kl = q * (softplus(-s) - softplus(-t)) + (1.0 - q) * (softplus(s) - softplus(t))
    reg_value, reg_derivative = smooth_l1(student.reg - teacher.reg, beta)
    value = float(np.sum(kl)) + float(np.sum(reg_value))
    return value, Prediction(cls=sigmoid(s) - q, reg=reg_derivative)


def high_features(pyramid: Sequence[Tensor], basis: object = 'haar') -> List[Tensor]:
    """The fused high bands of every level, at the resolution of the level."""
    return [fuse_high(dwt2d(level, basis).high) for level in pyramid]


def implicit_loss(
    teacher_pyramid: Sequence[Tensor],
    student_pyramid: Sequence[Tensor],
    amplifiers: AmplifierSet,
    basis: object = 'haar',
    lam: float = 1.0,
    mu: float = 1.0,
    beta: float = 1.0,
) -> TermResult:
    """``lam * full + mu * high``: prediction discrepancies of the frozen amplifiers, summed over levels."""
    _check_pyramids(teacher_pyramid, student_pyramid)
    full_total = high_total = 0.0
    grads = []
    for t, s in zip(teacher_pyramid, student_pyramid):
        t4, s4 = (x if x.ndim == 4 else x[np.newaxis] for x in (t, s))
        target, _ = head_forward(amplifiers.full, t4)
        prediction, cache = head_forward(amplifiers.full, s4)
        value, grad = prediction_discrepancy(prediction, target, beta)
        full_total += value
        g_full = head_backward(amplifiers.full, cache, Prediction(lam * grad.cls, lam * grad.reg))

        ct, cs = dwt2d(t4, basis), dwt2d(s4, basis)
        target, _ = head_forward(amplifiers.high, fuse_high(ct.high))
        prediction, cache = head_forward(amplifiers.high, fuse_high(cs.high))
        value, grad = prediction_discrepancy(prediction, target, beta)
        high_total += value
        g_fused = head_backward(amplifiers.high, cache, Prediction(mu * grad.cls, mu * grad.reg))
        g_high = dwt2d_backward(SpectralComponents(np.zeros_like(cs.low), fuse_high_backward(g_fused)), basis)

        g = g_full + g_high
        grads.append(g if s.ndim == 4 else g[0])
    return TermResult(loss=lam * full_total + mu * high_total, first=full_total, second=high_total, grad=grads)


class DistillStep(NamedTuple):
    parts: Dict[str, float]  # total, det and the unweighted terms, all per-scene means
    grads: Params


def total_distill_loss(
    student: DetectorParams,
    images: Tensor,
    annotations: Sequence[Sequence[ObjectAnnotation]],
    teacher_pyramid: Sequence[Tensor],
    amplifiers: Optional[AmplifierSet],
    disw_maps: Optional[Sequence[Tensor]],
    config: DistillConfig,
    beta: float = 1.0,
) -> DistillStep:
    """Detection loss plus the weighted distillation terms averaged over the batch, with gradients on every student
    parameter. Terms whose effective weight is zero are not evaluated."""
    result = forward(student, images)
    det, grad_predictions = detection_loss(result.predictions, annotations, beta)
    weights = config.term_weights()
    batch = result.pyramid[0].shape[0]
    parts = {'total': det.total, 'det': det.total, **{term: 0.0 for term in TERMS}}
    grad_pyramid: Optional[List[Tensor]] = None

    streams = []
    if weights['ex_low'] > 0 or weights['ex_high'] > 0:
        term = explicit_loss(
            teacher_pyramid,
            result.pyramid,
            disw_maps if config.disw else None,
            config.basis,
            weights['ex_low'],
            weights['ex_high'],
        )
        parts['ex_low'], parts['ex_high'] = term.first / batch, term.second / batch
        streams.append(term)
    if weights['im_full'] > 0 or weights['im_high'] > 0:
        if amplifiers is None:
            raise ValueError('Implicit distillation needs knowledge amplifiers')
        term = implicit_loss(
            teacher_pyramid, result.pyramid, amplifiers, config.basis, weights['im_full'], weights['im_high'], beta
        )
        parts['im_full'], parts['im_high'] = term.first / batch, term.second / batch
        streams.append(term)
    for term in streams:
        parts['total'] += term.loss / batch
        scaled = [g / batch for g in term.grad]
        grad_pyramid = scaled if grad_pyramid is None else [a + b for a, b in zip(grad_pyramid, scaled)]

    grads = backward(student, result.cache, grad_pyramid=grad_pyramid, grad_predictions=grad_predictions)
    return DistillStep(parts=parts, grads=grads)


def teacher_pyramids(teacher: DetectorParams, dataset: SceneDataset, batch_size: int = 32) -> List[Tensor]:
    """The teacher's pyramid levels for every scene of a dataset, stacked per level."""
    chunks = [
        forward(teacher, dataset.images[i : i + batch_size], with_head=False).pyramid
        for i in range(0, len(dataset), batch_size)
    ]
    return [np.concatenate([c[level] for c in chunks]) for level in range(len(STRIDES))]


def build_amplifiers(teacher: DetectorParams, high: Params) -> AmplifierSet:
    return AmplifierSet(full=teacher.head(), high={k: v.copy() for k, v in high.items()})


def train_high_amplifier(
    teacher: DetectorParams,
    train_set: SceneDataset,
    epochs: int,
    config: SGDConfig,
    seed: int,
    basis: object = 'haar',
    val_set: Optional[SceneDataset] = None,
    evaluation: EvaluationConfig = EvaluationConfig(),
) -> Tuple[Params, TrainResult]:
    """Trains a fresh head on the fused high bands of the teacher's pyramid with the detection loss.

    The teacher is only read. With ``epochs=0`` the freshly initialized head is returned.
    """
    spec = teacher.spec
    before = teacher.checksum()
    features = high_features(teacher_pyramids(teacher, train_set), basis)
    val_features = high_features(teacher_pyramids(teacher, val_set), basis) if val_set is not None else None
    head = init_head(spec.pyramid_width, spec.num_classes, seed)

    def step(tensors: Params, indices: np.ndarray) -> Tuple[Dict[str, float], Params]:
        outputs = [head_forward(tensors, level[indices]) for level in features]
        parts, grad_predictions = detection_loss(
            [p for p, _ in outputs], train_set.batch_annotations(indices), evaluation.smooth_l1_beta
        )
        grads: Params = {}
        for (_, cache), grad in zip(outputs, grad_predictions):
            head_backward(tensors, cache, grad, grads)
        return {'total': parts.total, 'det': parts.total}, {name: grads[name] for name in tensors}

    hook = None
    if val_features is not None:

        def hook(epoch: int, tensors: Params) -> Dict[str, float]:
            return {'val_ap50': evaluate_head(tensors, val_features, val_set, evaluation)}  # type: ignore

    result = run_sgd(head, step, len(train_set), epochs, config, seed, 'high-frequency amplifier', hook)
    if teacher.checksum() != before:
        raise FrozenParameterError('Teacher parameters changed while training the high-frequency amplifier')
    return result.params, result


def evaluate_head(
    head: Params, features: Sequence[Tensor], dataset: SceneDataset, evaluation: EvaluationConfig
) -> float:
    """AP at IoU 0.5 of a head applied to precomputed per-level features of a dataset."""
    predictions = [head_forward(head, level)[0] for level in features]
    return evaluate_predictions(predictions, dataset.annotations, dataset.image_size, evaluation)


class DistillResult(NamedTuple):
    params: DetectorParams
    train: TrainResult


def distill_student(
    teacher: Optional[DetectorParams],
    student: DetectorParams,
    train_set: SceneDataset,
    amplifiers: Optional[AmplifierSet],
    config: DistillConfig,
    optimizer: SGDConfig,
    epochs: int,
    seed: int,
    val_set: Optional[SceneDataset] = None,
    evaluation: EvaluationConfig = EvaluationConfig(),
    label: str = 'student',
) -> DistillResult:
    """Trains the student on the joint objective; every epoch record holds the mean detection loss, the mean
    unweighted distillation terms and, with a validation set, ``val_ap50``.

    With every distillation term switched off this is plain supervised training, bit for bit, and the teacher may
    be None.
    """
    if teacher is None:
        if config.active:
            raise ValueError(f'{label}: distillation needs a teacher')
        teacher = student
    if teacher.spec.pyramid_width != student.spec.pyramid_width or teacher.spec.num_classes != student.spec.num_classes:
        raise ShapeError(f'Teacher {teacher.spec} and student {student.spec} pyramids are not compatible')
    teacher_sum = teacher.checksum()
    amplifier_sum = amplifiers.checksum() if amplifiers is not None else None

    pyramids: List[Tensor] = []
    disw_maps: Optional[List[Tensor]] = None
    if config.active:
        pyramids = teacher_pyramids(teacher, train_set)
        if config.disw:
            disw_maps = build_disw_batch(train_set.annotations, train_set.image_size, [p.shape[2:] for p in pyramids])
        logger.info(f'Cached teacher pyramid {[p.shape for p in pyramids]} for {label}')

    def step(tensors: Params, indices: np.ndarray) -> Tuple[Dict[str, float], Params]:
        current = student.replace(tensors)
        result = total_distill_loss(
            current,
            train_set.images[indices],
            train_set.batch_annotations(indices),
            [p[indices] for p in pyramids],
            amplifiers,
            [m[indices] for m in disw_maps] if disw_maps is not None else None,
            config,
            evaluation.smooth_l1_beta,
        )
        return result.parts, result.grads

    def hook(epoch: int, tensors: Params) -> Dict[str, float]:
        if teacher.checksum() != teacher_sum or (amplifiers is not None and amplifiers.checksum() != amplifier_sum):
            raise FrozenParameterError(f'Teacher or amplifier parameters changed during epoch {epoch} of {label}')
        if val_set is None:
            return {}
        return {'val_ap50': evaluate_detector(student.replace(tensors), val_set, evaluation)}

    result = run_sgd(student.tensors, step, len(train_set), epochs, optimizer, seed, label, hook)
    return DistillResult(params=student.replace(result.params), train=result)
