"""Brute-force oracles: finite-difference gradients and loop-based re-implementations of the transform, convolution
and distillation losses.

Nothing here calls into the optimized code paths except for reading filter coefficients; keep it that way.
"""

from __future__ import annotations

import logging
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, make_rng
from .wavelet import WaveletBasis, get_basis

logger = logging.getLogger(__name__)

DEFAULT_FD_STEP = 1e-5
GRADCHECK_STEP = 1e-6
GRADCHECK_TOLERANCE = 1e-5
GRADCHECK_SCALE = 0.1
GRADCHECK_SAMPLES = 32


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, step: float = DEFAULT_FD_STEP) -> Tensor:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate of ``x``.

    Coordinates where either evaluation is not finite are NaN in the result and logged.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    bad = []
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = f(x)
        flat[i] = original - step
        minus = f(x)
        flat[i] = original
        if math.isfinite(plus) and math.isfinite(minus):
            out[i] = (plus - minus) / (2 * step)
        else:
            out[i] = np.nan
            bad.append(np.unravel_index(i, x.shape))
    if bad:
        logger.warning(f'Non-finite function values at {len(bad)} coordinate(s): {bad[:10]}')
    return grad


def relative_error(analytic: float, numeric: float, scale: float = GRADCHECK_SCALE) -> float:
    """``|a - n| / (scale + max(|a|, |n|))``; NaN counts as failure.

    Against a tolerance ``tol`` this is ``|a - n| <= tol * scale + tol * max(|a|, |n|)``: relative for gradients
    well above ``scale`` and absolute, at ``tol * scale``, for those below it.
    """
    if not (math.isfinite(analytic) and math.isfinite(numeric)):
        return math.inf
    return abs(analytic - numeric) / (scale + max(abs(analytic), abs(numeric)))


class GradCheckReport(object):
    """Outcome of :func:`gradcheck`: per-parameter maximum error and the coordinates over tolerance."""

    def __init__(self, step: float, tolerance: float) -> None:
        self.step = step
        self.tolerance = tolerance
        self.max_errors: Dict[str, float] = {}
        self.failures: Dict[str, List[Tuple[int, ...]]] = {}

    def __repr__(self) -> str:
        return f'<GradCheckReport {len(self.max_errors)} tensors, max error {self.max_error:.3g}, passed={self.passed}>'

    def add(self, name: str, index: Tuple[int, ...], error: float) -> None:
        self.max_errors[name] = max(self.max_errors.get(name, 0.0), error)
        if not error <= self.tolerance:
            self.failures.setdefault(name, []).append(index)

    @property
    def max_error(self) -> float:
        return max(self.max_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> Dict[str, Any]:
        return {
            'step': self.step,
            'tolerance': self.tolerance,
            'max_error': self.max_error,
            'passed': self.passed,
            'max_errors': dict(self.max_errors),
            'failures': {k: [list(i) for i in v] for k, v in self.failures.items()},
        }


def _central_difference(
    loss_fn: Callable[[Dict[str, Tensor]], Tuple[float, Dict[str, Tensor]]],
    params: Dict[str, Tensor],
    name: str,
    index: Tuple[int, ...],
    step: float,
) -> float:
    values = []
    for sign in (1.0, -1.0):
        shifted = dict(params)
        shifted[name] = params[name].copy()
        shifted[name][index] += sign * step
        values.append(loss_fn(shifted)[0])
    return (values[0] - values[1]) / (2 * step)


def gradcheck(
    loss_fn: Callable[[Dict[str, Tensor]], Tuple[float, Dict[str, Tensor]]],
    params: Dict[str, Tensor],
    step: float = GRADCHECK_STEP,
    tolerance: float = GRADCHECK_TOLERANCE,
    samples: int = GRADCHECK_SAMPLES,
    seed: int = 0,
    report: Optional[GradCheckReport] = None,
) -> GradCheckReport:
    """Compares the analytic gradients of ``loss_fn`` with central differences on up to ``samples`` random
    coordinates of every tensor; tensors with at most ``samples`` entries are checked in full.

    A coordinate over tolerance is differenced once more at ``step / 10`` and keeps the smaller error, so a ReLU
    kink inside the step does not count as a wrong gradient.

    :param loss_fn: Maps named tensors to (loss, gradients of the same names).
    :param report: Report to extend, so several checks can share one.
    """
    report = report if report is not None else GradCheckReport(step, tolerance)
    _, analytic = loss_fn(params)
    rng = make_rng(seed)
    for name, value in params.items():
        size = value.size
        picks = rng.choice(size, size=samples, replace=False) if size > samples else np.arange(size)
        for flat_index in sorted(int(i) for i in picks):
            index = tuple(int(i) for i in np.unravel_index(flat_index, value.shape))
            expected = float(analytic[name][index])
            error = relative_error(expected, _central_difference(loss_fn, params, name, index, step))
            if not error <= tolerance:
                retry = relative_error(expected, _central_difference(loss_fn, params, name, index, step / 10))
                error = min(error, retry)
            report.add(name, index, error)
    logger.info(f'Gradient check: {report!r}')
    return report


def _basis(basis: object) -> WaveletBasis:
    return get_basis(basis) if isinstance(basis, str) else basis  # type: ignore[return-value]


def reference_dwt2d(feature_map: Tensor, basis: object = 'haar') -> Tuple[Tensor, Tensor]:
    """Loop-based one-level transform of a C x H x W map with explicit periodic indexing; returns (low, high)."""
    b = _basis(basis)
    h0 = [float(v) for v in b.h0]
    h1 = [float(v) for v in b.h1]
    channels, height, width = feature_map.shape
    rows = {'low': np.zeros((channels, height, width // 2)), 'high': np.zeros((channels, height, width // 2))}
    for c in range(channels):
        for i in range(height):
            for k in range(width // 2):
                lo = hi = 0.0
                for n in range(len(h0)):
                    v = feature_map[c, i, (2 * k + n) % width]
                    lo += h0[n] * v
                    hi += h1[n] * v
                rows['low'][c, i, k] = lo
                rows['high'][c, i, k] = hi

    def columns(src: Tensor, h: List[float]) -> Tensor:
        out = np.zeros((channels, height // 2, width // 2))
        for c in range(channels):
            for k in range(height // 2):
                for j in range(width // 2):
                    out[c, k, j] = sum(h[n] * src[c, (2 * k + n) % height, j] for n in range(len(h)))
        return out

    low = columns(rows['low'], h0)
    high = np.stack([columns(rows['high'], h0), columns(rows['low'], h1), columns(rows['high'], h1)], axis=1)
    return low, high


def reference_conv2d(
    x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Optional[Tensor] = None
) -> Tensor:
    """Direct zero-padded correlation of a C x H x W input with an O x C x kh x kw kernel."""
    channels, height, width = x.shape
    out_channels, _, kh, kw = kernel.shape
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((out_channels, out_h, out_w))
    for o in range(out_channels):
        for i in range(out_h):
            for j in range(out_w):
                total = 0.0 if bias is None else float(bias[o])
                for c in range(channels):
                    for u in range(kh):
                        for v in range(kw):
                            r = i * stride + u - padding
                            s = j * stride + v - padding
                            if 0 <= r < height and 0 <= s < width:
                                total += kernel[o, c, u, v] * x[c, r, s]
                out[o, i, j] = total
    return out


def _reference_head(head: Dict[str, Tensor], feature: Tensor) -> Tuple[Tensor, Tensor]:
    h = np.maximum(reference_conv2d(feature, head['conv1.weight'], padding=1, bias=head['conv1.bias']), 0.0)
    h = np.maximum(reference_conv2d(h, head['conv2.weight'], padding=1, bias=head['conv2.bias']), 0.0)
    return (
        reference_conv2d(h, head['cls.weight'], bias=head['cls.bias']),
        reference_conv2d(h, head['reg.weight'], bias=head['reg.bias']),
    )


def _reference_discrepancy(student: Tuple[Tensor, Tensor], teacher: Tuple[Tensor, Tensor], beta: float) -> float:
    total = 0.0
    for s, t in zip(student[0].ravel(), teacher[0].ravel()):
        p = 1.0 / (1.0 + math.exp(-s))
        q = 1.0 / (1.0 + math.exp(-t))
        total += q * math.log(q / p) + (1.0 - q) * math.log((1.0 - q) / (1.0 - p))
    for s, t in zip(student[1].ravel(), teacher[1].ravel()):
        d = abs(s - t)
        total += 0.5 * d * d / beta if d < beta else d - 0.5 * beta
    return total


def _reference_fuse(high: Tensor) -> Tensor:
    channels, _, h, w = high.shape
    out = np.zeros((channels, 2 * h, 2 * w))
    for c in range(channels):
        for i in range(2 * h):
            for j in range(2 * w):
                out[c, i, j] = high[c, 0, i // 2, j // 2] + high[c, 1, i // 2, j // 2] + high[c, 2, i // 2, j // 2]
    return out


def reference_explicit_loss(
    teacher_pyramid: Sequence[Tensor],
    student_pyramid: Sequence[Tensor],
    disw_maps: Optional[Sequence[Tensor]],
    basis: object = 'haar',
    alpha: float = 1.0,
    beta: float = 1.0,
) -> float:
    """Explicit loss of one image (levels C x H x W, maps h x w) by direct summation."""
    total = 0.0
    for level, (t, s) in enumerate(zip(teacher_pyramid, student_pyramid)):
        t_low, t_high = reference_dwt2d(t, basis)
        s_low, s_high = reference_dwt2d(s, basis)
        channels, h, w = t_low.shape
        for c in range(channels):
            for i in range(h):
                for j in range(w):
                    p = 1.0 if disw_maps is None else float(disw_maps[level][i, j])
                    total += alpha * p * (t_low[c, i, j] - s_low[c, i, j]) ** 2
                    for k in range(3):
                        total += beta * p * (t_high[c, k, i, j] - s_high[c, k, i, j]) ** 2
    return total


def reference_implicit_loss(
    teacher_pyramid: Sequence[Tensor],
    student_pyramid: Sequence[Tensor],
    full_head: Dict[str, Tensor],
    high_head: Dict[str, Tensor],
    basis: object = 'haar',
    lam: float = 1.0,
    mu: float = 1.0,
    beta: float = 1.0,
) -> float:
    """Implicit loss of one image: materializes every amplifier prediction and sums the discrepancies."""
    total = 0.0
    for t, s in zip(teacher_pyramid, student_pyramid):
        total += lam * _reference_discrepancy(_reference_head(full_head, s), _reference_head(full_head, t), beta)
        t_fused = _reference_fuse(reference_dwt2d(t, basis)[1])
        s_fused = _reference_fuse(reference_dwt2d(s, basis)[1])
        high_pair = _reference_head(high_head, s_fused), _reference_head(high_head, t_fused)
        total += mu * _reference_discrepancy(*high_pair, beta)
    return total
