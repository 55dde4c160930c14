"""Dense real tensors: shape checks, 2D convolution and its adjoint, 2x resampling, seeded generators and the raw
dump format.

A tensor is a ``numpy.ndarray`` of 64-bit reals in row-major order. Operations accept a single ``C x H x W`` map or a
batch ``N x C x H x W``; no other broadcasting is performed.
"""

from __future__ import annotations

import json
import logging
from os import PathLike
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Padding = Union[int, Tuple[Tuple[int, int], Tuple[int, int]]]
Stride = Union[int, Tuple[int, int]]

PADDING_MODES = ('zero', 'periodic')
DUMP_DTYPE_TAG = '<f8'
DUMP_BYTE_ORDER = 'little'


class ShapeError(ValueError):
    """Exception raised when tensor extents do not satisfy an operation's preconditions."""

    ...


class NonFiniteError(ArithmeticError):
    """Exception raised when an operation produces NaN or infinite values."""

    def __init__(self, what: str, count: int) -> None:
        ArithmeticError.__init__(self)
        self.what = what
        self.count = count

    def __str__(self) -> str:
        return f'{self.__class__.__name__}: {self.count} non-finite value(s) produced by {self.what}'


class TensorFormatError(ValueError):
    """Exception raised on a corrupt or unsupported tensor dump."""

    ...


def check_finite(tensor: Tensor, what: str) -> Tensor:
    """Raises NonFiniteError if the tensor holds any NaN or infinite entry; returns the tensor otherwise."""
    finite = np.isfinite(tensor)
    if not finite.all():
        raise NonFiniteError(what, int(finite.size - np.count_nonzero(finite)))
    return tensor


def make_rng(seed: int, *streams: int) -> np.random.Generator:
    """Returns the seeded generator used everywhere in the package (numpy's PCG64).

    With no ``streams`` this is exactly ``numpy.random.default_rng(seed)``; additional integers select independent
    child streams, e.g. ``make_rng(seed, epoch)``.

    :param seed: A non-negative 64-bit seed.
    :param streams: Optional stream identifiers mixed into the seed sequence.
    """
    if seed < 0 or any(s < 0 for s in streams):
        raise ValueError(f'Seeds must be non-negative, got {seed} {streams}')
    if streams:
        return np.random.default_rng([seed, *streams])
    return np.random.default_rng(seed)


def _as_batch(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 4:
        return x, True
    if x.ndim == 3:
        return x[np.newaxis], False
    raise ShapeError(f'Expected a C x H x W or N x C x H x W tensor, got shape {x.shape}')


def _pad_widths(padding: Padding) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        pads = ((p, p), (p, p))
    else:
        (top, bottom), (left, right) = padding
        pads = ((int(top), int(bottom)), (int(left), int(right)))
    if min(pads[0] + pads[1]) < 0:
        raise ShapeError(f'Padding must be non-negative, got {padding}')
    return pads


def _strides(stride: Stride) -> Tuple[int, int]:
    if isinstance(stride, (int, np.integer)):
        sh = sw = int(stride)
    else:
        sh, sw = (int(s) for s in stride)
    if sh < 1 or sw < 1:
        raise ShapeError(f'Stride must be >= 1, got {stride}')
    return sh, sw


def pad2d(x: Tensor, padding: Padding, mode: str = 'zero') -> Tensor:
    """Pads the two trailing axes with zeros or by circular extension."""
    pads = _pad_widths(padding)
    width = [(0, 0)] * (x.ndim - 2) + list(pads)
    if mode == 'zero':
        return np.pad(x, width)
    if mode == 'periodic':
        return np.pad(x, width, mode='wrap')
    raise ValueError(f'Unknown padding mode {mode!r} (supported: {PADDING_MODES})')


def _fold_axis(g: Tensor, axis: int, before: int, after: int, extent: int) -> Tensor:
    """Adds the circularly extended border of axis ``axis`` back onto the cells it was copied from."""
    if before == 0 and after == 0:
        return g
    index = np.arange(-before, extent + after) % extent
    moved = np.moveaxis(g, axis, 0)
    folded = np.zeros((extent,) + moved.shape[1:])
    np.add.at(folded, index, moved)
    return np.moveaxis(folded, 0, axis)


def unpad2d(g: Tensor, extents: Tuple[int, int], padding: Padding, mode: str = 'zero') -> Tensor:
    """Adjoint of :func:`pad2d`: maps a gradient on the padded tensor back onto the unpadded one."""
    (top, bottom), (left, right) = _pad_widths(padding)
    height, width = extents
    if mode == 'zero':
        return g[..., top : top + height, left : left + width]
    if mode == 'periodic':
        g = _fold_axis(g, g.ndim - 2, top, bottom, height)
        return _fold_axis(g, g.ndim - 1, left, right, width)
    raise ValueError(f'Unknown padding mode {mode!r} (supported: {PADDING_MODES})')


def _windows(x: Tensor, kernel: Tensor, stride: Stride, padding: Padding, mode: str) -> Tensor:
    """Returns the N x C x Ho x Wo x kh x kw view of every receptive field."""
    kh, kw = kernel.shape[-2:]
    pads = _pad_widths(padding)
    sh, sw = _strides(stride)
    height = x.shape[-2] + sum(pads[0])
    width = x.shape[-1] + sum(pads[1])
    if kh > height or kw > width:
        raise ShapeError(f'Kernel {kernel.shape} larger than padded input {(height, width)} (input {x.shape})')
    xp = pad2d(x, pads, mode)
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]


def _check_kernel(x: Tensor, kernel: Tensor, bias: Optional[Tensor]) -> None:
    if kernel.ndim == 2:
        if bias is not None:
            raise ShapeError('A bias requires a full O x C x kh x kw kernel')
    elif kernel.ndim == 4:
        if kernel.shape[1] != x.shape[1]:
            raise ShapeError(f'Kernel {kernel.shape} expects {kernel.shape[1]} input channels, input has {x.shape}')
        if bias is not None and bias.shape != (kernel.shape[0],):
            raise ShapeError(f'Bias {bias.shape} does not match kernel {kernel.shape}')
    else:
        raise ShapeError(f'Kernel must be kh x kw (shared by all channels) or O x C x kh x kw, got {kernel.shape}')


def conv2d(
    x: Tensor,
    kernel: Tensor,
    stride: Stride = 1,
    padding: Padding = 0,
    mode: str = 'zero',
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Strided 2D cross-correlation.

    A ``kh x kw`` kernel is applied to every channel independently; an ``O x C x kh x kw`` kernel mixes channels as a
    regular convolution layer. Output extents follow ``(extent + padding - kernel) // stride + 1``.

    :param x: Input of shape C x H x W or N x C x H x W.
    :param kernel: Kernel of shape kh x kw or O x C x kh x kw.
    :param stride: A single stride or a (row, column) pair.
    :param padding: A single amount for all four sides or ((top, bottom), (left, right)).
    :param mode: 'zero' or 'periodic' (circular extension).
    :param bias: Optional per-output-channel bias (full kernels only).
    :returns: The correlation, batched if the input was.
    """
    x4, batched = _as_batch(np.asarray(x, dtype=np.float64))
    _check_kernel(x4, kernel, bias)
    win = _windows(x4, kernel, stride, padding, mode)
    if kernel.ndim == 2:
        out = np.einsum('nchwij,ij->nchw', win, kernel)
    else:
        out = np.einsum('nchwij,ocij->nohw', win, kernel, optimize=True)
    if bias is not None:
        out = out + bias[:, np.newaxis, np.newaxis]
    check_finite(out, 'conv2d')
    return out if batched else out[0]


def conv2d_backward(
    grad: Tensor,
    x: Tensor,
    kernel: Tensor,
    stride: Stride = 1,
    padding: Padding = 0,
    mode: str = 'zero',
    need_kernel_grad: bool = True,
    need_input_grad: bool = True,
) -> Tuple[Optional[Tensor], Optional[Tensor], Optional[Tensor]]:
    """Exact adjoint of :func:`conv2d`.

    :param grad: Gradient with respect to the output of the forward call.
    :param x: The forward input.
    :param kernel: The forward kernel.
    :returns: (gradient wrt input, gradient wrt kernel, gradient wrt bias); the input gradient is None when
        ``need_input_grad`` is False, the last two when ``need_kernel_grad`` is False. The bias gradient is always None
        for shared kh x kw kernels.
    """
    x4, batched = _as_batch(np.asarray(x, dtype=np.float64))
    g4 = grad if batched else grad[np.newaxis]
    pads = _pad_widths(padding)
    sh, sw = _strides(stride)
    kh, kw = kernel.shape[-2:]
    out_h, out_w = g4.shape[-2:]

    grad_kernel = grad_bias = None
    if need_kernel_grad:
        win = _windows(x4, kernel, stride, padding, mode)
        if win.shape[2:4] != g4.shape[2:4]:
            raise ShapeError(f'Gradient {grad.shape} does not match the forward output of input {x.shape}')
        if kernel.ndim == 2:
            grad_kernel = np.einsum('nchw,nchwij->ij', g4, win)
        else:
            grad_kernel = np.einsum('nohw,nchwij->ocij', g4, win, optimize=True)
            grad_bias = g4.sum(axis=(0, 2, 3))

    if not need_input_grad:
        return None, grad_kernel, grad_bias

    padded_shape = x4.shape[:2] + (x4.shape[2] + sum(pads[0]), x4.shape[3] + sum(pads[1]))
    grad_padded = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            if kernel.ndim == 2:
                contribution = g4 * kernel[i, j]
            else:
                contribution = np.einsum('nohw,oc->nchw', g4, kernel[:, :, i, j], optimize=True)
            grad_padded[:, :, i : i + sh * (out_h - 1) + 1 : sh, j : j + sw * (out_w - 1) + 1 : sw] += contribution
    grad_input = unpad2d(grad_padded, x4.shape[2:], pads, mode)
    return (grad_input if batched else grad_input[0]), grad_kernel, grad_bias


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicates every cell of the two trailing axes into a 2 x 2 block."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError(f'Need at least two axes to upsample, got shape {x.shape}')
    return check_finite(x.repeat(2, axis=-2).repeat(2, axis=-1), 'upsample_nearest2x')


def upsample_nearest2x_backward(grad: Tensor) -> Tensor:
    """Adjoint of :func:`upsample_nearest2x`: sums each 2 x 2 block."""
    height, width = grad.shape[-2:]
    if height % 2 or width % 2:
        raise ShapeError(f'Gradient of a 2x upsampling must have even extents, got {grad.shape}')
    return grad.reshape(grad.shape[:-2] + (height // 2, 2, width // 2, 2)).sum(axis=(-3, -1))


def avg_pool2x(x: Tensor) -> Tensor:
    """2 x 2 average pooling with stride 2 over the two trailing axes."""
    height, width = x.shape[-2:]
    if height % 2 or width % 2:
        raise ShapeError(f'Average pooling needs even extents, got {x.shape}')
    return x.reshape(x.shape[:-2] + (height // 2, 2, width // 2, 2)).mean(axis=(-3, -1))


def dumps(tensor: Tensor) -> bytes:
    """Serializes a tensor: one JSON header line followed by the raw little-endian 64-bit payload."""
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim == 0 or min(arr.shape) <= 0:
        raise TensorFormatError(f'Cannot dump a tensor with empty shape {list(arr.shape)}')
    header = {'shape': list(arr.shape), 'dtype': DUMP_DTYPE_TAG, 'byte_order': DUMP_BYTE_ORDER}
    return json.dumps(header).encode('utf-8') + b'\n' + arr.astype(DUMP_DTYPE_TAG).tobytes(order='C')


def loads(raw: bytes) -> Tensor:
    """Inverse of :func:`dumps`; validates the header and the payload length."""
    header_bytes, sep, payload = raw.partition(b'\n')
    if not sep:
        raise TensorFormatError('Missing header terminator')
    try:
        header = json.loads(header_bytes.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TensorFormatError(f'Corrupt header: {e}') from e
    if not isinstance(header, dict) or set(header) != {'shape', 'dtype', 'byte_order'}:
        raise TensorFormatError(f'Header must hold exactly shape, dtype and byte_order: {header}')
    shape = header['shape']
    if (
        not isinstance(shape, list)
        or not shape
        or not all(isinstance(n, int) and not isinstance(n, bool) and n > 0 for n in shape)
    ):
        raise TensorFormatError(f'Invalid shape {shape}')
    if header['dtype'] != DUMP_DTYPE_TAG or header['byte_order'] != DUMP_BYTE_ORDER:
        raise TensorFormatError(f"Unsupported dtype {header['dtype']!r} / byte order {header['byte_order']!r}")
    expected = int(np.prod(shape)) * 8
    if len(payload) != expected:
        raise TensorFormatError(f'Payload is {len(payload)} bytes, shape {shape} needs {expected}')
    return np.frombuffer(payload, dtype=DUMP_DTYPE_TAG).reshape(shape).astype(np.float64)


def dump(tensor: Tensor, path: Union[str, PathLike]) -> None:
    """Writes a tensor to ``path`` in the dump format."""
    Path(path).write_bytes(dumps(tensor))
    logger.debug(f'Dumped tensor of shape {np.shape(tensor)} to {path}')


def load(path: Union[str, PathLike]) -> Tensor:
    """Reads a tensor written by :func:`dump`."""
    return loads(Path(path).read_bytes())
