"""First-order separable 2D orthonormal wavelet analysis of feature maps.

Rows are filtered and decimated first, then columns, with periodic extension. The three detail bands are stored in
the fixed orientation order [row-high/col-low, row-low/col-high, row-high/col-high].
"""

from __future__ import annotations

import logging
import math
from typing import Dict, List, NamedTuple, Tuple, Type

import numpy as np

from .tensor import ShapeError, Tensor, conv2d, conv2d_backward, upsample_nearest2x, upsample_nearest2x_backward
from .util import TrackSubClasses

logger = logging.getLogger(__name__)

ORIENTATIONS = ('row-high/col-low', 'row-low/col-high', 'row-high/col-high')
ORTHONORMALITY_TOLERANCE = 1e-12


class SpectralComponents(NamedTuple):
    """The low band and the three oriented high bands of one decomposition."""

    low: Tensor  # ... x H/2 x W/2
    high: Tensor  # ... x 3 x H/2 x W/2


class WaveletBasis(object, metaclass=TrackSubClasses):
    """An orthonormal two-channel filter bank; ``h1`` is the quadrature mirror of ``h0``."""

    __subclasses__: Dict[str, Type['WaveletBasis']] = {}

    __kind__: str = ''
    dec_lo: Tuple[float, ...] = ()

    def __init__(self) -> None:
        self.h0 = np.asarray(self.dec_lo, dtype=np.float64)
        length = self.h0.size
        self.h1 = np.array([(-1) ** n * self.h0[length - 1 - n] for n in range(length)])
        self.check_orthonormal()

    def __repr__(self) -> str:
        return f'<{self.__class__.__name__} {self.__kind__} ({self.length} taps)>'

    @property
    def name(self) -> str:
        return self.__kind__

    @property
    def length(self) -> int:
        return self.h0.size

    def check_orthonormal(self) -> None:
        """Checks unit norms, mutual orthogonality and orthogonality to even shifts of both filters."""
        errors: List[str] = []
        for label, a, b, expected in (
            ('<h0,h0>', self.h0, self.h0, 1.0),
            ('<h1,h1>', self.h1, self.h1, 1.0),
            ('<h0,h1>', self.h0, self.h1, 0.0),
        ):
            value = float(np.dot(a, b))
            if abs(value - expected) > ORTHONORMALITY_TOLERANCE:
                errors.append(f'{label} = {value!r}')
        for shift in range(2, self.length, 2):
            value = float(np.dot(self.h0[:-shift], self.h0[shift:]))
            if abs(value) > ORTHONORMALITY_TOLERANCE:
                errors.append(f'<h0,h0 shifted by {shift}> = {value!r}')
        if errors:
            raise ValueError(f'Wavelet basis {self.__kind__} is not orthonormal: {", ".join(errors)}')

    @classmethod
    def basis_documentation(cls) -> str:
        return '\n'.join(f'  * {sc.__kind__} - {sc.__doc__}' for sc in TrackSubClasses.sorted_by_kind(cls))


class HaarBasis(WaveletBasis):
    """Haar, 2 taps"""

    __kind__ = 'haar'
    dec_lo = (1 / math.sqrt(2), 1 / math.sqrt(2))


class Daubechies4Basis(WaveletBasis):
    """Daubechies with 4 vanishing moments, 8 taps"""

    __kind__ = 'db4'
    __aliases__ = ('daubechies4',)
    dec_lo = (
        -0.010597401785069032,
        0.0328830116668852,
        0.030841381835560764,
        -0.18703481171909309,
        -0.027983769416859854,
        0.6308807679298589,
        0.7148465705529157,
        0.2303778133088965,
    )


class Symlet4Basis(WaveletBasis):
    """Symlets with 4 vanishing moments, 8 taps"""

    __kind__ = 'sym4'
    __aliases__ = ('symlet4',)
    dec_lo = (
        -0.07576571478927333,
        -0.02963552764599851,
        0.49761866763201545,
        0.8037387518059161,
        0.29785779560527736,
        -0.09921954357684722,
        -0.012603967262037833,
        0.0322231006040427,
    )


_basis_cache: Dict[str, WaveletBasis] = {}


def get_basis(name: str) -> WaveletBasis:
    """Returns the (cached, verified) basis registered under ``name``."""
    basis_cls = WaveletBasis.__subclasses__.get(name)
    if basis_cls is None:
        raise ValueError(f'Unknown wavelet basis {name!r} (supported: {available_bases()})')
    if basis_cls.__kind__ not in _basis_cache:
        _basis_cache[basis_cls.__kind__] = basis_cls()
    return _basis_cache[basis_cls.__kind__]


def available_bases() -> List[str]:
    return [sc.__kind__ for sc in TrackSubClasses.sorted_by_kind(WaveletBasis)]


def _as_basis(basis: object) -> WaveletBasis:
    return get_basis(basis) if isinstance(basis, str) else basis  # type: ignore[return-value]


def _row_kernel(h: np.ndarray) -> Tuple[np.ndarray, dict]:
    return h[np.newaxis, :], {'stride': (1, 2), 'padding': ((0, 0), (0, h.size - 2)), 'mode': 'periodic'}


def _col_kernel(h: np.ndarray) -> Tuple[np.ndarray, dict]:
    return h[:, np.newaxis], {'stride': (2, 1), 'padding': ((0, h.size - 2), (0, 0)), 'mode': 'periodic'}


def _filter(x: Tensor, h: np.ndarray, along_rows: bool) -> Tensor:
    kernel, kwargs = _row_kernel(h) if along_rows else _col_kernel(h)
    return conv2d(x, kernel, **kwargs)


def _filter_adjoint(g: Tensor, h: np.ndarray, along_rows: bool, extents: Tuple[int, int]) -> Tensor:
    kernel, kwargs = _row_kernel(h) if along_rows else _col_kernel(h)
    placeholder = np.broadcast_to(0.0, g.shape[:2] + extents)
    grad, _, _ = conv2d_backward(g, placeholder, kernel, need_kernel_grad=False, **kwargs)
    return grad


def _check_extents(shape: Tuple[int, ...], basis: WaveletBasis) -> None:
    if len(shape) < 2:
        raise ShapeError(f'Need at least two axes to decompose, got shape {shape}')
    height, width = shape[-2:]
    if height % 2 or width % 2:
        raise ShapeError(f'Spatial extents must be even, got {height}x{width}')
    if height < basis.length or width < basis.length:
        raise ShapeError(f'Spatial extents {height}x{width} are shorter than the {basis.name} filter ({basis.length})')


def dwt2d(feature_map: Tensor, basis: object = 'haar') -> SpectralComponents:
    """One level of the separable 2D transform of every map in ``... x H x W``.

    :param feature_map: Maps with arbitrary leading axes (e.g. C x H x W or N x C x H x W).
    :param basis: A WaveletBasis or its registered name.
    :returns: low of shape ... x H/2 x W/2 and high of shape ... x 3 x H/2 x W/2.
    """
    basis = _as_basis(basis)
    x = np.asarray(feature_map, dtype=np.float64)
    _check_extents(x.shape, basis)
    lead, (height, width) = x.shape[:-2], x.shape[-2:]
    flat = x.reshape((-1, 1, height, width))

    row_low = _filter(flat, basis.h0, along_rows=True)
    row_high = _filter(flat, basis.h1, along_rows=True)
    low = _filter(row_low, basis.h0, along_rows=False)
    bands = (
        _filter(row_high, basis.h0, along_rows=False),
        _filter(row_low, basis.h1, along_rows=False),
        _filter(row_high, basis.h1, along_rows=False),
    )
    half = (height // 2, width // 2)
    return SpectralComponents(
        low=low.reshape(lead + half),
        high=np.concatenate(bands, axis=1).reshape(lead + (3,) + half),
    )


def _check_components(low: Tensor, high: Tensor) -> None:
    if high.ndim != low.ndim + 1 or high.shape[-3] != 3 or high.shape[:-3] + high.shape[-2:] != low.shape:
        raise ShapeError(f'High band {high.shape} does not match low band {low.shape}')


def dwt2d_backward(grad: SpectralComponents, basis: object = 'haar') -> Tensor:
    """Exact adjoint of :func:`dwt2d`: maps gradients on (low, high) back onto the source maps."""
    basis = _as_basis(basis)
    g_low = np.asarray(grad.low, dtype=np.float64)
    g_high = np.asarray(grad.high, dtype=np.float64)
    _check_components(g_low, g_high)
    lead, (half_h, half_w) = g_low.shape[:-2], g_low.shape[-2:]
    height, width = 2 * half_h, 2 * half_w
    _check_extents(lead + (height, width), basis)

    flat_low = g_low.reshape((-1, 1, half_h, half_w))
    flat_high = g_high.reshape((-1, 3, half_h, half_w))
    column_extents = (height, half_w)
    g_row_low = _filter_adjoint(flat_low, basis.h0, False, column_extents) + _filter_adjoint(
        flat_high[:, 1:2], basis.h1, False, column_extents
    )
    g_row_high = _filter_adjoint(flat_high[:, 0:1], basis.h0, False, column_extents) + _filter_adjoint(
        flat_high[:, 2:3], basis.h1, False, column_extents
    )
    g_map = _filter_adjoint(g_row_low, basis.h0, True, (height, width)) + _filter_adjoint(
        g_row_high, basis.h1, True, (height, width)
    )
    return g_map.reshape(lead + (height, width))


def idwt2d(components: SpectralComponents, basis: object = 'haar') -> Tensor:
    """Inverse transform; for an orthonormal basis the inverse is the adjoint."""
    return dwt2d_backward(components, basis)


def fuse_high(high: Tensor) -> Tensor:
    """Sums the three orientations and upsamples the result 2x (nearest neighbour): ... x 3 x h x w -> ... x 2h x 2w."""
    high = np.asarray(high, dtype=np.float64)
    if high.ndim < 3 or high.shape[-3] != 3:
        raise ShapeError(f'Expected an orientation axis of extent 3 at position -3, got shape {high.shape}')
    return upsample_nearest2x(high.sum(axis=-3))


def fuse_high_backward(grad: Tensor) -> Tensor:
    """Adjoint of :func:`fuse_high`."""
    summed = upsample_nearest2x_backward(np.asarray(grad, dtype=np.float64))
    return np.repeat(summed[..., np.newaxis, :, :], 3, axis=-3)
