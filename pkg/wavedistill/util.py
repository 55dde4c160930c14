"""A few utilities used elsewhere."""

from __future__ import annotations

import hashlib
import logging
from typing import Any, Dict, Iterable, List, Tuple, Type

import numpy as np

logger = logging.getLogger(__name__)


class TrackSubClasses(type):
    """A metaclass that stores subclass name-to-class mappings in the base class."""

    @staticmethod
    def sorted_by_kind(cls: Type[Any]) -> List[Any]:
        # aliases map several names to one class: key on the canonical kind
        by_kind = {it.__kind__: it for it in cls.__subclasses__.values() if it.__kind__}
        return [item for _, item in sorted(by_kind.items())]

    def __init__(cls, name: str, bases: Tuple[type], namespace: dict) -> None:
        for base in bases:
            if base == object:
                continue

            if namespace.get('__kind__'):
                subclasses = getattr(base, '__subclasses__', None)
                if isinstance(subclasses, dict):
                    logger.debug(f'Registering {name} as {namespace["__kind__"]}')
                    subclasses[namespace['__kind__']] = cls
                    for alias in namespace.get('__aliases__', ()):
                        subclasses[alias] = cls
                    break

        super().__init__(name, bases, namespace)


def checksum(arrays: Iterable[Tuple[str, np.ndarray]]) -> str:
    """SHA-256 over names, shapes and the exact bytes of a sequence of named arrays."""
    digest = hashlib.sha256()
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        digest.update(name.encode('utf-8'))
        digest.update(repr(arr.shape).encode('ascii'))
        digest.update(arr.tobytes())
    return digest.hexdigest()


def format_duration(duration: float) -> str:
    """Seconds rounded to two significant digits below 10 s, to whole seconds above."""
    return f'{float(f"{duration:.2g}"):g}' if duration < 10 else f'{duration:.0f}'


def mean_std(values: Iterable[float]) -> Dict[str, float]:
    """Mean and sample standard deviation (ddof=1); the deviation of a single value is 0.0."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return {'mean': float('nan'), 'std': float('nan'), 'n': 0}
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {'mean': float(arr.mean()), 'std': std, 'n': int(arr.size)}
