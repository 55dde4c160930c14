"""Writes the results of a batch of runs: CSV tables, JSON summaries and a console table."""

from __future__ import annotations

import csv
import functools
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TYPE_CHECKING

from . import __project_name__, __version__
from .util import TrackSubClasses, mean_std

if TYPE_CHECKING:
    from .handler import Report, RunState

if os.name == 'nt':
    try:
        from colorama import AnsiToWin32
    except ImportError:
        AnsiToWin32 = None

logger = logging.getLogger(__name__)

CSV_SCHEMA = 1
TRACE_COLUMNS = ('schema', 'epoch', 'total', 'det', 'ex_low', 'ex_high', 'im_full', 'im_high', 'val_ap50')
TABLE_COLUMNS = (
    'schema',
    'table',
    'variant',
    'seed',
    'explicit',
    'implicit',
    'disw',
    'band',
    'basis',
    'gamma_mode',
    'gamma',
    'status',
    'final_det',
    'final_ap50',
    'ap50_ratio',
)


def format_value(value: Any) -> str:
    """CSV cell text: reals with ``repr`` precision so a re-run can be compared byte for byte."""
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> None:
    with open(path, 'w', newline='') as fp:
        writer = csv.writer(fp, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row.get(column)) for column in columns])
    logger.info(f'Wrote {path}')


def write_trace(path: Path, records: Sequence[Dict[str, float]]) -> None:
    """One row per epoch; columns a trainer does not produce stay empty."""
    write_csv(path, TRACE_COLUMNS, ({'schema': CSV_SCHEMA, **record} for record in records))


def write_json(path: Path, data: Dict[str, Any]) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=False) + '\n')
    logger.info(f'Wrote {path}')


class ReporterBase(object, metaclass=TrackSubClasses):
    __subclasses__: Dict[str, 'ReporterBase'] = {}  # type: ignore[assignment]

    def __init__(self, report: Report, run_states: List[RunState]) -> None:
        self.report = report
        self.run_states = run_states

    @classmethod
    def reporter_documentation(cls) -> str:
        """Return listings of reporters used by --features command line argument"""
        return '\n'.join(f'  * {sc.__kind__} - {sc.__doc__}' for sc in TrackSubClasses.sorted_by_kind(cls))

    @classmethod
    def submit_one(cls, name: str, report: Report, run_states: List[RunState]) -> Any:
        return cls.__subclasses__[name](report, run_states).submit()  # type: ignore[operator]

    @classmethod
    def submit_all(cls, report: Report, run_states: List[RunState]) -> None:
        for name, subclass in cls.__subclasses__.items():
            logger.info(f'Submitting with {name} ({subclass})')
            subclass(report, run_states).submit()  # type: ignore[operator]

    def submit(self) -> Any:
        raise NotImplementedError()


class CsvReporter(ReporterBase):
    """One CSV row per run"""

    __kind__ = 'csv'

    def submit(self) -> Path:
        path = self.report.output_dir.joinpath(f'{self.report.name}.csv')
        write_csv(path, TABLE_COLUMNS, self.report.rows())
        return path


class JsonReporter(ReporterBase):
    """Mean and sample standard deviation of the final AP50 of every variant"""

    __kind__ = 'json'

    def summary(self) -> Dict[str, Any]:
        variants: Dict[str, Any] = {}
        for name, states in self.report.by_variant().items():
            completed = [s for s in states if s.exception is None]
            variants[name] = {
                'settings': states[0].variant.settings,
                'seeds': [s.seed for s in states],
                'failed_seeds': [s.seed for s in states if s.exception is not None],
                'final_ap50': mean_std(s.final_ap50 for s in completed),  # type: ignore[misc]
                'final_det': mean_std(s.final_det for s in completed),  # type: ignore[misc]
            }
        return {
            'project': __project_name__,
            'version': __version__,
            'table': self.report.name,
            'csv_schema': CSV_SCHEMA,
            'checks': self.report.checks,
            'variants': variants,
            **self.report.extra,
        }

    def submit(self) -> Path:
        path = self.report.output_dir.joinpath(f'{self.report.name}.json')
        write_json(path, self.summary())
        return path


class StdoutReporter(ReporterBase):
    """Print the per-variant summary on stdout (the console)."""

    __kind__ = 'stdout'

    def __init__(self, *args: Any, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)
        self._has_color = sys.stdout.isatty()

    def _incolor(self, color_id: int, s: str) -> str:
        if self._has_color:
            return f'\033[9{color_id}m{s}\033[0m'
        return s

    def _red(self, s: str) -> str:
        return self._incolor(1, s)

    def _green(self, s: str) -> str:
        return self._incolor(2, s)

    def _get_print(self) -> Callable:
        if os.name == 'nt' and self._has_color and AnsiToWin32 is not None:
            return functools.partial(print, file=AnsiToWin32(sys.stdout).stream)
        return print

    def lines(self) -> List[str]:
        groups = self.report.by_variant()
        if not groups:
            return []
        width = max(len(name) for name in groups)
        best: Optional[float] = None
        summaries = {}
        for name, states in groups.items():
            stats = mean_std(s.final_ap50 for s in states if s.exception is None)  # type: ignore[misc]
            summaries[name] = (stats, sum(s.exception is not None for s in states))
            if stats['n'] and (best is None or stats['mean'] > best):
                best = stats['mean']
        lines = [f'{"variant":<{width}}  AP50 mean +- std  (seeds)']
        for name, (stats, failed) in summaries.items():
            text = f'{name:<{width}}  {stats["mean"]:.4f} +- {stats["std"]:.4f}  ({stats["n"]})'
            if failed:
                text = self._red(f'{text}  {failed} FAILED')
            elif stats['n'] and stats['mean'] == best:
                text = self._green(text)
            lines.append(text)
        for check, passed in self.report.checks.items():
            lines.append(f'check {check}: ' + (self._green('passed') if passed else self._red('FAILED')))
        return lines

    def submit(self) -> None:
        print_color = self._get_print()
        for line in self.lines():
            print_color(line)
