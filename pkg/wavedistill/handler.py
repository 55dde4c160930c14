"""Handles the running of individual student runs and, afterwards, the reporting of a batch of them."""

from __future__ import annotations

import logging
import time
import traceback
from pathlib import Path
from types import TracebackType
from typing import Any, Dict, List, Optional, TYPE_CHECKING, Tuple, Type

from .reporters import CSV_SCHEMA, ReporterBase
from .util import format_duration

if TYPE_CHECKING:
    from .main import Experiment, Variant

logger = logging.getLogger(__name__)


class RunState(object):
    """One (variant, seed) run: its outcome or the exception that ended it."""

    exception: Optional[Exception] = None
    traceback: str = ''
    final_ap50: Optional[float] = None
    final_det: Optional[float] = None
    checksum: str = ''

    def __init__(self, experiment: Experiment, variant: Variant, seed: int, table: str) -> None:
        self.experiment = experiment
        self.variant = variant
        self.seed = seed
        self.table = table
        self.records: List[Dict[str, float]] = []

    def __repr__(self) -> str:
        return f'<RunState {self.table}/{self.variant.name} seed {self.seed}>'

    def __enter__(self) -> 'RunState':
        return self

    def __exit__(
        self,
        exc_type: Optional[Type[BaseException]],
        exc_value: Optional[BaseException],
        tb: Optional[TracebackType],
    ) -> None:
        if self.exception is not None:
            logger.error(f'{self!r} failed: {self.exception}')
            logger.debug(self.traceback)

    @property
    def run_dir(self) -> Path:
        return self.experiment.output_dir.joinpath('runs', self.table, self.variant.name, f'seed-{self.seed}')

    def process(self) -> 'RunState':
        """Trains the student of this run, capturing any exception."""
        logger.info(f'{self!r}: starting')
        start = time.perf_counter()
        try:
            params, records = self.experiment.run_student(self.variant, self.seed, self.run_dir)
            self.records = records
            if records:
                self.final_det = records[-1]['det']
                self.final_ap50 = records[-1].get('val_ap50')
            self.checksum = params.checksum()
        except Exception as e:
            self.exception = e
            self.traceback = traceback.format_exc()
        logger.info(f'{self!r}: finished in {format_duration(time.perf_counter() - start)} s')
        return self


class Report(object):
    """Collects the run states of one table (``distill``, ``ablation``, ``sweep``) and submits them to the
    reporters."""

    def __init__(self, experiment: Experiment, name: str) -> None:
        self.experiment = experiment
        self.name = name
        self.run_states: List[RunState] = []
        self.checks: Dict[str, bool] = {}
        self.ratios: Dict[Tuple[str, int], float] = {}
        self.extra: Dict[str, Any] = {}

    @property
    def output_dir(self) -> Path:
        return self.experiment.output_dir

    @property
    def failed(self) -> List[RunState]:
        return [s for s in self.run_states if s.exception is not None]

    @property
    def passed(self) -> bool:
        return not self.failed and all(self.checks.values())

    def add(self, run_state: RunState) -> None:
        if run_state.exception is not None:
            logger.debug(f'{run_state!r}: got exception while processing', exc_info=run_state.exception)
        self.run_states.append(run_state)

    def by_variant(self) -> Dict[str, List[RunState]]:
        groups: Dict[str, List[RunState]] = {}
        for state in self.run_states:
            groups.setdefault(state.variant.name, []).append(state)
        return groups

    def rows(self) -> List[Dict[str, Any]]:
        rows = []
        for state in self.run_states:
            settings = self.experiment.distill_settings(state.variant)
            rows.append(
                {
                    'schema': CSV_SCHEMA,
                    'table': self.name,
                    'variant': state.variant.name,
                    'seed': state.seed,
                    **{key: settings[key] for key in ('explicit', 'implicit', 'disw', 'band', 'basis', 'gamma')},
                    'gamma_mode': settings['gamma_mode'],
                    'status': 'ok' if state.exception is None else 'failed',
                    'final_det': state.final_det,
                    'final_ap50': state.final_ap50,
                    'ap50_ratio': self.ratios.get((state.variant.name, state.seed)),
                }
            )
        return rows

    def finish(self) -> None:
        ReporterBase.submit_all(self, self.run_states)
