"""The worker that runs student variants in parallel."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import ExitStack
from typing import Callable, Iterable, List, Optional, Sequence, TYPE_CHECKING

from .handler import Report, RunState

if TYPE_CHECKING:
    from .main import Experiment, Variant

logger = logging.getLogger(__name__)


def run_parallel(func: Callable, items: Iterable, max_workers: Optional[int] = None) -> Iterable:
    """Convenience function to run parallel threads; results come back in the order of ``items``."""
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        for result in executor.map(func, items):
            yield result


def run_variants(
    experiment: Experiment, variants: Sequence[Variant], seeds: Sequence[int], report: Optional[Report] = None
) -> List[RunState]:
    """Runs every variant with every seed, variant-major; each run owns its own output directory."""
    table = report.name if report is not None else 'runs'
    max_workers = experiment.config['workers']
    logger.debug(f'Running {len(variants)} variant(s) x {len(seeds)} seed(s) with up to {max_workers} worker(s)')
    states: List[RunState] = []
    with ExitStack() as stack:
        for run_state in run_parallel(
            lambda state: state.process(),
            (
                stack.enter_context(RunState(experiment, variant, seed, table))
                for variant in variants
                for seed in seeds
            ),
            max_workers=max_workers,
        ):
            if report is not None:
                report.add(run_state)
            states.append(run_state)
    return states
