"""Take actions from command line arguments."""

import functools
import logging
import sys
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .detector import DetectorSpec, backward, detection_loss, forward, init_detector, init_head
from .distill import AmplifierSet, DistillConfig, build_amplifiers, explicit_loss, implicit_loss, total_distill_loss
from .disw import build_disw_batch
from .handler import Report
from .main import REFERENCE, Experiment, Variant, ablation_variants, sweep_variants
from .reporters import ReporterBase, write_json
from .scenes import generate_dataset
from .storage import PRESETS
from .tensor import Tensor
from .training import DivergenceError
from .wavelet import WaveletBasis, get_basis
from .worker import run_variants

logger = logging.getLogger(__name__)

LossFn = Callable[[Dict[str, Tensor]], Tuple[float, Dict[str, Tensor]]]


class ExperimentCommand:
    def __init__(self, experiment: Experiment) -> None:
        self.experiment = experiment
        self.command_config = experiment.command_config

    @staticmethod
    def show_features() -> int:
        print()
        print('Supported wavelet bases:\n')
        print(WaveletBasis.basis_documentation())
        print()
        print('Hyperparameter presets:\n')
        print('\n'.join(f'  * {name}' for name in PRESETS))
        print()
        print('Supported reporters:\n')
        print(ReporterBase.reporter_documentation())
        print()
        return 0

    def gen_data(self) -> int:
        splits = [self.command_config.split] if self.command_config.split else None
        for dataset in self.experiment.generate_data(splits):
            print(f'Generated {dataset!r} with {dataset.num_objects} objects')
        return 0

    def train_teacher(self) -> int:
        try:
            params = self.experiment.train_teacher()
        except DivergenceError as e:
            logger.error(str(e))
            print(e)
            return 1
        print(f'Trained teacher {params!r}')
        return 0

    def train_amplifier(self) -> int:
        try:
            amplifiers = self.experiment.train_amplifier()
        except DivergenceError as e:
            logger.error(str(e))
            print(e)
            return 1
        print(f'Trained high-frequency amplifier {amplifiers.checksum()[:12]}')
        return 0

    def run_table(self, name: str, variants: List[Variant], report: Optional[Report] = None) -> Report:
        self.experiment.prepare(variants)
        report = report if report is not None else Report(self.experiment, name)
        run_variants(self.experiment, variants, self.experiment.seeds, report)
        return report

    def distill(self) -> int:
        report = self.run_table('distill', [Variant('distill', {})])
        report.finish()
        return 0 if report.passed else 1

    def ablate(self) -> int:
        report = self.run_table('ablation', ablation_variants())
        means = {}
        for name, states in report.by_variant().items():
            values = [s.final_ap50 for s in states if s.final_ap50 is not None]
            means[name] = float(np.mean(values)) if values else None
        report.extra['mean_final_ap50'] = means
        report.finish()
        return 0 if report.passed else 1

    def sweep_gamma(self) -> int:
        variants = sweep_variants()
        self.experiment.prepare(variants + [REFERENCE])
        reference = {s.seed: s for s in run_variants(self.experiment, [REFERENCE], self.experiment.seeds)}
        report = self.run_table('sweep', variants)

        identical = True
        for state in report.run_states:
            base = reference[state.seed]
            if state.final_ap50 is not None and base.final_ap50:
                report.ratios[(state.variant.name, state.seed)] = state.final_ap50 / base.final_ap50
            if state.variant.settings['gamma'] == 1.0:
                if state.exception is not None or base.exception is not None or state.records != base.records:
                    logger.error(f'{state!r}: records differ from the unswept run of seed {state.seed}')
                    identical = False
        report.checks['gamma-1-identity'] = identical
        report.extra['reference'] = {
            str(seed): {'final_ap50': s.final_ap50, 'final_det': s.final_det, 'failed': s.exception is not None}
            for seed, s in reference.items()
        }
        report.extra['ap50_ratios'] = {f'{name}/seed-{seed}': ratio for (name, seed), ratio in report.ratios.items()}
        report.finish()
        return 0 if report.passed and not any(s.exception for s in reference.values()) else 1

    def gradcheck(self) -> int:
        from .numcheck import GRADCHECK_STEP, GRADCHECK_TOLERANCE, GradCheckReport, gradcheck

        basis = get_basis(self.experiment.distill_config.basis)
        seed = self.experiment.base_seed
        size = max(16, 8 * basis.length)
        num_classes = 2
        dataset = generate_dataset(1, size, num_classes, seed, 'train')
        images, annotations = dataset.images, dataset.annotations
        teacher = init_detector(DetectorSpec((4, 4, 6), 4, num_classes), seed)
        student = init_detector(DetectorSpec((2, 3, 4), 4, num_classes), seed + 1)
        amplifiers = build_amplifiers(teacher, init_head(4, num_classes, seed + 2))
        teacher_pyramid = forward(teacher, images, with_head=False).pyramid
        student_pyramid = forward(student, images, with_head=False).pyramid
        disw_maps = build_disw_batch(annotations, dataset.image_size, [p.shape[2:] for p in teacher_pyramid])
        config = DistillConfig(alpha=1.0, beta=1.0, lam=1.0, mu=1.0, basis=basis.name)
        beta = self.experiment.evaluation.smooth_l1_beta
        report = GradCheckReport(GRADCHECK_STEP, GRADCHECK_TOLERANCE)

        def detection(tensors: Dict[str, Tensor]) -> Tuple[float, Dict[str, Tensor]]:
            params = student.replace(tensors)
            result = forward(params, images)
            parts, grad_predictions = detection_loss(result.predictions, annotations, beta)
            return parts.total, backward(params, result.cache, grad_predictions=grad_predictions)

        def objective(tensors: Dict[str, Tensor]) -> Tuple[float, Dict[str, Tensor]]:
            step = total_distill_loss(
                student.replace(tensors), images, annotations, teacher_pyramid, amplifiers, disw_maps, config, beta
            )
            return step.parts['total'], step.grads

        def explicit(levels: Dict[str, Tensor]) -> Tuple[float, Dict[str, Tensor]]:
            pyramid = [levels[f'level{i}'] for i in range(len(levels))]
            term = explicit_loss(teacher_pyramid, pyramid, disw_maps, basis, 1.0, 1.0)
            return term.loss, {f'level{i}': g for i, g in enumerate(term.grad)}

        def implicit(levels: Dict[str, Tensor]) -> Tuple[float, Dict[str, Tensor]]:
            pyramid = [levels[f'level{i}'] for i in range(len(levels))]
            term = implicit_loss(teacher_pyramid, pyramid, amplifiers, basis, 1.0, 1.0, beta)
            return term.loss, {f'level{i}': g for i, g in enumerate(term.grad)}

        levels = {f'level{i}': p for i, p in enumerate(student_pyramid)}
        checks = (
            ('detection', detection, student.tensors),
            ('objective', objective, student.tensors),
            ('explicit', explicit, levels),
            ('implicit', implicit, levels),
        )
        for name, loss_fn, params in checks:
            prefix = f'{name}/'
            gradcheck(functools.partial(_prefixed, loss_fn, prefix), _prefix(params, prefix), report=report)

        oracles = oracle_errors(teacher_pyramid, student_pyramid, disw_maps, amplifiers, basis, beta)
        passed = report.passed and all(error <= GRADCHECK_TOLERANCE for error in oracles.values())
        self.experiment.output_dir.mkdir(parents=True, exist_ok=True)
        write_json(
            self.experiment.output_dir.joinpath('gradcheck.json'),
            {
                'version': __version__,
                'basis': basis.name,
                'scene_size': size,
                **report.to_dict(),
                'oracles': oracles,
                'passed': passed,
            },
        )
        print(f'Gradient check: max relative error {report.max_error:.3g} (tolerance {report.tolerance:g})')
        for name, error in oracles.items():
            print(f'Oracle {name}: relative error {error:.3g}')
        print('passed' if passed else 'FAILED')
        return 0 if passed else 1

    def run(self) -> None:  # pragma: no cover
        if self.command_config.features:
            sys.exit(self.show_features())
        actions = {
            'gen-data': self.gen_data,
            'train-teacher': self.train_teacher,
            'train-amplifier': self.train_amplifier,
            'distill': self.distill,
            'ablate': self.ablate,
            'sweep-gamma': self.sweep_gamma,
            'gradcheck': self.gradcheck,
        }
        sys.exit(actions[self.command_config.subcommand]())


def _prefix(tensors: Dict[str, Tensor], prefix: str) -> Dict[str, Tensor]:
    return {prefix + name: value for name, value in tensors.items()}


def _prefixed(loss_fn: LossFn, prefix: str, tensors: Dict[str, Tensor]) -> Tuple[float, Dict[str, Tensor]]:
    """Runs ``loss_fn`` on unprefixed names, so several checks can share one report."""
    loss, grads = loss_fn({name[len(prefix) :]: value for name, value in tensors.items()})
    return loss, _prefix(grads, prefix)


def oracle_errors(
    teacher_pyramid: List[Tensor],
    student_pyramid: List[Tensor],
    disw_maps: List[Tensor],
    amplifiers: AmplifierSet,
    basis: WaveletBasis,
    beta: float,
) -> Dict[str, float]:
    """Relative differences between the vectorized losses and the loop-based ones on the first scene."""
    from .numcheck import reference_explicit_loss, reference_implicit_loss, relative_error

    teacher = [p[0] for p in teacher_pyramid]
    student = [p[0] for p in student_pyramid]
    explicit = explicit_loss(teacher_pyramid, student_pyramid, disw_maps, basis, 1.0, 1.0).loss
    implicit = implicit_loss(teacher_pyramid, student_pyramid, amplifiers, basis, 1.0, 1.0, beta).loss
    return {
        'explicit': relative_error(
            explicit, reference_explicit_loss(teacher, student, [m[0] for m in disw_maps], basis)
        ),
        'implicit': relative_error(
            implicit, reference_implicit_loss(teacher, student, amplifiers.full, amplifiers.high, basis, 1.0, 1.0, beta)
        ),
    }
