"""Test the explicit and implicit distillation terms, the joint objective and the distillation trainer."""

import numpy as np
import pytest

from wavedistill.detector import (
    DetectorSpec,
    Prediction,
    detection_loss,
    forward,
    head_checksum,
    head_forward,
    init_detector,
    init_head,
)
from wavedistill.disw import ObjectAnnotation, build_disw_batch
from wavedistill.distill import (
    AmplifierSet,
    DistillConfig,
    build_amplifiers,
    distill_student,
    explicit_loss,
    high_features,
    implicit_loss,
    prediction_discrepancy,
    teacher_pyramids,
    total_distill_loss,
    train_high_amplifier,
)
from wavedistill.numcheck import (
    finite_diff_grad,
    gradcheck,
    reference_explicit_loss,
    reference_implicit_loss,
    relative_error,
)
from wavedistill.scenes import generate_dataset
from wavedistill.tensor import ShapeError, make_rng
from wavedistill.training import SGDConfig, train_detector

TEACHER = DetectorSpec((4, 4, 6), 4, 2)
STUDENT = DetectorSpec((2, 3, 4), 4, 2)
ALL_ONES = DistillConfig(alpha=1.0, beta=1.0, lam=1.0, mu=1.0)


@pytest.fixture(scope='module')
def dataset():
    return generate_dataset(2, scene_size=16, num_classes=2, seed=0)


@pytest.fixture(scope='module')
def teacher():
    return init_detector(TEACHER, 0)


@pytest.fixture(scope='module')
def amplifiers(teacher):
    return build_amplifiers(teacher, init_head(4, 2, 2))


def _pyramid(rng, channels=4, size=8):
    return [rng.standard_normal((channels, size, size)), rng.standard_normal((channels, size // 2, size // 2))]


def test_explicit_loss_haar_golden():
    term = explicit_loss([np.array([[[1.0, 2.0], [3.0, 4.0]]])], [np.zeros((1, 2, 2))], None, 'haar')
    assert np.isclose(term.loss, 30.0)
    assert np.isclose(term.first, 25.0)
    assert np.isclose(term.second, 5.0)


def test_explicit_loss_weights_the_bands():
    term = explicit_loss([np.array([[[1.0, 2.0], [3.0, 4.0]]])], [np.zeros((1, 2, 2))], None, 'haar', 2.0, 0.5)
    assert np.isclose(term.loss, 2.0 * 25.0 + 0.5 * 5.0)


@pytest.mark.parametrize('basis', ['haar', 'db4', 'sym4'])
def test_explicit_loss_matches_reference(basis):
    rng = make_rng(1)
    for _ in range(5):
        teacher, student = _pyramid(rng, size=16), _pyramid(rng, size=16)
        maps = [1.0 + rng.random((8, 8)), 1.0 + rng.random((4, 4))]
        term = explicit_loss(teacher, student, maps, basis, 0.3, 0.7)
        reference = reference_explicit_loss(teacher, student, maps, basis, 0.3, 0.7)
        assert abs(term.loss - reference) <= 1e-10 * abs(reference)


def test_explicit_loss_gradient_matches_finite_differences():
    rng = make_rng(2)
    teacher, student = _pyramid(rng), _pyramid(rng)
    maps = [1.0 + rng.random((4, 4)), 1.0 + rng.random((2, 2))]
    term = explicit_loss(teacher, student, maps, 'haar', 0.5, 2.0)

    def f(level0):
        return explicit_loss(teacher, [level0, student[1]], maps, 'haar', 0.5, 2.0).loss

    numeric = finite_diff_grad(f, student[0], step=1e-3)
    assert max(relative_error(a, n) for a, n in zip(term.grad[0].ravel(), numeric.ravel())) <= 1e-6


@pytest.mark.parametrize('basis', ['haar', 'db4', 'sym4'])
def test_explicit_loss_with_uniform_weights_is_the_feature_distance(basis):
    rng = make_rng(11)
    for _ in range(20):
        teacher, student = _pyramid(rng, size=16), _pyramid(rng, size=16)
        weight = float(rng.uniform(0.1, 3.0))
        term = explicit_loss(teacher, student, None, basis, weight, weight)
        distance = sum(float(np.sum((t - s) ** 2)) for t, s in zip(teacher, student))
        assert abs(term.loss - weight * distance) <= 1e-9 * weight * distance


def test_disw_weighs_errors_inside_objects_only():
    rng = make_rng(12)
    teacher = [rng.standard_normal((3, 8, 8))]
    maps = build_disw_batch([[ObjectAnnotation(0, (0, 0, 4, 4))]], (16, 16), [(8, 8)])
    assert maps[0][0, 0, 0] == 2.0 and np.sum(maps[0][0]) == 17.0

    inside, background = teacher[0].copy(), teacher[0].copy()
    inside[:, 0:2, 0:2] += rng.standard_normal((3, 2, 2))
    background[:, 4:6, 4:6] += rng.standard_normal((3, 2, 2))
    for student, ratio in (([inside], 2.0), ([background], 1.0)):
        weighted = explicit_loss(teacher, student, [maps[0][0]], 'haar')
        uniform = explicit_loss(teacher, student, None, 'haar')
        assert uniform.loss > 0.0
        assert weighted.loss == pytest.approx(ratio * uniform.loss, rel=1e-12)


def test_explicit_loss_ignores_channel_order():
    rng = make_rng(13)
    teacher, student = _pyramid(rng, size=16), _pyramid(rng, size=16)
    maps = [1.0 + rng.random((8, 8)), 1.0 + rng.random((4, 4))]
    order = rng.permutation(4)
    term = explicit_loss(teacher, student, maps, 'db4', 0.3, 0.7)
    permuted = explicit_loss([t[order] for t in teacher], [s[order] for s in student], maps, 'db4', 0.3, 0.7)
    assert permuted.loss == pytest.approx(term.loss, rel=1e-12)
    for grad, permuted_grad in zip(term.grad, permuted.grad):
        assert np.allclose(permuted_grad, grad[order], rtol=0.0, atol=1e-12)


def test_zero_weights_give_zero_terms(amplifiers):
    rng = make_rng(14)
    teacher, student = _pyramid(rng), _pyramid(rng)
    maps = [1.0 + rng.random((4, 4)), 1.0 + rng.random((2, 2))]
    explicit = explicit_loss(teacher, student, maps, 'haar', 0.0, 0.0)
    implicit = implicit_loss(teacher, student, amplifiers, 'haar', 0.0, 0.0)
    for term in (explicit, implicit):
        assert term.loss == 0.0
        assert term.first > 0.0 and term.second > 0.0
        assert all(np.all(g == 0.0) for g in term.grad)


@pytest.mark.parametrize(
    'config',
    [
        DistillConfig(alpha=0.0, beta=0.0, lam=1.0, mu=1.0, implicit=False),
        DistillConfig(alpha=1.0, beta=1.0, lam=0.0, mu=0.0, explicit=False),
        DistillConfig(alpha=0.0, beta=0.0, lam=0.0, mu=0.0),
    ],
)
def test_zero_weighted_streams_leave_the_detection_objective(teacher, amplifiers, dataset, config):
    student = init_detector(STUDENT, 1)
    pyramid = teacher_pyramids(teacher, dataset)
    plain = total_distill_loss(
        student, dataset.images, dataset.annotations, pyramid, None, None, DistillConfig(explicit=False, implicit=False)
    )
    step = total_distill_loss(student, dataset.images, dataset.annotations, pyramid, amplifiers, None, config)
    assert step.parts['total'] == plain.parts['total'] == step.parts['det']
    assert all(step.parts[term] == 0.0 for term in ('ex_low', 'ex_high', 'im_full', 'im_high'))
    for name in student:
        assert np.array_equal(step.grads[name], plain.grads[name])


def test_explicit_loss_rejects_mismatches():
    rng = make_rng(3)
    teacher = _pyramid(rng)
    with pytest.raises(ShapeError):
        explicit_loss(teacher, _pyramid(rng, channels=3), None)
    with pytest.raises(ShapeError):
        explicit_loss(teacher, teacher[:1], None)
    with pytest.raises(ShapeError):
        explicit_loss(teacher, _pyramid(rng), [np.ones((8, 8)), np.ones((2, 2))])


def test_prediction_discrepancy_is_zero_at_identity():
    rng = make_rng(4)
    prediction = Prediction(rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 4, 3, 3)))
    value, grad = prediction_discrepancy(prediction, prediction)
    assert value == 0.0
    assert np.all(grad.cls == 0.0) and np.all(grad.reg == 0.0)


def test_implicit_loss_matches_reference():
    rng = make_rng(5)
    for i in range(50):
        full, high = init_head(4, 2, 10 + i), init_head(4, 2, 20 + i)
        teacher = _pyramid(rng)
        student = [t + 0.1 * rng.standard_normal(t.shape) for t in teacher]
        term = implicit_loss(teacher, student, AmplifierSet(full, high), 'haar', 0.3, 0.7)
        reference = reference_implicit_loss(teacher, student, full, high, 'haar', 0.3, 0.7)
        assert abs(term.loss - reference) <= 1e-10 * abs(reference)


def test_implicit_loss_gradient_matches_finite_differences(amplifiers):
    rng = make_rng(6)
    teacher = _pyramid(rng)
    student = [t + 0.1 * rng.standard_normal(t.shape) for t in teacher]
    term = implicit_loss(teacher, student, amplifiers, 'haar', 1.0, 1.0)

    def f(level1):
        return implicit_loss(teacher, [student[0], level1], amplifiers, 'haar', 1.0, 1.0).loss

    numeric = finite_diff_grad(f, student[1])
    assert max(relative_error(a, n) for a, n in zip(term.grad[1].ravel(), numeric.ravel())) <= 1e-5


def test_distillation_terms_vanish_at_identity(amplifiers):
    pyramid = _pyramid(make_rng(7))
    maps = [np.full((4, 4), 2.0), np.full((2, 2), 2.0)]
    for term in (explicit_loss(pyramid, pyramid, maps), implicit_loss(pyramid, pyramid, amplifiers)):
        assert term.loss == term.first == term.second == 0.0
        assert all(np.all(g == 0.0) for g in term.grad)


def test_high_features_shape(teacher, dataset):
    features = high_features(teacher_pyramids(teacher, dataset))
    assert [f.shape for f in features] == [(2, 4, 4, 4), (2, 4, 2, 2)]


def test_term_weights():
    assert DistillConfig().term_weights() == {'ex_low': 1e-3, 'ex_high': 1e-3, 'im_full': 1e-2, 'im_high': 1e-2}
    assert ALL_ONES._replace(band='low').term_weights() == {'ex_low': 1, 'ex_high': 0, 'im_full': 1, 'im_high': 0}
    assert ALL_ONES._replace(explicit=False, band='high').term_weights() == {
        'ex_low': 0,
        'ex_high': 0,
        'im_full': 0,
        'im_high': 1,
    }
    spectral = ALL_ONES._replace(gamma=0.5, gamma_mode='spectral').term_weights()
    assert spectral == {'ex_low': 0.5, 'ex_high': 1.5, 'im_full': 0.5, 'im_high': 1.5}
    stream = ALL_ONES._replace(gamma=0.5, gamma_mode='stream').term_weights()
    assert stream == {'ex_low': 0.5, 'ex_high': 0.5, 'im_full': 1.5, 'im_high': 1.5}


@pytest.mark.parametrize('mode', ['spectral', 'stream'])
def test_gamma_one_is_the_identity(mode):
    config = DistillConfig(gamma=1.0, gamma_mode=mode)
    assert config.term_weights() == DistillConfig().term_weights()


def test_distill_config_active():
    assert DistillConfig().active
    assert not DistillConfig(explicit=False, implicit=False).active
    assert not DistillConfig(alpha=0.0, beta=0.0, lam=0.0, mu=0.0).active


@pytest.mark.parametrize(
    'changes', [{'alpha': -1.0}, {'gamma': 2.5}, {'gamma_mode': 'layer'}, {'band': 'mid'}, {'mu': -0.1}]
)
def test_distill_config_validate(changes):
    with pytest.raises(ValueError):
        DistillConfig(**changes).validate()


def test_distill_config_from_config():
    config = DistillConfig.from_config(
        {
            'alpha': 1,
            'beta': '0.5',
            'lambda': 0.1,
            'mu': 0.2,
            'gamma': 1.25,
            'gamma_mode': 'stream',
            'amplifier_epochs': 3,
            'explicit': True,
            'implicit': False,
            'disw': False,
            'band': 'high',
            'basis': 'db4',
        }
    )
    assert config == DistillConfig(1.0, 0.5, 0.1, 0.2, 1.25, 'stream', 3, True, False, False, 'high', 'db4')


def test_total_distill_loss_gradcheck(teacher, amplifiers, dataset):
    student = init_detector(STUDENT, 1)
    pyramid = teacher_pyramids(teacher, dataset)
    maps = build_disw_batch(dataset.annotations, dataset.image_size, [p.shape[2:] for p in pyramid])
    indices = [0]

    def loss_fn(tensors):
        step = total_distill_loss(
            student.replace(tensors),
            dataset.images[indices],
            dataset.batch_annotations(indices),
            [p[indices] for p in pyramid],
            amplifiers,
            [m[indices] for m in maps],
            ALL_ONES,
        )
        return step.parts['total'], step.grads

    report = gradcheck(loss_fn, student.tensors)
    assert report.passed, report.to_dict()


def test_total_distill_loss_parts(teacher, amplifiers, dataset):
    student = init_detector(STUDENT, 1)
    pyramid = teacher_pyramids(teacher, dataset)
    step = total_distill_loss(
        student, dataset.images, dataset.annotations, pyramid, amplifiers, None, ALL_ONES._replace(disw=False)
    )
    assert set(step.parts) == {'total', 'det', 'ex_low', 'ex_high', 'im_full', 'im_high'}
    weighted = sum(step.parts[term] for term in ('ex_low', 'ex_high', 'im_full', 'im_high'))
    assert np.isclose(step.parts['total'], step.parts['det'] + weighted)
    assert all(step.parts[term] > 0 for term in ('ex_low', 'ex_high', 'im_full', 'im_high'))


def test_total_distill_loss_parts_are_per_scene_means(teacher, amplifiers, dataset):
    student = init_detector(STUDENT, 1)
    pyramid = teacher_pyramids(teacher, dataset)
    config = ALL_ONES._replace(disw=False)
    steps = [
        total_distill_loss(
            student,
            dataset.images[indices],
            dataset.batch_annotations(indices),
            [p[indices] for p in pyramid],
            amplifiers,
            None,
            config,
        )
        for indices in ([0], [0, 0, 0])
    ]
    for term in ('ex_low', 'ex_high', 'im_full', 'im_high'):
        assert np.isclose(steps[0].parts[term], steps[1].parts[term], rtol=1e-12)


def test_total_distill_loss_skips_switched_off_terms(teacher, dataset):
    student = init_detector(STUDENT, 1)
    pyramid = teacher_pyramids(teacher, dataset)
    step = total_distill_loss(
        student, dataset.images, dataset.annotations, pyramid, None, None, ALL_ONES._replace(implicit=False)
    )
    assert step.parts['im_full'] == step.parts['im_high'] == 0.0
    with pytest.raises(ValueError):
        total_distill_loss(student, dataset.images, dataset.annotations, pyramid, None, None, ALL_ONES)


def test_distillation_leaves_the_student_head_to_the_detection_loss(teacher, amplifiers, dataset):
    student = init_detector(STUDENT, 1)
    pyramid = teacher_pyramids(teacher, dataset)
    plain = total_distill_loss(
        student, dataset.images, dataset.annotations, pyramid, None, None, DistillConfig(explicit=False, implicit=False)
    )
    full = total_distill_loss(student, dataset.images, dataset.annotations, pyramid, amplifiers, None, ALL_ONES)
    for name in student:
        if name.startswith('head.'):
            assert np.array_equal(plain.grads[name], full.grads[name])
    assert not np.array_equal(plain.grads['backbone.conv1.weight'], full.grads['backbone.conv1.weight'])


def test_all_terms_off_is_plain_training(dataset):
    optimizer = SGDConfig(lr=0.01, batch_size=1)
    student = init_detector(STUDENT, 1)
    distilled = distill_student(
        None, student, dataset, None, DistillConfig(explicit=False, implicit=False), optimizer, 2, seed=4
    )
    trained, result = train_detector(student, dataset, optimizer, 2, seed=4)
    assert distilled.train.steps == result.steps
    assert distilled.params.checksum() == trained.checksum()


def test_distill_student_needs_a_teacher(dataset):
    with pytest.raises(ValueError):
        distill_student(None, init_detector(STUDENT, 1), dataset, None, DistillConfig(), SGDConfig(lr=0.01), 1, 0)


def test_distill_student_rejects_incompatible_teacher(dataset):
    teacher = init_detector(DetectorSpec((4, 4, 6), 6, 2), 0)
    with pytest.raises(ShapeError):
        distill_student(teacher, init_detector(STUDENT, 1), dataset, None, DistillConfig(), SGDConfig(lr=0.01), 1, 0)


@pytest.mark.parametrize('mode', ['spectral', 'stream'])
def test_gamma_one_distillation_is_bit_identical(teacher, amplifiers, dataset, mode):
    optimizer = SGDConfig(lr=0.01, batch_size=1)
    runs = [
        distill_student(teacher, init_detector(STUDENT, 1), dataset, amplifiers, config, optimizer, 1, seed=5)
        for config in (DistillConfig(), DistillConfig(gamma=1.0, gamma_mode=mode))
    ]
    assert runs[0].train.steps == runs[1].train.steps
    assert runs[0].params.checksum() == runs[1].params.checksum()


def test_distill_student_records_terms_and_keeps_teacher_frozen(teacher, amplifiers, dataset):
    teacher_sum, amplifier_sum = teacher.checksum(), amplifiers.checksum()
    result = distill_student(
        teacher,
        init_detector(STUDENT, 1),
        dataset,
        amplifiers,
        DistillConfig(),
        SGDConfig(lr=0.01, batch_size=2),
        1,
        seed=0,
        val_set=dataset,
    )
    record = result.train.epochs[0]
    assert {'total', 'det', 'ex_low', 'ex_high', 'im_full', 'im_high', 'val_ap50'} <= set(record)
    assert teacher.checksum() == teacher_sum
    assert amplifiers.checksum() == amplifier_sum


def test_train_high_amplifier(teacher, dataset):
    teacher_sum = teacher.checksum()
    head, result = train_high_amplifier(teacher, dataset, 0, SGDConfig(lr=0.01), seed=2)
    assert all(np.array_equal(head[k], v) for k, v in init_head(4, 2, 2).items())
    assert result.steps == []

    head, result = train_high_amplifier(teacher, dataset, 2, SGDConfig(lr=0.01, batch_size=2), seed=2, val_set=dataset)
    assert len(result.steps) == 2
    assert 'val_ap50' in result.epochs[-1]
    assert teacher.checksum() == teacher_sum
    assert set(head) == set(teacher.head())


def _head_detection_loss(head, teacher, scenes):
    features = high_features(teacher_pyramids(teacher, scenes))
    parts, _ = detection_loss([head_forward(head, level)[0] for level in features], scenes.annotations)
    return parts.total


def test_train_high_amplifier_lowers_the_held_out_loss(teacher):
    train_set = generate_dataset(16, scene_size=16, num_classes=2, seed=10)
    val_set = generate_dataset(8, scene_size=16, num_classes=2, seed=11)
    optimizer = SGDConfig(lr=0.01, batch_size=4)
    initial, _ = train_high_amplifier(teacher, train_set, 0, optimizer, seed=3)
    trained, result = train_high_amplifier(teacher, train_set, 6, optimizer, seed=3)
    assert len(result.steps) == 24
    assert _head_detection_loss(trained, teacher, val_set) < _head_detection_loss(initial, teacher, val_set)


def test_train_high_amplifier_is_reproducible(teacher, dataset):
    optimizer = SGDConfig(lr=0.01, batch_size=1)
    heads = [train_high_amplifier(teacher, dataset, 2, optimizer, seed=7)[0] for _ in range(2)]
    assert set(heads[0]) == set(heads[1])
    for name, tensor in heads[0].items():
        assert tensor.tobytes() == heads[1][name].tobytes()
    assert head_checksum(heads[0]) == head_checksum(heads[1])


def test_build_amplifiers_copies(teacher):
    high = init_head(4, 2, 0)
    amplifiers = build_amplifiers(teacher, high)
    amplifiers.full['cls.bias'] += 1.0
    amplifiers.high['cls.bias'] += 1.0
    assert np.all(teacher['head.cls.bias'] == 0.0)
    assert np.all(high['cls.bias'] == 0.0)


def test_teacher_pyramids_match_forward(teacher, dataset):
    pyramid = teacher_pyramids(teacher, dataset, batch_size=1)
    direct = forward(teacher, dataset.images, with_head=False).pyramid
    assert all(np.allclose(a, b) for a, b in zip(pyramid, direct))
