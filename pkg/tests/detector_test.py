"""Test the toy detector: parameters, forward shapes, targets, the detection loss and its gradients, decoding and
AP50."""

import numpy as np
import pytest

from wavedistill.detector import (
    Detection,
    DetectorParams,
    DetectorSpec,
    Prediction,
    assign_targets,
    average_precision,
    backward,
    box_iou,
    check_images,
    decode,
    detection_loss,
    evaluate_ap50,
    forward,
    head_backward,
    head_forward,
    init_detector,
    init_head,
    nms,
    smooth_l1,
)
from wavedistill.disw import ObjectAnnotation
from wavedistill.numcheck import gradcheck
from wavedistill.scenes import generate_dataset
from wavedistill.tensor import ShapeError, make_rng

SPEC = DetectorSpec((4, 4, 6), 4, 2)


def test_init_detector_is_deterministic():
    a, b = init_detector(SPEC, 3), init_detector(SPEC, 3)
    assert a.checksum() == b.checksum()
    assert a.checksum() != init_detector(SPEC, 4).checksum()
    assert all(np.all(v == 0.0) for k, v in a.items() if k.endswith('.bias'))


def test_detector_params_layout():
    params = init_detector(SPEC, 0)
    assert list(params)[:2] == ['backbone.conv1.weight', 'backbone.conv1.bias']
    assert params['head.cls.weight'].shape == (2, 4, 1, 1)
    assert set(params.head()) == {f'{n}.{k}' for n in ('conv1', 'conv2', 'cls', 'reg') for k in ('weight', 'bias')}
    with pytest.raises(ValueError):
        DetectorParams(SPEC, {'backbone.conv1.weight': np.zeros((4, 3, 3, 3))})
    tensors = dict(params.tensors)
    tensors['fpn.smooth4.weight'] = np.zeros((4, 4, 1, 1))
    with pytest.raises(ShapeError):
        DetectorParams(SPEC, tensors)


GOLDEN_BIASES = {
    'backbone.conv1': [0.5, -2.0],
    'backbone.conv2': [0.0, -0.5],
    'backbone.conv3': [0.25, -1.0],
    'fpn.lateral4': [0.0, 0.0],
    'fpn.lateral8': [0.0, 0.5],
    'fpn.smooth4': [0.0, -1.0],
    'fpn.smooth8': [0.25, 0.0],
    'head.conv1': [0.0, -2.0],
    'head.conv2': [0.5, 0.0],
    'head.cls': [-1.0],
    'head.reg': [0.0, 1.0, 2.0, 3.0],
}


def test_forward_golden():
    """Kernels with a single 0.5 center tap on a constant image keep every map constant and exactly representable."""
    spec = DetectorSpec((2, 2, 2), 2, 1)
    tensors = {}
    for name, value in init_detector(spec, 0).items():
        layer, kind = name.rsplit('.', 1)
        if kind == 'bias':
            tensors[name] = np.array(GOLDEN_BIASES[layer])
        else:
            weight = np.zeros_like(value)
            weight[:, :, value.shape[2] // 2, value.shape[3] // 2] = 0.5
            tensors[name] = weight
    result = forward(DetectorParams(spec, tensors), np.ones((1, 3, 16, 16)))

    expected_pyramid = [[1.5, 0.5], [1.0, 0.75]]
    for level, expected, size in zip(result.pyramid, expected_pyramid, (4, 2)):
        assert level.shape == (1, 2, size, size)
        assert [np.unique(level[0, c]).tolist() for c in range(2)] == [[v] for v in expected]
    cls4, cls8 = (p.cls for p in result.predictions)
    assert np.all(cls4 == -0.25) and np.all(cls8 == -0.3125)
    reg4, reg8 = (p.reg for p in result.predictions)
    assert [np.unique(reg4[0, c]).tolist() for c in range(4)] == [[0.75], [1.75], [2.75], [3.75]]
    assert [np.unique(reg8[0, c]).tolist() for c in range(4)] == [[0.6875], [1.6875], [2.6875], [3.6875]]


def test_head_copy_is_independent():
    params = init_detector(SPEC, 0)
    head = params.head()
    head['cls.bias'] += 1.0
    assert np.all(params['head.cls.bias'] == 0.0)


def test_pyramid_shapes():
    result = forward(init_detector(DetectorSpec.from_width(3, 5, 3), 0), np.zeros((2, 3, 64, 64)))
    assert [p.shape for p in result.pyramid] == [(2, 5, 16, 16), (2, 5, 8, 8)]
    assert [p.cls.shape for p in result.predictions] == [(2, 3, 16, 16), (2, 3, 8, 8)]
    assert [p.reg.shape for p in result.predictions] == [(2, 4, 16, 16), (2, 4, 8, 8)]


def test_zero_image_gives_zero_logits():
    result = forward(init_detector(SPEC, 0), np.zeros((1, 3, 16, 16)))
    assert all(np.all(p.cls == 0.0) and np.all(p.reg == 0.0) for p in result.predictions)


def test_single_image_is_a_batch_of_one():
    params = init_detector(SPEC, 0)
    image = make_rng(0).standard_normal((3, 16, 16))
    assert np.array_equal(forward(params, image).pyramid[0], forward(params, image[np.newaxis]).pyramid[0])


@pytest.mark.parametrize('shape', [(1, 1, 16, 16), (1, 3, 12, 16), (16, 16)])
def test_check_images_rejects(shape):
    with pytest.raises(ShapeError):
        check_images(np.zeros(shape), SPEC)


def test_assign_targets():
    targets = assign_targets([ObjectAnnotation(1, (0, 0, 8, 8))], (4, 4), 4, 2)
    assert targets.positive.sum() == 4
    assert targets.positive[:2, :2].all()
    assert targets.cls[1, 0, 0] == 1.0 and targets.cls[0, 0, 0] == 0.0
    assert targets.reg[:, 0, 0].tolist() == [0.5, 0.5, 1.5, 1.5]
    assert np.all(targets.reg[:, 3, 3] == 0.0)


@pytest.mark.parametrize('order', [1, -1])
def test_assign_targets_smallest_box_wins(order):
    annotations = [ObjectAnnotation(0, (0, 0, 16, 16)), ObjectAnnotation(1, (0, 0, 8, 8))][::order]
    targets = assign_targets(annotations, (4, 4), 4, 2)
    assert targets.cls[1, 0, 0] == 1.0 and targets.cls[0, 0, 0] == 0.0
    assert targets.cls[0, 3, 3] == 1.0
    assert targets.reg[2, 0, 0] == 1.5


def test_assign_targets_rejects_unknown_class():
    with pytest.raises(ValueError):
        assign_targets([ObjectAnnotation(5, (0, 0, 8, 8))], (4, 4), 4, 2)


def test_smooth_l1():
    value, derivative = smooth_l1(np.array([-2.0, -0.5, 0.0, 0.5, 2.0]), beta=1.0)
    assert value.tolist() == [1.5, 0.125, 0.0, 0.125, 1.5]
    assert derivative.tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]


def _perfect_predictions(annotations, size, num_classes=2):
    predictions = []
    for stride in (4, 8):
        targets = assign_targets(annotations, (size // stride, size // stride), stride, num_classes)
        predictions.append(Prediction(cls=(60.0 * targets.cls - 30.0)[np.newaxis], reg=targets.reg[np.newaxis]))
    return predictions


def test_detection_loss_of_perfect_predictions():
    annotations = [ObjectAnnotation(0, (0, 0, 8, 8)), ObjectAnnotation(1, (8, 8, 16, 16))]
    parts, _ = detection_loss(_perfect_predictions(annotations, 16), [annotations])
    assert parts.total <= 1e-3
    assert parts.regression == 0.0


def test_detection_loss_without_objects():
    rng = make_rng(0)
    predictions = [Prediction(rng.standard_normal((1, 2, s, s)), rng.standard_normal((1, 4, s, s))) for s in (4, 2)]
    parts, grads = detection_loss(predictions, [[]])
    assert parts.regression == 0.0
    assert parts.classification > 0.0
    assert all(np.all(g.reg == 0.0) for g in grads)


def test_detection_loss_rejects_batch_mismatch():
    predictions = [Prediction(np.zeros((2, 2, 4, 4)), np.zeros((2, 4, 4, 4)))]
    with pytest.raises(ShapeError):
        detection_loss(predictions, [[]])


def test_detection_loss_gradcheck():
    dataset = generate_dataset(1, 16, 2, seed=0)
    params = init_detector(SPEC, 1)

    def loss_fn(tensors):
        current = params.replace(tensors)
        result = forward(current, dataset.images)
        parts, grad_predictions = detection_loss(result.predictions, dataset.annotations)
        return parts.total, backward(current, result.cache, grad_predictions=grad_predictions)

    report = gradcheck(loss_fn, params.tensors)
    assert report.passed, report.to_dict()
    assert report.max_error <= 1e-5


def test_backward_pyramid_gradient_leaves_head_at_zero():
    params = init_detector(SPEC, 0)
    result = forward(params, make_rng(1).standard_normal((1, 3, 16, 16)), with_head=False)
    grads = backward(params, result.cache, grad_pyramid=[np.ones_like(p) for p in result.pyramid])
    assert list(grads) == list(params)
    assert all(np.all(grads[k] == 0.0) for k in grads if k.startswith('head.'))
    assert np.any(grads['backbone.conv1.weight'] != 0.0)


def test_head_backward_is_adjoint_in_the_feature():
    head = init_head(4, 2, 0)
    rng = make_rng(1)
    feature = rng.standard_normal((1, 4, 4, 4))
    prediction, cache = head_forward(head, feature)
    direction = rng.standard_normal(feature.shape)
    upstream = Prediction(rng.standard_normal(prediction.cls.shape), rng.standard_normal(prediction.reg.shape))
    g = head_backward(head, cache, upstream)
    step = 1e-6
    plus, _ = head_forward(head, feature + step * direction)
    minus, _ = head_forward(head, feature - step * direction)
    numeric = sum(np.sum(u * (p - m)) for u, p, m in zip(upstream, plus, minus)) / (2 * step)
    assert np.isclose(np.sum(g * direction), numeric, rtol=1e-5)


def test_head_forward_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        head_forward(init_head(4, 2, 0), np.zeros((1, 3, 4, 4)))


def test_box_iou():
    ious = box_iou((0, 0, 2, 2), np.array([[0, 0, 2, 2], [1, 0, 3, 2], [4, 4, 5, 5]]))
    assert np.allclose(ious, [1.0, 1 / 3, 0.0])


def test_nms():
    boxes = np.array([[0, 0, 10, 10], [1, 1, 10, 10], [20, 20, 30, 30], [0, 0, 10, 10]], dtype=float)
    assert nms(boxes, np.array([0.9, 0.8, 0.7, 0.9])) == [0, 2]


def test_decode():
    size = 16
    annotations = [ObjectAnnotation(1, (0, 0, 8, 8))]
    detections = decode(_perfect_predictions(annotations, size), (size, size))[0]
    assert detections[0].class_id == 1
    assert detections[0].box == (0.0, 0.0, 8.0, 8.0)
    assert all(d.score >= 0.3 for d in detections)


def test_decode_below_threshold():
    predictions = [Prediction(np.full((1, 2, s, s), -5.0), np.zeros((1, 4, s, s))) for s in (4, 2)]
    assert decode(predictions, (16, 16)) == [[]]


def test_average_precision():
    assert average_precision(np.array([0.5, 1.0]), np.array([1.0, 1.0])) == 1.0
    assert average_precision(np.array([0.5, 0.5]), np.array([1.0, 0.5])) == 0.5


def test_ap50_identical_detections():
    annotations = [[ObjectAnnotation(0, (0, 0, 8, 8)), ObjectAnnotation(1, (8, 8, 16, 16))]]
    detections = [[Detection(a.class_id, 1.0, a.box) for a in annotations[0]]]
    assert evaluate_ap50(detections, annotations) == 1.0


def test_ap50_no_detections():
    assert evaluate_ap50([[]], [[ObjectAnnotation(0, (0, 0, 8, 8))]]) == 0.0


def test_ap50_spurious_detection_after_full_recall():
    annotations = [[ObjectAnnotation(0, (0, 0, 8, 8))]]
    detections = [[Detection(0, 0.9, (0, 0, 8, 8)), Detection(0, 0.5, (20, 20, 28, 28))]]
    assert evaluate_ap50(detections, annotations) == 1.0


def test_ap50_spurious_detection_first():
    annotations = [[ObjectAnnotation(0, (0, 0, 8, 8))]]
    detections = [[Detection(0, 0.9, (20, 20, 28, 28)), Detection(0, 0.5, (0, 0, 8, 8))]]
    assert evaluate_ap50(detections, annotations) == 0.5


def test_ap50_without_ground_truth():
    assert evaluate_ap50([[Detection(0, 0.9, (0, 0, 8, 8))]], [[]]) == 0.0
