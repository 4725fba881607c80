import pytest
import torch

from models import BackboneConfig, CascadeConfig, TinyBackbone, build_cascade, cascade_forward, count_parameters, parameter_deltas
from models.backbone import backbone_forward
from models.cascade import count_parameters_for
from models.ops import DTYPE, DimensionError, check_gradients
from models.roi_pool import roi_pool

TORCH_MANUAL_SEED = 0
GRAD_SEEDS = list(range(10))
SMALL = dict(input_size=(32, 32), channels=8, num_blocks=2, hidden_width=16, pooled_size=3)
PROPOSALS = [[2., 2., 20., 18.], [10., 4., 30., 30.], [0., 0., 32., 32.], [5., 12., 9., 16.]]


def small_model(variant: str = 'fscascade', num_stages: int = 3, **kw):
    torch.manual_seed(TORCH_MANUAL_SEED)
    return build_cascade(variant=variant, num_stages=num_stages, **{**SMALL, **kw})[1]


def test_backbone_shape():
    bb = TinyBackbone(BackboneConfig())
    bb.init_weights()
    out = backbone_forward(torch.rand(1, 3, 96, 96, dtype=DTYPE), bb)
    assert out.shape == (1, 64, 12, 12)
    assert BackboneConfig().feature_size == (12, 12)


def test_backbone_zero_image():
    bb = TinyBackbone(BackboneConfig())
    bb.init_weights()
    assert torch.count_nonzero(bb(torch.zeros(1, 3, 96, 96, dtype=DTYPE))) == 0


def test_backbone_rejects_wrong_size():
    bb = TinyBackbone(BackboneConfig())
    with pytest.raises(DimensionError):
        bb(torch.zeros(1, 3, 64, 96, dtype=DTYPE))
    with pytest.raises(ValueError, match='divisible'):
        BackboneConfig(input_size=(90, 96))


def test_roi_pool_constant_field():
    feature = torch.full((1, 4, 12, 12), 1.5, dtype=DTYPE)
    boxes = torch.tensor([[0., 0., 96., 96.], [10., 20., 40., 33.], [50., 50., 51., 51.]], dtype=DTYPE)
    pooled = roi_pool(feature, boxes, spatial_scale=1 / 8, out_size=7)
    assert pooled.shape == (3, 4, 7, 7)
    assert torch.allclose(pooled, torch.full_like(pooled, 1.5), rtol=0, atol=1e-12)
    assert roi_pool(feature, boxes[:0], 1 / 8).shape == (0, 4, 7, 7)


@pytest.mark.parametrize('variant', ['baseline', 'cfs', 'lfs', 'fscascade', 'conv'])
def test_forward_shapes_and_lineage(variant):
    model = small_model(variant)
    proposals = torch.tensor(PROPOSALS, dtype=DTYPE)
    image = torch.rand(1, 3, 32, 32, dtype=DTYPE)
    outputs = cascade_forward(image, proposals, model)
    assert len(outputs) == 3
    assert all(torch.equal(a.class_logits, b.class_logits) for a, b in zip(outputs, model(image, proposals)))
    assert torch.equal(outputs[0].rois, proposals)
    for i, out in enumerate(outputs):
        assert out.class_logits.shape == (4, 4)
        assert out.deltas.shape == (4, 4)
        assert out.pooled.shape == (4, 8, 3, 3)
        assert not out.refined_boxes.requires_grad
        assert bool((out.refined_boxes[:, 2:] - out.refined_boxes[:, :2] >= 1 - 1e-9).all())
        assert bool((out.refined_boxes >= 0).all()) and bool((out.refined_boxes <= 32).all())
        if i:
            assert torch.equal(out.rois, outputs[i - 1].refined_boxes)


def test_zero_predictors_keep_boxes():
    model = small_model('fscascade')
    with torch.no_grad():
        for head in model.stages:
            head.box_predictor.weight.zero_()
            head.box_predictor.bias.zero_()
    proposals = torch.tensor(PROPOSALS, dtype=DTYPE)
    outputs = model(torch.rand(1, 3, 32, 32, dtype=DTYPE), proposals)
    for out in outputs:
        assert torch.allclose(out.refined_boxes, proposals, rtol=0, atol=1e-9)


def test_empty_proposals_rejected():
    model = small_model()
    with pytest.raises(ValueError, match='non-empty'):
        model(torch.rand(1, 3, 32, 32, dtype=DTYPE), torch.zeros(0, 4, dtype=DTYPE))


def test_box_coordinates_carry_no_gradient():
    """Later-stage losses reach an earlier box predictor only through shared features, never through coordinates."""
    model = small_model('fscascade')
    outputs = model(torch.rand(1, 3, 32, 32, dtype=DTYPE), torch.tensor(PROPOSALS, dtype=DTYPE))
    loss = outputs[1].class_logits.square().sum() + outputs[1].deltas.square().sum() + outputs[2].deltas.square().sum()
    loss.backward()
    g = model.stages[0].box_predictor.weight.grad
    assert g is None or torch.count_nonzero(g) == 0
    assert torch.count_nonzero(model.stages[0].box_conv1.weight.grad) > 0


def test_one_stage_baseline_reference():
    model = small_model('baseline', num_stages=1, fg_iou_thresholds=(0.5,))
    outputs = model(torch.rand(1, 3, 32, 32, dtype=DTYPE), torch.tensor(PROPOSALS, dtype=DTYPE))
    assert len(outputs) == 1 and outputs[0].box_feature.shape == (4, 16)


def test_config_validation():
    with pytest.raises(ValueError, match='increasing'):
        CascadeConfig(fg_iou_thresholds=(0.5, 0.5, 0.7))
    with pytest.raises(ValueError, match='variant'):
        CascadeConfig(variant='nope')


def test_parameter_audit_benchmark_scale():
    cfg = CascadeConfig(hidden_width=1024, num_classes=80, backbone=BackboneConfig(input_size=(64, 64), channels=256))
    deltas = parameter_deltas(cfg)
    assert deltas['baseline']['box_heads'] == 0
    assert deltas['cfs']['cls_delta'] == 0 and deltas['cfs']['mechanism_delta'] == 0
    lfs = count_parameters_for(CascadeConfig(**{**cfg.__dict__, 'variant': 'lfs'}))
    assert lfs['box_heads'] == 2 * 590_080 + 2 * (590_080 + 65_792) == 2_491_904
    assert deltas['lfs']['mechanism_delta'] == 2_491_904
    assert deltas['fscascade']['mechanism_delta'] == deltas['lfs']['mechanism_delta']
    assert deltas['conv']['mechanism_delta'] == 0


def test_parameter_audit_desk_scale():
    c = 64
    model = small_model('fscascade', input_size=(96, 96), channels=c, num_blocks=3, hidden_width=256, pooled_size=7)
    counts = count_parameters(model)
    assert counts['box_heads'] == 2 * (9 * c * c + c) + 2 * ((9 * c * c + c) + (c * c + c))
    assert counts['total'] == sum(p.numel() for p in model.parameters())
    base = small_model('baseline', input_size=(96, 96), channels=c, num_blocks=3, hidden_width=256, pooled_size=7)
    assert count_parameters(base)['cls_heads'] == counts['cls_heads']


def test_roi_pool_whole_map_samples_cells():
    feature = torch.randn(1, 2, 7, 7, dtype=DTYPE)
    pooled = roi_pool(feature, torch.tensor([[0., 0., 7., 7.]], dtype=DTYPE), spatial_scale=1., out_size=7)
    assert torch.allclose(pooled[0], feature[0], rtol=0, atol=1e-12)


@pytest.mark.parametrize('seed', GRAD_SEEDS)
def test_roi_pool_gradient(seed):
    torch.manual_seed(seed)
    xy = torch.rand(3, 2, dtype=DTYPE) * 8
    boxes = torch.cat([xy, xy + 1 + torch.rand(3, 2, dtype=DTYPE) * 4], dim=1)
    feature = torch.randn(1, 2, 6, 6, dtype=DTYPE, requires_grad=True)
    assert check_gradients(lambda f: roi_pool(f, boxes, spatial_scale=0.5, out_size=3), [feature])


def test_gradient_reaches_backbone():
    model = small_model('fscascade')
    outputs = model(torch.rand(1, 3, 32, 32, dtype=DTYPE), torch.tensor(PROPOSALS, dtype=DTYPE))
    sum(o.class_logits.square().sum() + o.deltas.square().sum() for o in outputs).backward()
    for name, p in model.backbone.named_parameters():
        assert p.grad is not None and torch.count_nonzero(p.grad) > 0, name
