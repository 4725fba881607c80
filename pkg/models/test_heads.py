import pytest
import torch
import torch.nn.functional as F

from models import build_cascade
from models.heads import VARIANTS, StageHead, cfs_forward, lfs_forward
from models.ops import DTYPE
from utils.box_ops import DEFAULT_STAGE_STDS

TORCH_MANUAL_SEED = 7
C, HIDDEN, P, K = 8, 16, 3, 3


def make_heads(variant: str, num_stages: int = 3):
    torch.manual_seed(TORCH_MANUAL_SEED)
    heads = [
        StageHead(i, variant, C, HIDDEN, K, P, fg_iou_threshold=(0.5, 0.6, 0.7)[i - 1], delta_stds=DEFAULT_STAGE_STDS[i - 1])
        for i in range(1, num_stages + 1)
    ]
    for h in heads:
        h.init_weights(-1, 0.01, 0.001)
    return heads


def pooled_features(n: int = 5, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, C, P, P, dtype=DTYPE, generator=g)


def _conv(x, conv):
    return F.conv2d(x, conv.weight, conv.bias, padding=conv.pad)


def test_cfs_single_stage_is_own_path():
    heads = make_heads('fscascade', 1)
    x = pooled_features()
    assert torch.equal(cfs_forward(x, heads, 'fscascade'), heads[0].cls_path(x))


def test_cfs_sums_every_stage():
    heads = make_heads('cfs')
    x = pooled_features()
    expected = heads[0].cls_path(x) + heads[1].cls_path(x) + heads[2].cls_path(x)
    assert torch.allclose(cfs_forward(x, heads, 'cfs'), expected, rtol=0, atol=1e-12)


def test_cfs_zero_earlier_path():
    heads = make_heads('fscascade', 2)
    with torch.no_grad():
        heads[0].cls_fc2.weight.zero_()
        heads[0].cls_fc2.bias.zero_()
    x = pooled_features()
    assert torch.equal(cfs_forward(x, heads, 'fscascade'), heads[1].cls_path(x))


@pytest.mark.parametrize('variant', ['baseline', 'lfs', 'conv'])
def test_cfs_non_sharing_uses_last_stage(variant):
    heads = make_heads(variant)
    x = pooled_features()
    assert torch.equal(cfs_forward(x, heads, variant), heads[2].cls_path(x))


def test_cfs_rejects_unordered_heads():
    heads = make_heads('cfs')
    with pytest.raises(ValueError, match='ordered'):
        cfs_forward(pooled_features(), [heads[1], heads[0]], 'cfs')


@pytest.mark.parametrize('detach, expect_grad', [(False, True), (True, False)])
def test_cfs_detach_shared_cls(detach, expect_grad):
    heads = make_heads('fscascade')
    x = pooled_features()
    logits = heads[2].classify(cfs_forward(x, heads, 'fscascade', detach_shared_cls=detach))
    logits.square().sum().backward()
    g = heads[0].cls_fc1.weight.grad
    assert (g is not None and bool(g.abs().sum() > 0)) == expect_grad
    assert heads[2].cls_fc1.weight.grad.abs().sum() > 0


def test_lfs_zero_residual_passes_input():
    heads = make_heads('lfs', 2)
    with torch.no_grad():
        for conv in (heads[1].box_conv1, heads[1].box_proj):
            conv.weight.zero_()
            conv.bias.zero_()
    x1, x2 = pooled_features(seed=1), pooled_features(seed=2)
    b1 = lfs_forward(x1, None, heads[0], 1, 'lfs')
    assert torch.equal(lfs_forward(x2, b1, heads[1], 2, 'lfs'), x2)


def test_lfs_unrolled_third_stage():
    heads = make_heads('fscascade')
    xs = [pooled_features(seed=s) for s in (1, 2, 3)]
    b1 = lfs_forward(xs[0], None, heads[0], 1, 'fscascade')
    b2 = lfs_forward(xs[1], b1, heads[1], 2, 'fscascade')
    b3 = lfs_forward(xs[2], b2, heads[2], 3, 'fscascade')

    ref_b1 = F.relu(_conv(F.relu(_conv(xs[0], heads[0].box_conv1)), heads[0].box_conv2))
    inner = xs[1] + _conv(F.relu(_conv(ref_b1, heads[1].box_conv1)), heads[1].box_proj)
    ref_b3 = xs[2] + _conv(F.relu(_conv(inner, heads[2].box_conv1)), heads[2].box_proj)
    assert torch.allclose(b3, ref_b3, rtol=0, atol=1e-12)


def test_lfs_independent_stage():
    heads = make_heads('conv')
    x = pooled_features()
    b2 = lfs_forward(x, None, heads[1], 2, 'conv')
    ref = F.relu(_conv(F.relu(_conv(x, heads[1].box_conv1)), heads[1].box_proj))
    assert torch.allclose(b2, ref, rtol=0, atol=1e-12)


def test_lfs_argument_checks():
    heads = make_heads('lfs')
    x = pooled_features()
    b1 = lfs_forward(x, None, heads[0], 1, 'lfs')
    with pytest.raises(ValueError, match='needs the previous'):
        lfs_forward(x, None, heads[1], 2, 'lfs')
    with pytest.raises(ValueError, match='takes no previous'):
        lfs_forward(x, b1, heads[0], 1, 'lfs')
    with pytest.raises(ValueError, match='stage 2'):
        lfs_forward(x, b1, heads[1], 3, 'lfs')
    with pytest.raises(ValueError, match='baseline'):
        lfs_forward(x, None, make_heads('baseline', 1)[0], 1, 'baseline')


def test_head_layers_by_variant():
    base = make_heads('baseline')
    assert not hasattr(base[0], 'box_conv1') and base[0].box_predictor.d_in == HIDDEN
    fsc = make_heads('fscascade')
    assert hasattr(fsc[0], 'box_conv2') and not hasattr(fsc[0], 'box_proj')
    assert hasattr(fsc[1], 'box_proj') and not hasattr(fsc[1], 'box_conv2')
    assert fsc[1].box_proj.kernel_size == 1 and fsc[1].box_conv1.kernel_size == 3
    assert fsc[0].box_predictor.d_in == C * P * P


def test_one_stage_variants_coincide():
    """With a single stage there is nothing to share: every conv variant computes the same function."""
    kw = dict(num_stages=1, input_size=(32, 32), channels=C, num_blocks=2, hidden_width=HIDDEN, pooled_size=P, fg_iou_thresholds=(0.5,))
    torch.manual_seed(TORCH_MANUAL_SEED)
    _, ref = build_cascade(variant='fscascade', **kw)
    image = torch.rand(1, 3, 32, 32, dtype=DTYPE)
    proposals = torch.tensor([[2., 2., 20., 18.], [10., 4., 30., 30.], [0., 0., 32., 32.]], dtype=DTYPE)
    ref_out = ref(image, proposals)[0]

    for variant in VARIANTS:
        _, model = build_cascade(variant=variant, **kw)
        if variant == 'baseline':
            shared = {k: v for k, v in ref.state_dict().items() if 'box_' not in k}
            model.load_state_dict(shared, strict=False)
            out = model(image, proposals)[0]
            assert torch.equal(out.class_logits, ref_out.class_logits)
            continue
        model.load_state_dict(ref.state_dict())
        out = model(image, proposals)[0]
        assert torch.equal(out.class_logits, ref_out.class_logits)
        assert torch.equal(out.deltas, ref_out.deltas)
        assert torch.equal(out.refined_boxes, ref_out.refined_boxes)


def test_cfs_identity_paths_triple_input():
    flat = C * P * P
    heads = [StageHead(i, 'cfs', C, flat, K, P, 0.5 + 0.1 * (i - 1), DEFAULT_STAGE_STDS[i - 1]) for i in (1, 2, 3)]
    with torch.no_grad():
        for h in heads:
            for fc in (h.cls_fc1, h.cls_fc2):
                fc.weight.copy_(torch.eye(flat, dtype=DTYPE))
                fc.bias.zero_()
    x = pooled_features().abs()
    assert torch.allclose(cfs_forward(x, heads, 'cfs'), 3 * x.flatten(1), rtol=0, atol=1e-12)


def test_cfs_zeroed_earlier_paths_match_baseline_logits():
    fsc, base = make_heads('fscascade'), make_heads('baseline')
    with torch.no_grad():
        for h in fsc[:2]:
            h.cls_fc2.weight.zero_()
            h.cls_fc2.bias.zero_()
        for hf, hb in zip(fsc, base):
            for name in ('cls_fc1', 'cls_fc2', 'cls_predictor'):
                getattr(hb, name).load_state_dict(getattr(hf, name).state_dict())
    x = pooled_features()
    assert torch.equal(fsc[2].classify(cfs_forward(x, fsc, 'fscascade')), base[2].classify(cfs_forward(x, base, 'baseline')))


def test_lfs_zero_first_stage_kernels():
    head = make_heads('lfs', 1)[0]
    with torch.no_grad():
        for conv in (head.box_conv1, head.box_conv2):
            conv.weight.zero_()
            conv.bias.zero_()
    assert torch.count_nonzero(lfs_forward(pooled_features(), None, head, 1, 'lfs')) == 0
