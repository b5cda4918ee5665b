import numpy as np
import pytest

from idennet.autodiff import ShapeError, Tape, Tensor, backward
from idennet.config import BackboneConfig, LossConfig
from idennet.losses import joint_loss
from idennet.model import (
    PretrainNet,
    Variant,
    build_model,
    extract_heatmap,
    forward,
    freeze_feature_extractors,
    load_pretrained_and_share,
)

D16 = BackboneConfig(depth=16)
D40 = BackboneConfig(depth=40)


def rng(seed=0):
    return np.random.default_rng(seed)


def images(n, seed=0):
    return Tensor(rng(seed).standard_normal((n, 48, 48, 1)).astype(np.float32))


def count(params):
    return sum(p.data.size for p in params)


# closed-form parameter counts, written from the layer definitions
def conv_count(k, cin, cout):
    return k * k * cin * cout + cout


def block_count(cin, layers, g):
    total = 0
    for k in range(layers):
        c = cin + k * g
        total += 2 * c + conv_count(1, c, g) + 2 * g + conv_count(3, g, g)
    return total


def extractor_count(cfg):
    n, g, c0 = cfg.layers_per_block, cfg.growth_rate, cfg.initial_channels
    return conv_count(3, 1, c0) + block_count(c0, n, g) + block_count(c0 + n * g, n, g)


def expected_count(variant, cfg, n_expr, n_id):
    variant = Variant.parse(variant)
    d, n = cfg.stream_channels, cfg.layers_per_block
    streams = 2 if variant.has_identity_stream else 1
    total = streams * extractor_count(cfg) + conv_count(1, streams * d, d)
    total += block_count(d, n, cfg.growth_rate) + cfg.head_channels * n_expr + n_expr
    if variant.has_identity_head:
        total += cfg.head_channels * n_id + n_id
    return total


@pytest.mark.parametrize("variant", list(Variant))
@pytest.mark.parametrize("cfg", [D16, D40], ids=["d16", "d40"])
def test_parameter_count_closed_form(variant, cfg):
    model = build_model(variant, cfg, 6, 80, rng())
    assert count(model.parameters()) == expected_count(variant, cfg, 6, 80)


def test_f_doubles_streams_plus_fusion_delta():
    orig, f = build_model("original", D40, 6, None, rng()), build_model("f", D40, 6, None, rng())
    d = D40.stream_channels
    stream_params = count(orig.emotion.parameters())
    assert count(f.emotion.parameters()) + count(f.identity.parameters()) == 2 * stream_params
    assert count(f.parameters()) - count(orig.parameters()) == stream_params + d * d


def test_heads_shapes_depth40():
    m = build_model("if", D40, 6, 80, rng())
    assert m.fc_emo.weight.shape == (232, 6)
    assert m.fc_id.weight.shape == (232, 80)


def test_variant_structure():
    orig = build_model("original", D16, 6, None, rng())
    assert orig.identity is None and orig.fc_id is None
    assert not any(p.name.startswith("identity.") for p in orig.parameters())
    f, iff = build_model("f", D16, 6, 8, rng()), build_model("if", D16, 6, 8, rng())
    names_f = {p.name for p in f.parameters()}
    names_if = {p.name for p in iff.parameters()}
    assert names_if - names_f == {"fc_id.weight", "fc_id.bias"} and names_f <= names_if
    assert build_model("i", D16, 6, 8, rng()).identity is None


def test_variant_parse():
    assert Variant.parse("IdenNet_IF") is Variant.IF
    assert Variant.parse(" F ") is Variant.F
    with pytest.raises(ValueError):
        Variant.parse("xf")


def test_identity_head_needs_identities():
    with pytest.raises(ValueError):
        build_model("if", D16, 6, None, rng())


def test_forward_shapes_depth40_if():
    m = build_model("if", D40, 6, 80, rng())
    out = m(images(2), "train")
    assert out.emo_logits.shape == (2, 6)
    assert out.id_logits.shape == (2, 80)
    assert out.fusion_maps.shape == (2, 12, 12, 232)
    assert out.expression_features.shape == (2, 24, 24, 160)
    assert out.identity_features.shape == (2, 24, 24, 160)
    assert out.fusion_input.shape == (2, 24, 24, 320)


def test_wrong_input_shape():
    with pytest.raises(ShapeError):
        build_model("original", D16, 6, None, rng())(Tensor(np.zeros((1, 60, 60, 1), np.float32)))


def _pretrained(task, cfg, classes, seed):
    net = PretrainNet(task, cfg, classes, rng(seed))
    net(images(4, seed), "train")  # populate BN stats
    return net


def _shared(variant="if", cfg=D16, seed=0):
    emo, ident = _pretrained("emotion", cfg, 6, 1), _pretrained("identity", cfg, 8, 2)
    m = build_model(variant, cfg, 6, 8, rng(seed))
    load_pretrained_and_share(m, emo, ident if Variant.parse(variant).has_identity_stream else None)
    freeze_feature_extractors(m)
    return m, emo, ident


def test_duplicate_images_identical_logits_eval():
    m, _, _ = _shared()
    x = images(1).data
    out = m(Tensor(np.concatenate([x, x])), "eval")
    assert np.array_equal(out.emo_logits.data[0], out.emo_logits.data[1])


def test_eval_forward_is_pure():
    m, _, _ = _shared()
    x = images(3, 5)
    a, b = forward(m, x), forward(m, x)
    assert np.array_equal(a.emo_logits.data, b.emo_logits.data)
    assert np.array_equal(a.fusion_maps.data, b.fusion_maps.data)


def test_share_copies_block3():
    m, emo, ident = _shared()
    for p, q in zip(emo.stream.block3.parameters(), m.fusion_block.parameters()):
        assert np.array_equal(p.data, q.data)
        assert p.data is not q.data
    for p, q in zip(emo.stream.extractor_parameters(), m.emotion.extractor_parameters()):
        assert np.array_equal(p.data, q.data)
    for p, q in zip(ident.stream.extractor_parameters(), m.identity.extractor_parameters()):
        assert np.array_equal(p.data, q.data)


def test_share_rejects_depth_mismatch():
    emo = PretrainNet("emotion", D40, 6, rng())
    with pytest.raises(ShapeError):
        load_pretrained_and_share(build_model("original", D16, 6, None, rng()), emo)


def test_share_needs_identity_for_f():
    emo = _pretrained("emotion", D16, 6, 1)
    with pytest.raises(ValueError):
        load_pretrained_and_share(build_model("f", D16, 6, None, rng()), emo)


def test_frozen_set_original():
    m, _, _ = _shared("original")
    expected = {p.name for p in m.emotion.extractor_parameters()}
    assert m.frozen_set == expected
    assert all(n.startswith(("emotion.stem", "emotion.block1", "emotion.block2")) for n in m.frozen_set)


def test_gradient_flow_with_frozen_extractors():
    m, _, _ = _shared("if")
    labels = np.array([0, 1, 2, 3])
    with Tape() as tape:
        out = m(images(4, 9), "train", rng(1), 0.0)
        loss = joint_loss(out.emo_logits, labels, out.id_logits, labels, LossConfig(num_identities=8))
    backward(loss.total, tape)
    for p in m.parameters():
        if p.frozen:
            assert p.grad is None or not np.any(p.grad)
        else:
            assert p.grad is not None and np.all(np.isfinite(p.grad))
    for layer in (m.fusion_conv, m.fusion_block, m.fc_emo, m.fc_id):
        assert any(np.any(p.grad) for p in layer.parameters())


def test_unfrozen_full_model_grads_finite():
    m = build_model("if", D16, 6, 8, rng(3))
    with Tape() as tape:
        out = m(images(4, 2), "train", rng(4), 0.5)
        loss = joint_loss(out.emo_logits, np.arange(4), out.id_logits, np.arange(4), LossConfig(num_identities=8))
    backward(loss.total, tape)
    grads = [p.grad for p in m.parameters()]
    assert all(np.all(np.isfinite(g)) for g in grads)
    assert any(np.any(g) for g in grads)


def test_head_pooled_matches_head():
    m, _, _ = _shared("if")
    xe, xi = m.extract(images(2, 4), "eval")
    from idennet.autodiff import avg_pool_2x2

    a = m.head(xe, xi, "eval")
    b = m.head_pooled(avg_pool_2x2(xe), avg_pool_2x2(xi), "eval")
    np.testing.assert_allclose(b.emo_logits.data, a.emo_logits.data, rtol=1e-4, atol=1e-5)
    np.testing.assert_allclose(b.fusion_maps.data, a.fusion_maps.data, rtol=1e-4, atol=1e-4)


# ---- heatmaps


def test_heatmap_constant_map():
    assert np.all(extract_heatmap(np.full((1, 12, 12, 5), 3.0)) == 0.5)


def test_heatmap_hot_pixel():
    maps = np.zeros((1, 12, 12, 2))
    maps[0, 5, 7] = 4.0
    hm = extract_heatmap(maps)
    assert hm.shape == (1, 48, 48)
    r, c = np.unravel_index(hm[0].argmax(), (48, 48))
    assert hm[0, r, c] == 1.0
    assert r // 4 == 5 and c // 4 == 7


def test_heatmap_range():
    hm = extract_heatmap(rng(0).standard_normal((3, 12, 12, 4)))
    assert hm.min() >= 0 and hm.max() <= 1
    assert np.allclose(hm.reshape(3, -1).min(axis=1), 0) and np.allclose(hm.reshape(3, -1).max(axis=1), 1)

