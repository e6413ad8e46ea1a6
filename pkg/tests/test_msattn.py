import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdet import numcore as nc
from msdet.errors import ContractError, DimensionError
from msdet.msattn import (
    DetectorNet,
    FlatTokens,
    ModelConfig,
    anchor_refine,
    competitive_query_selection,
    decoder_layer_forward,
    detection_head_forward,
    flatten_and_tag,
    init_params,
    ms_deformable_attention,
    phi_scale,
    position_embed,
    psi_constrain,
    self_attention,
    toy_backbone_forward,
    view,
)
from msdet.scenes import SceneParams, generate_scene, render_pair

RNG = np.random.default_rng(1234)


def _batch(n=2, seed=0):
    pairs = [render_pair(generate_scene(SceneParams(), seed, i)) for i in range(n)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def _perturbed_net(cfg=ModelConfig(), seed=0, scale=0.3):
    """Network whose zero-initialized maps are replaced by random values."""
    net = DetectorNet(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in net.params:
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return net


# ------------------------------------------------------------------ backbone
def test_backbone_level_shapes():
    cfg = ModelConfig()
    ps = init_params(cfg)
    img = RNG.random((1, 64, 64, 3)) - 0.5
    pyr = toy_backbone_forward(img, view(ps, "bb.visible."), levels=3)
    assert [lv.shape for lv in pyr] == [(1, 8, 8, 32), (1, 4, 4, 32), (1, 2, 2, 32)]


def test_backbone_modalities_use_distinct_parameters():
    ps = init_params(ModelConfig())
    gray = RNG.random((1, 64, 64, 1)) - 0.5
    vis = toy_backbone_forward(np.repeat(gray, 3, axis=-1), view(ps, "bb.visible."))
    ir = toy_backbone_forward(gray, view(ps, "bb.infrared."))
    assert not np.allclose(vis[0].data, ir[0].data)


def test_backbone_zero_image_zero_bias():
    ps = init_params(ModelConfig())
    pyr = toy_backbone_forward(np.zeros((1, 64, 64, 1)), view(ps, "bb.infrared."))
    assert all(not lv.data.any() for lv in pyr)


def test_backbone_rejects_indivisible_extent():
    ps = init_params(ModelConfig())
    with pytest.raises(DimensionError):
        toy_backbone_forward(np.zeros((1, 48, 48, 1)), view(ps, "bb.infrared."))


# ------------------------------------------------------------------- flatten
def _grid(h, w, c=3, fill=None):
    data = RNG.random((1, h, w, c)) if fill is None else np.full((1, h, w, c), fill)
    return nc.Tensor(data)


def test_flatten_order_visible_first():
    seq = flatten_and_tag({1: [_grid(2, 2, fill=1.0)], 0: [_grid(2, 2, fill=0.0)]})
    assert len(seq) == 8
    assert list(seq.modality) == [0] * 4 + [1] * 4
    assert not seq.tokens.data[0, :4].any() and (seq.tokens.data[0, 4:] == 1).all()


def test_flatten_provenance_round_trip():
    seq = flatten_and_tag({0: [_grid(4, 4), _grid(2, 2)], 1: [_grid(4, 4), _grid(2, 2)]})
    assert len(seq) == 2 * (16 + 4)
    for t in range(len(seq)):
        assert seq.index_of(seq.modality[t], seq.level[t], seq.row[t], seq.col[t]) == t


def test_flatten_grid_center_position():
    seq = flatten_and_tag({0: [_grid(8, 8)], 1: [_grid(8, 8)]})
    assert tuple(seq.center[0]) == (0.0625, 0.0625)


def test_flatten_channel_mismatch():
    with pytest.raises(DimensionError):
        flatten_and_tag({0: [_grid(2, 2, c=3)], 1: [_grid(2, 2, c=4)]})


# ----------------------------------------------------------------- selection
def _scored_sequence(scores):
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores) // 2
    seq = FlatTokens(nc.Tensor(scores.reshape(1, -1, 1)), [0] * n + [1] * n, [0] * 2 * n,
                     [0] * 2 * n, list(range(n)) * 2, [(1, n)])
    scoring = {"w": nc.Tensor(np.ones((1, 1))), "b": nc.Tensor(np.zeros(1))}
    head = {"w1": nc.Tensor(np.zeros((1, 4))), "b1": nc.Tensor(np.zeros(4)),
            "w2": nc.Tensor(np.zeros((4, 4))), "b2": nc.Tensor(np.zeros(4))}
    return seq, scoring, head


def test_selection_picks_top_scores_with_provenance():
    seq, scoring, head = _scored_sequence([0.9, 0.1, 0.8, 0.2])
    sel = competitive_query_selection(seq, scoring, head, 2)
    assert list(sel["index"][0]) == [0, 2]
    assert list(sel["modality"][0]) == [0, 1]


def test_selection_ties_prefer_lower_index():
    seq, scoring, head = _scored_sequence([0.5, 0.5, 0.5, 0.5])
    assert list(competitive_query_selection(seq, scoring, head, 3)["index"][0]) == [0, 1, 2]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=4, max_size=20).filter(lambda x: len(x) % 2 == 0),
       st.integers(1, 4))
def test_selection_invariant_to_monotone_transform(scores, k):
    scores = np.asarray(scores) / 10.0
    seq, scoring, head = _scored_sequence(scores)
    a = competitive_query_selection(seq, scoring, head, k)["index"]
    seq2, _, _ = _scored_sequence(np.exp(scores) * 3.0 + 1.0)
    b = competitive_query_selection(seq2, scoring, head, k)["index"]
    assert set(a[0]) == set(b[0])


def test_zero_proposal_head_keeps_base_anchor():
    seq, scoring, head = _scored_sequence([0.9, 0.1, 0.8, 0.2])
    sel = competitive_query_selection(seq, scoring, head, 2)
    assert np.array_equal(sel["boxes"].data, sel["base"])


def test_selection_more_than_tokens_is_contract_error():
    seq, scoring, head = _scored_sequence([0.9, 0.1, 0.8, 0.2])
    with pytest.raises(ContractError):
        competitive_query_selection(seq, scoring, head, 5)


# ------------------------------------------------------------------ geometry
def _mlp(n_in, n_hidden, n_out, zero=False, seed=0):
    rng = np.random.default_rng(seed)
    f = (lambda s: np.zeros(s)) if zero else (lambda s: rng.standard_normal(s))
    return {"w1": nc.Tensor(f((n_in, n_hidden))), "b1": nc.Tensor(f(n_hidden)),
            "w2": nc.Tensor(f((n_hidden, n_out))), "b2": nc.Tensor(f(n_out))}


def test_position_embed_cases():
    mlp = _mlp(4, 8, 8)
    a = np.array([[0.3, 0.4, 0.2, 0.1]])
    assert np.array_equal(position_embed(nc.Tensor(a), mlp).data, position_embed(nc.Tensor(a.copy()), mlp).data)
    assert not position_embed(nc.Tensor(a), _mlp(4, 8, 8, zero=True)).data.any()
    b = a.copy()
    b[0, 2] = 0.35
    assert not np.allclose(position_embed(nc.Tensor(a), mlp).data, position_embed(nc.Tensor(b), mlp).data)


@pytest.mark.parametrize("point,shape,expected", [
    ((0.5, 0.5), (8, 8), (3.5, 3.5)),
    ((0.0625, 0.0625), (8, 8), (0.0, 0.0)),
    ((0.0625, 0.0625), (4, 4), (-0.25, -0.25)),
    ((0.5, 0.5), (4, 4), (1.5, 1.5)),
])
def test_phi_scale(point, shape, expected):
    assert tuple(phi_scale(np.array(point), shape).data) == expected


def test_psi_zero_raw_keeps_reference_point():
    anchor = np.array([0.3, 0.6, 0.2, 0.1])
    off = psi_constrain(np.zeros(2), anchor, (8, 8)).data
    assert tuple(off) == (0.0, 0.0)
    assert np.array_equal(phi_scale(anchor[:2], (8, 8)).data + off, phi_scale(anchor[:2], (8, 8)).data)


def test_psi_saturates_at_half_extent():
    anchor = np.array([0.5, 0.5, 0.25, 0.25])
    off = psi_constrain(np.array([np.inf, 0.0]), anchor, (8, 8)).data
    assert tuple(off) == (1.0, 0.0)
    big = psi_constrain(np.array([1e3, -1e3]), np.array([0.5, 0.5, 0.3, 0.2]), (4, 4)).data
    assert abs(big[0]) <= 0.15 * 4 and abs(big[1]) <= 0.1 * 4


# ----------------------------------------------------------------- attention
def _attn_params(C=8, M=2, H=2, L=3, K=4, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "w_off": nc.Tensor(rng.standard_normal((C, M * H * L * K * 2))),
        "b_off": nc.Tensor(rng.standard_normal(M * H * L * K * 2)),
        "w_att": nc.Tensor(rng.standard_normal((C, H * M * L * K))),
        "b_att": nc.Tensor(rng.standard_normal(H * M * L * K)),
        "w_val": nc.Tensor(rng.standard_normal((C, C))),
        "w_out": nc.Tensor(rng.standard_normal((C, C))),
    }


def _maps(C=8, sizes=((8, 8), (4, 4), (2, 2)), M=2, seed=0, const=None, batch=1):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(M):
        if const is not None:
            out.append([nc.Tensor(np.broadcast_to(const, (batch, h, w, C)).copy()) for h, w in sizes])
        else:
            out.append([nc.Tensor(rng.standard_normal((batch, h, w, C))) for h, w in sizes])
    return out


def test_constant_maps_give_projected_value():
    C = 8
    v = RNG.standard_normal(C)
    p = _attn_params(C)
    q = nc.Tensor(RNG.standard_normal((1, 5, C)))
    anchor = nc.Tensor(np.tile([0.5, 0.5, 0.4, 0.5], (1, 5, 1)))
    out = ms_deformable_attention(q, anchor, _maps(C, const=v), p, heads=2, points=4).data
    expected = v @ p["w_val"].data @ p["w_out"].data
    np.testing.assert_allclose(out, np.broadcast_to(expected, out.shape), rtol=1e-12, atol=1e-12)


def test_one_hot_weights_read_single_cell():
    C, H, M, L, K = 8, 2, 2, 3, 4
    p = _attn_params(C)
    p["w_off"] = nc.Tensor(np.zeros_like(p["w_off"].data))
    p["b_off"] = nc.Tensor(np.zeros_like(p["b_off"].data))
    p["w_att"] = nc.Tensor(np.zeros_like(p["w_att"].data))
    bias = np.full((H, M, L, K), -1e4)
    choice = {0: (0, 0, 1), 1: (1, 0, 2)}  # head -> (modality, level, point)
    for h, (m, lv, k) in choice.items():
        bias[h, m, lv, k] = 0.0
    p["b_att"] = nc.Tensor(bias.reshape(-1))
    maps = _maps(C)
    anchor = nc.Tensor(np.array([[[4.5 / 8, 4.5 / 8, 0.3, 0.3]]]))  # Phi lands on cell (4, 4) of 8x8
    q = nc.Tensor(RNG.standard_normal((1, 1, C)))
    out = ms_deformable_attention(q, anchor, maps, p, heads=H, points=K).data[0, 0]
    Dh = C // H
    wv, wo = p["w_val"].data, p["w_out"].data
    expected = sum(maps[m][lv].data[0, 4, 4] @ wv[:, h * Dh:(h + 1) * Dh] @ wo[h * Dh:(h + 1) * Dh]
                   for h, (m, lv, _) in choice.items())
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def _inside(loc, anchor):
    a = anchor[:, None, None, None, :, None, :]
    lo, hi = a[..., :2] - a[..., 2:] / 2, a[..., :2] + a[..., 2:] / 2
    return bool(((loc >= lo) & (loc <= hi)).all())


def test_weights_normalized_jointly_and_points_contained():
    C = 8
    p = _attn_params(C, seed=3)
    q = nc.Tensor(RNG.standard_normal((2, 7, C)) * 3)
    cxcy = RNG.uniform(0.2, 0.8, size=(2, 7, 2))
    wh = RNG.uniform(0.05, 0.4, size=(2, 7, 2))
    anchor = nc.Tensor(np.concatenate([cxcy, wh], axis=-1))
    rec = {}
    ms_deformable_attention(q, anchor, _maps(C, batch=2), p, heads=2, points=4, record=rec)
    w = rec["weights"]                      # [B, M, H, L, N, K]
    assert (w >= 0).all()
    assert np.abs(w.sum(axis=(1, 3, 5)) - 1.0).max() <= 1e-9
    assert _inside(rec["locations"], anchor.data)


def test_offsets_for_each_modality_use_disjoint_parameters():
    C, H, M, L, K = 8, 2, 2, 3, 4
    p = _attn_params(C)
    q = nc.Tensor(RNG.standard_normal((1, 4, C)))
    anchor = nc.Tensor(np.tile([0.4, 0.6, 0.3, 0.2], (1, 4, 1)))
    rec_a, rec_b = {}, {}
    ms_deformable_attention(q, anchor, _maps(C), p, H, K, record=rec_a)
    w = p["w_off"].data.reshape(C, M, H * L * K * 2).copy()
    b = p["b_off"].data.reshape(M, -1).copy()
    w[:, 1] += RNG.standard_normal(w[:, 1].shape)
    b[1] += 1.0
    p["w_off"], p["b_off"] = nc.Tensor(w.reshape(C, -1)), nc.Tensor(b.reshape(-1))
    ms_deformable_attention(q, anchor, _maps(C), p, H, K, record=rec_b)
    assert np.array_equal(rec_a["locations"][:, 0], rec_b["locations"][:, 0])
    assert not np.array_equal(rec_a["locations"][:, 1], rec_b["locations"][:, 1])


# ------------------------------------------------------------------- decoder
def _layer_params(C=8, seed=0):
    rng = np.random.default_rng(seed)
    sa = {}
    for nm in "qkvo":
        sa[f"w{nm}"] = nc.Tensor(rng.standard_normal((C, C)) * 0.5)
        sa[f"b{nm}"] = nc.Tensor(rng.standard_normal(C) * 0.1)
    lp = {"sa": sa, "ca": _attn_params(C, seed=seed), "ffn": _mlp(C, 16, C, seed=seed)}
    for i in (1, 2, 3):
        lp[f"ln{i}.g"] = nc.Tensor(np.ones(C))
        lp[f"ln{i}.b"] = nc.Tensor(np.zeros(C))
    return lp


def test_single_query_self_attention_is_value_projection():
    C = 8
    lp = _layer_params(C)["sa"]
    z = nc.Tensor(RNG.standard_normal((1, 1, C)))
    pos = nc.Tensor(RNG.standard_normal((1, 1, C)))
    out = self_attention(z, pos, lp, heads=2).data
    expected = (z.data @ lp["wv"].data + lp["bv"].data) @ lp["wo"].data + lp["bo"].data
    np.testing.assert_allclose(out, expected, rtol=1e-13, atol=1e-13)


def test_mask_isolates_query_groups_bitwise():
    C, N = 8, 6
    lp = _layer_params(C)
    pos = _mlp(4, 8, C)
    z = RNG.standard_normal((1, N, C))
    anchor = nc.Tensor(np.concatenate([RNG.uniform(0.3, 0.7, (1, N, 2)), RNG.uniform(0.1, 0.3, (1, N, 2))], -1))
    mask = np.ones((N, N), dtype=bool)
    mask[:3, :3] = False
    mask[3:, 3:] = False
    maps = _maps(C)
    a = decoder_layer_forward(nc.Tensor(z), anchor, maps, lp, pos, 2, 4, mask).data
    z2 = z.copy()
    z2[0, 3:] += RNG.standard_normal((3, C)) * 5
    b = decoder_layer_forward(nc.Tensor(z2), anchor, maps, lp, pos, 2, 4, mask).data
    assert a.shape == z.shape
    assert np.array_equal(a[0, :3], b[0, :3])
    assert not np.array_equal(a[0, 3:], b[0, 3:])


def test_mask_shape_mismatch():
    C = 8
    lp = _layer_params(C)
    z = nc.Tensor(RNG.standard_normal((1, 4, C)))
    anchor = nc.Tensor(np.tile([0.5, 0.5, 0.2, 0.2], (1, 4, 1)))
    with pytest.raises(DimensionError):
        decoder_layer_forward(z, anchor, _maps(C), lp, _mlp(4, 8, C), 2, 4, np.zeros((3, 3), dtype=bool))


# ---------------------------------------------------------------- refinement
def test_anchor_refine_zero_mlp_is_identity():
    b = RNG.uniform(0.01, 0.99, size=(3, 4))
    out = anchor_refine(nc.Tensor(RNG.standard_normal((3, 8))), nc.Tensor(b), _mlp(8, 8, 4, zero=True)).data
    assert np.array_equal(out, b)


def test_anchor_refine_log3_example():
    mlp = _mlp(1, 1, 4, zero=True)
    mlp["b2"] = nc.Tensor(np.array([np.log(3.0), 0, 0, 0]))
    out = anchor_refine(nc.Tensor(np.zeros((1, 1))), nc.Tensor(np.full((1, 4), 0.5)), mlp).data
    np.testing.assert_allclose(out, [[0.75, 0.5, 0.5, 0.5]], rtol=0, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=4, max_size=4),
       st.lists(st.floats(1e-5, 1 - 1e-5), min_size=4, max_size=4))
def test_anchor_refine_stays_in_open_unit_box(delta, prev):
    mlp = _mlp(1, 1, 4, zero=True)
    mlp["b2"] = nc.Tensor(np.array(delta))
    out = anchor_refine(nc.Tensor(np.zeros((1, 1))), nc.Tensor(np.array([prev])), mlp).data
    assert ((out > 0) & (out < 1)).all()


def test_refine_logit_gradients():
    prev = nc.Parameter(RNG.uniform(0.1, 0.9, (3, 4)), "prev")
    delta = nc.Parameter(RNG.standard_normal((3, 4)), "delta")
    w = RNG.standard_normal((3, 4))
    err = nc.grad_check(lambda: nc.tsum(nc.refine_logit(prev, delta) * w), [prev, delta], samples=24)
    assert err < 1e-6


def test_detection_head_cases():
    head = {"cls.w": nc.Tensor(np.zeros((8, 4))), "cls.b": nc.Tensor(np.zeros(4)), "box": _mlp(8, 8, 4, zero=True)}
    z = nc.Tensor(RNG.standard_normal((1, 3, 8)))
    anchor = nc.Tensor(RNG.uniform(0.1, 0.9, (1, 3, 4)))
    logits, box = detection_head_forward(z, anchor, head)
    assert (nc.sigmoid(logits).data == 0.5).all()
    assert np.array_equal(box.data, anchor.data)
    head["cls.w"] = nc.Tensor(RNG.standard_normal((8, 4)) * 10)
    probs = nc.sigmoid(detection_head_forward(z, anchor, head)[0]).data
    assert ((probs > 0) & (probs < 1)).all()


# --------------------------------------------------------------------- model
def test_model_output_counts_and_determinism():
    vis, ir = _batch(2)
    net = _perturbed_net()
    a = net(vis, ir)
    b = net(vis, ir)
    assert a.logits.shape == (2, 60, 4) and a.boxes.shape == (2, 60, 4)
    assert np.array_equal(a.logits.data, b.logits.data) and np.array_equal(a.boxes.data, b.boxes.data)
    assert np.isfinite(a.logits.data).all() and np.isfinite(a.boxes.data).all()
    assert len(a.aux) == 2 and len(a.anchors) == 4
    labels = np.array([[0, 1, 2], [3, 0, 0]])
    boxes = RNG.uniform(0.2, 0.6, (2, 3, 4))
    c = net(vis, ir, labels, boxes)
    assert c.logits.shape == (2, 63, 4) and c.num_dn == 3


def test_model_matching_queries_ignore_dn_under_mask():
    from msdet.matchloss import GroundTruth, build_denoise_batch

    vis, ir = _batch(2)
    net = _perturbed_net()
    gts = [GroundTruth([0, 2], [[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.2, 0.3]]), GroundTruth([1], [[0.5, 0.5, 0.3, 0.3]])]
    dn = build_denoise_batch(gts, 1, 0.4, 0.25, np.random.default_rng(0), 4, 60)
    plain = net(vis, ir)
    a = net(vis, ir, dn.labels, dn.boxes, dn.mask)
    b = net(vis, ir, (dn.labels + 1) % 4, np.clip(dn.boxes + 0.05, 0.01, 0.99), dn.mask)
    assert np.array_equal(a.logits.data[:, :60], b.logits.data[:, :60])
    np.testing.assert_allclose(a.boxes.data[:, :60], plain.boxes.data, rtol=0, atol=1e-12)


def test_model_zeroed_refinement_keeps_anchors_bit_stable():
    vis, ir = _batch(2)
    net = _perturbed_net()
    for d in range(net.cfg.layers):
        for nm in ("w2", "b2"):
            net.params[f"dec{d}.box.{nm}"].data[:] = 0.0
    out = net(vis, ir)
    for a in out.anchors[1:]:
        assert np.array_equal(a, out.anchors[0])


def test_model_sampling_contained_and_normalized():
    vis, ir = _batch(2)
    out = _perturbed_net(scale=1.0)(vis, ir, record=True)
    for rec, anchor in zip(out.records, out.anchors[:-1]):
        assert np.abs(rec["weights"].sum(axis=(1, 3, 5)) - 1.0).max() <= 1e-9
        assert _inside(rec["locations"], anchor)


@pytest.mark.parametrize("cfg", [
    ModelConfig(modalities=("visible",)),
    ModelConfig(modalities=("infrared",)),
    ModelConfig(mcqs=False, mdca=False),
    ModelConfig(mcqs=False),
    ModelConfig(mdca=False),
    ModelConfig(cqs=False),
])
def test_ablation_variants_forward(cfg):
    vis, ir = _batch(1)
    out = DetectorNet(cfg)(vis, ir, record=True)
    assert out.logits.shape == (1, 60, 4)
    M = out.records[0]["weights"].shape[1]
    assert M == (2 if cfg.mdca and len(cfg.modalities) == 2 else 1)
    if cfg.fused:
        assert (out.selection["modality"] == -1).all()


def test_mdca_switch_leaves_selection_unchanged():
    vis, ir = _batch(2)
    a = DetectorNet(ModelConfig(), seed=4)(vis, ir)
    b = DetectorNet(ModelConfig(mdca=False), seed=4)(vis, ir)
    assert np.array_equal(a.selection["index"], b.selection["index"])


def test_model_end_to_end_gradient_small():
    cfg = ModelConfig(channels=8, heads=2, points=2, levels=2, layers=2, queries=6, ffn_dim=8, stem_patch=8)
    net = _perturbed_net(cfg, scale=0.1)
    vis, ir = _batch(1)
    vis, ir = vis[:, :32, :32], ir[:, :32, :32]
    w = np.random.default_rng(0).standard_normal((1, 6, 4))

    def f():
        out = net(vis, ir)
        return nc.tsum(out.boxes * w) + nc.tsum(nc.sigmoid(out.logits)) + nc.tsum(out.aux[0][1] * w)

    assert nc.grad_check(f, list(net.params), samples=40, seed=1) < 1e-4
