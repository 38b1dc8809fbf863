from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundwork import autodiff as ad
from groundwork import model as M
from groundwork import synthworld as sw
from groundwork.autodiff import Tensor

WORLD = sw.WorldConfig()
SMALL = M.ModelConfig(img_dim=WORLD.feature_dim, d=8, n_heads=2, n_img_layers=1, n_txt_layers=1, n_fusion=1)


def randomized(params, seed=0, scale=0.3):
    """Every weight (including zero-initialized fusion outputs) resampled."""
    rng = np.random.default_rng(seed)
    for _, t in params.items():
        t.data = rng.normal(0, scale, size=t.shape)
    return params


def sample(seed=0, mode="detection"):
    return sw.make_sample(seed, WORLD, mode)


def test_parameter_census_is_stable():
    cfg = M.ModelConfig(img_dim=WORLD.feature_dim)
    a, b = M.init_params(cfg, 0), M.init_params(cfg, 1)
    assert a.census() == b.census()
    assert a["txt.embed"].shape[0] == len(sw.VOCAB)
    assert all(np.all(np.isfinite(t.data)) for _, t in a.items())


def test_dual_encode_shapes_on_five_by_five():
    world = sw.WorldConfig(grid=(5, 5))
    cfg = M.ModelConfig(img_dim=world.feature_dim, grid=(5, 5), d=32)
    p = M.init_params(cfg)
    smp = sw.assemble_sample(sw.Scene((5, 5), (), 0), sw.prompt_for_labels(["red circle", "blue square"]),
                             np.zeros((25, world.feature_dim)))
    assert smp.text.n_tokens == 8
    text = sw.prompt_for_labels(["red circle"])
    smp = smp.with_text(sw.TextSpec("detection", text.token_ids + (sw.VOCAB.id("a"),) * 2,
                                    text.spans, text.span_labels, text.span_objects))
    O0, P0 = M.dual_encode(smp, p)
    assert O0.shape == (25, 32) and P0.shape == (7, 32)


def test_dual_encode_is_deterministic():
    p = M.init_params(SMALL, 3)
    a, b = M.dual_encode(sample(), p), M.dual_encode(sample(), p)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()


def test_zeroed_encoder_blocks_pass_inputs_through():
    p = M.init_params(SMALL, 1)
    for name, t in p.items():
        if ".blocks." in name or name.endswith("proj.b"):
            t.data = np.zeros_like(t.data)
    smp = sample(2)
    O0, P0 = M.dual_encode(smp, p)
    expected_O = smp.image_tokens @ p["img.proj.w"].data + M.sinusoidal_2d(SMALL.grid, SMALL.d)
    ids = np.array(smp.text.token_ids)
    expected_P = p["txt.embed"].data[ids] + p["txt.pos"].data[: len(ids)]
    np.testing.assert_allclose(O0.data, expected_O, atol=1e-12)
    np.testing.assert_allclose(P0.data, expected_P, atol=1e-12)


def test_over_budget_text_is_input_error():
    p = M.init_params(SMALL)
    with pytest.raises(M.InputError):
        M.dual_encode(sample(), p, token_ids=[1] * 300)


def test_fresh_fusion_is_identity():
    p = M.init_params(M.ModelConfig(img_dim=WORLD.feature_dim), 0)
    O0, P0 = M.dual_encode(sample(), p)
    O, P = M.fuse(O0, P0, p)
    assert O.data.tobytes() == O0.data.tobytes()
    assert P.data.tobytes() == P0.data.tobytes()


def test_no_fusion_layers_is_identity():
    cfg = M.ModelConfig(img_dim=WORLD.feature_dim, n_fusion=0)
    p = randomized(M.init_params(cfg))
    O0, P0 = M.dual_encode(sample(), p)
    O, P = M.fuse(O0, P0, p)
    assert O is O0 and P is P0


def test_without_fusion_text_features_ignore_the_image():
    cfg = M.ModelConfig(img_dim=WORLD.feature_dim, n_fusion=0)
    p = randomized(M.init_params(cfg), 4)
    a, b = sample(1), sample(2)
    b = SimpleNamespace(image_tokens=b.image_tokens, text=a.text)
    pa, pb = M.forward(a, p).P, M.forward(b, p).P
    assert pa.data.tobytes() == pb.data.tobytes()


def test_fuse_dimension_mismatch():
    p = M.init_params(SMALL)
    with pytest.raises(ad.DimensionError):
        M.fuse(Tensor(np.zeros((4, 8))), Tensor(np.zeros((3, 6))), p)


def test_fuse_gradcheck_on_small_inputs():
    cfg = M.ModelConfig(img_dim=WORLD.feature_dim, d=8, n_heads=2, n_fusion=1)
    p = randomized(M.init_params(cfg), 7)
    rng = np.random.default_rng(0)
    O0 = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    P0 = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    w = rng.normal(size=(4, 8))

    def f():
        O, P = M.fuse(O0, P0, p)
        return ad.sum(ad.mul(ad.add(O, P), w))

    fusion = [t for n, t in p.items() if n.startswith("fusion.")]
    assert ad.gradcheck(f, [O0, P0, *fusion], eps=1e-5) <= 1e-4


def test_matching_logits_of_basis_is_identity():
    E = Tensor(np.eye(4))
    np.testing.assert_array_equal(M.matching_logits(E, E, 1.0).data, np.eye(4))


def test_matching_logits_equal_class_logits_when_prompt_is_weight_matrix():
    rng = np.random.default_rng(1)
    O, W = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(M.matching_logits(Tensor(O), Tensor(W), 1.0).data, O @ W.T, atol=1e-14)


def test_matching_logits_loop_oracle():
    rng = np.random.default_rng(2)
    O, P, tau = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), 0.7
    S = M.matching_logits(Tensor(O), Tensor(P), tau).data
    for i in range(3):
        for j in range(2):
            assert S[i, j] == pytest.approx(sum(O[i, k] * P[j, k] for k in range(4)) / tau, abs=1e-13)


def test_nonpositive_temperature_rejected():
    with pytest.raises(M.ConfigError):
        M.matching_logits(Tensor(np.eye(2)), Tensor(np.eye(2)), 0.0)
    with pytest.raises(M.ConfigError):
        M.ModelConfig(tau=-1.0)


def _force_offsets(p, raw):
    """Zero the box head hidden path so its output is exactly the bias."""
    p["box.fc1.w"].data[:] = 0
    p["box.fc2.w"].data[:] = 0
    p["box.fc2.b"].data[:] = raw


def test_box_decode_arithmetic():
    p = M.init_params(SMALL)
    unit = np.log(np.expm1(1.0))  # softplus^-1(1)
    _force_offsets(p, [unit] * 4 + [0.0])
    anchors = np.array([[2.5, 2.5]])
    boxes, offsets, _ = M.predict_boxes(Tensor(np.zeros((1, 8))), anchors, p)
    np.testing.assert_allclose(offsets.data, [[1, 1, 1, 1]], atol=1e-12)
    np.testing.assert_allclose(boxes.data, [[1.5, 1.5, 3.5, 3.5]], atol=1e-12)


def test_zero_offsets_collapse_then_clamp():
    p = M.init_params(SMALL)
    _force_offsets(p, [-60.0] * 4 + [0.0])
    boxes, _, _ = M.predict_boxes(Tensor(np.zeros((1, 8))), np.array([[2.5, 2.5]]), p)
    np.testing.assert_allclose(boxes.data, [[2.5, 2.5, 2.5, 2.5]], atol=1e-12)
    c = M.clamp_boxes(boxes.data)
    np.testing.assert_allclose(c[0, 2] - c[0, 0], 1e-3)
    np.testing.assert_allclose(c[0, 3] - c[0, 1], 1e-3)


def test_box_head_gradcheck():
    p = randomized(M.init_params(SMALL), 5)
    O = Tensor(np.random.default_rng(3).normal(size=(3, 8)), requires_grad=True)
    anchors = sw.anchor_centers((6, 6))[:3]
    w = np.random.default_rng(4).normal(size=(3, 4))

    def f():
        boxes, _, ctr = M.predict_boxes(O, anchors, p)
        return ad.add(ad.sum(ad.mul(boxes, w)), ad.sum(ad.sigmoid(ctr)))

    head = [t for n, t in p.items() if n.startswith("box.")]
    assert ad.gradcheck(f, [O, *head], eps=1e-5) <= 1e-4


# decoding

def test_very_negative_logits_give_no_detections():
    S = np.full((4, 5), -50.0)
    boxes = np.tile([[0.0, 0.0, 1.0, 1.0]], (4, 1))
    assert M.decode_detections(S, boxes, np.zeros(4), [(1, 3)], 0.05) == []


def test_empty_span_list_gives_nothing():
    assert M.decode_detections(np.zeros((2, 2)), np.ones((2, 4)), np.zeros(2), []) == []


def test_duplicate_box_suppressed():
    sig_inv = lambda p: np.log(p / (1 - p))  # noqa: E731
    S = np.array([[sig_inv(0.9)], [sig_inv(0.8)]])
    boxes = np.array([[0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 2.0, 2.1]])
    dets = M.decode_detections(S, boxes, np.full(2, 60.0), [(0, 1)], 0.05, 0.6)
    assert len(dets) == 1
    assert dets[0].score == pytest.approx(0.9)


def brute_force_decode(S, boxes, ctr, spans, thr, nms_iou):
    sig = lambda x: 1 / (1 + np.exp(-x))  # noqa: E731
    out = []
    for k, (s, e) in enumerate(spans):
        cand = []
        for r in range(len(boxes)):
            score = sig(max(S[r, t] for t in range(s, e))) * sig(ctr[r])
            if score >= thr:
                cand.append((score, r))
        cand.sort(key=lambda c: -c[0])
        kept = []
        for score, r in cand:
            if all(M.pairwise_iou(boxes[r], boxes[q])[0, 0] <= nms_iou for _, q in kept):
                kept.append((score, r))
        out.extend((k, r, float(score)) for score, r in kept)
    return sorted(out)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6))
def test_decode_matches_brute_force_three_regions_two_spans(seed):
    rng = np.random.default_rng(seed)
    S = rng.normal(0, 3, size=(3, 5))
    xy = rng.uniform(0, 3, size=(3, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(0.5, 2, size=(3, 2))], axis=1)
    ctr = rng.normal(0, 2, size=3)
    spans = [(0, 2), (2, 5)]
    got = sorted((d.span, d.region, d.score) for d in M.decode_detections(S, boxes, ctr, spans, 0.05, 0.5))
    want = brute_force_decode(S, boxes, ctr, spans, 0.05, 0.5)
    assert [g[:2] for g in got] == [w[:2] for w in want]
    assert np.allclose([g[2] for g in got], [w[2] for w in want], rtol=0, atol=1e-12)


def test_detection_validates_box_and_score():
    with pytest.raises(ValueError):
        M.Detection((1.0, 0.0, 0.0, 1.0), 0.5, 0)
    with pytest.raises(ValueError):
        M.Detection((0.0, 0.0, 1.0, 1.0), 1.5, 0)


def test_prompt_permutation_equivariance_without_text_positions():
    cfg = M.ModelConfig(img_dim=WORLD.feature_dim, text_pos=False)
    p = randomized(M.init_params(cfg), 11, scale=0.2)
    smp = sample(5)
    labels = ["red circle", "blue square", "green star", "purple cross"]
    dets_a = M.detect(smp, p, sw.prompt_for_labels(labels), score_thr=0.0)
    perm = [2, 0, 3, 1]
    dets_b = M.detect(smp, p, sw.prompt_for_labels([labels[i] for i in perm]), score_thr=0.0)

    def keyed(dets, order):
        return sorted((order[d.span], d.region, round(d.score, 9)) for d in dets)

    assert keyed(dets_a, list(range(4))) == keyed(dets_b, perm)


def test_forward_deterministic():
    p = randomized(M.init_params(SMALL), 2)
    a, b = M.forward(sample(3), p), M.forward(sample(3), p)
    assert a.S.data.tobytes() == b.S.data.tobytes()
    assert a.boxes.data.tobytes() == b.boxes.data.tobytes()


# checkpoints

def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = randomized(M.init_params(SMALL), 9)
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(path, p, "abc123")
    q, h = M.load_checkpoint(path, SMALL)
    assert h == "abc123"
    assert q.names() == p.names()
    for n in p.names():
        assert q[n].data.tobytes() == p[n].data.tobytes()


def test_checkpoint_layout_header(tmp_path):
    blob = M.encode_checkpoint({"w": np.array([[1.0, 2.0]])}, "h")
    assert blob.startswith(M.MAGIC)
    assert blob.endswith(np.array([1.0, 2.0], dtype="<f8").tobytes())


def test_corrupt_magic_rejected(tmp_path):
    p = M.init_params(SMALL)
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(path, p, "h")
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(path, SMALL)


def test_truncated_checkpoint_rejected(tmp_path):
    p = M.init_params(SMALL)
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(path, p, "h")
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(path, SMALL)
