import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundwork import synthworld as sw
from groundwork.synthworld import Scene, SceneObject, WorldConfig

WORLD = WorldConfig()


def one(color, shape, box, grid=(6, 6)):
    return Scene(grid=grid, objects=(SceneObject(color, shape, box),), seed=0)


def test_empty_count_range_gives_empty_scene():
    cfg = WorldConfig(count_range=(0, 0))
    assert sw.sample_scene(5, cfg).objects == ()


def test_same_seed_same_bytes():
    assert sw.sample_scene(17, WORLD).to_bytes() == sw.sample_scene(17, WORLD).to_bytes()


def test_heldout_combo_never_sampled_in_ten_thousand_training_scenes():
    cfg = WorldConfig(heldout=(("red", "triangle"),))
    hits = 0
    for seed in range(10_000):
        for o in sw.sample_scene(seed, cfg).objects:
            hits += (o.color, o.shape) == ("red", "triangle")
    assert hits == 0


def test_heldout_split_forces_a_heldout_object():
    held = set(WORLD.heldout)
    for seed in range(50):
        s = sw.sample_scene(seed, WORLD, split="heldout")
        assert (s.objects[0].color, s.objects[0].shape) in held


def test_infeasible_config_raises_generation_error():
    cfg = WorldConfig(grid=(2, 2), count_range=(3, 3), size_range=(2, 2), max_retries=10)
    with pytest.raises(sw.GenerationError):
        sw.sample_scene(0, cfg)


def test_heldout_outside_product_rejected():
    with pytest.raises(ValueError):
        WorldConfig(heldout=(("red", "hexagon"),))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scene_invariants(seed):
    s = sw.sample_scene(seed, WORLD)
    H, W = s.grid
    for i, o in enumerate(s.objects):
        x1, y1, x2, y2 = o.box
        assert 0 <= x1 < x2 <= W and 0 <= y1 < y2 <= H
        assert (o.color, o.shape) not in WORLD.heldout
        for p in s.objects[i + 1:]:
            assert sw.box_iou(o.box, p.box) < 0.3


# rendering

def test_empty_scene_renders_background_everywhere():
    img = sw.render_scene(Scene((6, 6), (), 0), WORLD, noise_sigma=0.0)
    assert img.shape == (36, WORLD.feature_dim)
    assert np.all(img == img[0])
    assert img[0, 0] == 1.0 and img[0].sum() == 1.0


def test_single_cell_object_gives_one_foreground_row():
    img = sw.render_scene(one("red", "circle", (0.0, 0.0, 1.0, 1.0)), WORLD, noise_sigma=0.0)
    background = np.zeros(WORLD.feature_dim)
    background[0] = 1.0
    differs = [i for i in range(36) if not np.array_equal(img[i], background)]
    assert differs == [0]


def test_noisy_render_reproducible():
    s = sw.sample_scene(3, WORLD)
    a = sw.render_scene(s, WORLD, noise_sigma=0.1)
    b = sw.render_scene(s, WORLD, noise_sigma=0.1)
    assert a.tobytes() == b.tobytes()


def test_negative_sigma_rejected():
    with pytest.raises(ValueError):
        sw.render_scene(Scene((6, 6), (), 0), WORLD, noise_sigma=-1.0)


# texts and tokens

def test_tokenize_empty():
    ids = sw.tokenize([])
    assert ids == [sw.VOCAB.id("[CLS]"), sw.VOCAB.id("[SEP]")]
    assert sw.detokenize(ids) == []


def test_vocabulary_round_trip_and_size():
    words = list(sw.VOCAB.words)
    assert len(words) == len(set(words)) == 40
    for w in words:
        if w not in sw.SPECIALS:
            assert sw.detokenize(sw.tokenize([w])) == [w]
    regular = [w for w in words if w not in sw.SPECIALS]
    assert sw.detokenize(sw.tokenize(regular)) == regular


def test_tokenize_label_phrase():
    assert len(sw.tokenize("red circle .".split())) == 5


def test_unknown_word_named_in_error():
    with pytest.raises(sw.VocabularyError, match="hexagon"):
        sw.tokenize(["hexagon"])


def test_detection_text_without_distractors():
    t = sw.synthesize_text(one("red", "circle", (0.0, 0.0, 1.0, 1.0)), "detection", 0, n_distractors=0)
    assert t.words == ["[CLS]", "red", "circle", ".", "[SEP]"]
    assert t.spans == ((1, 3),)
    assert t.span_to_object(0) == 0


def test_detection_text_with_one_distractor():
    t = sw.synthesize_text(one("red", "circle", (0.0, 0.0, 1.0, 1.0)), "detection", 4, n_distractors=1)
    assert len(t.spans) == 2
    mapped = sorted(t.span_to_object(k) is None for k in range(2))
    assert mapped == [False, True]
    assert t.text_type == "detection"


def test_grounding_two_objects_uses_template_table():
    s = Scene((6, 6), (SceneObject("red", "circle", (0.0, 0.0, 1.0, 1.0)),
                       SceneObject("blue", "square", (3.0, 3.0, 4.0, 4.0))), 0)
    seen_two = False
    for seed in range(40):
        t = sw.synthesize_text(s, "grounding", seed)
        assert t.text_type == "grounding"
        for k, (a, b) in enumerate(t.spans):
            assert " ".join(t.words[a:b]) == t.span_labels[k]
            assert t.span_to_object(k) is not None
        seen_two |= len(t.spans) == 2
    assert seen_two
    assert len(sw.TEMPLATES_ONE) + len(sw.TEMPLATES_TWO) >= 8


def test_grounding_on_empty_scene_is_error():
    with pytest.raises(ValueError):
        sw.synthesize_text(Scene((6, 6), (), 0), "grounding", 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["detection", "grounding"]))
def test_text_invariants(seed, mode):
    s = sw.make_sample(seed, WORLD, mode)
    t = s.text
    assert t.n_tokens <= sw.MAX_TOKENS
    ends = sorted(t.spans)
    for (a, b), (c, _) in zip(ends, ends[1:]):
        assert b <= c
    if t.text_type == "detection":
        # label list separated by periods
        assert all(t.words[b] == "." for _, b in t.spans)
    # every gt box referenced by exactly one span
    assert len(s.box_spans) == len(s.boxes)


# targets

def brute_force_targets(scene, text):
    H, W = scene.grid
    refs = {}
    for k, objs in enumerate(text.span_objects):
        for j in objs:
            refs.setdefault(j, []).append(k)
    M = np.zeros((H * W, text.n_tokens))
    for r in range(H * W):
        cx, cy = r % W + 0.5, r // W + 0.5
        best, who = None, None
        for j in sorted(refs):
            x1, y1, x2, y2 = scene.objects[j].box
            if x1 < cx < x2 and y1 < cy < y2:
                area = (x2 - x1) * (y2 - y1)
                if best is None or area < best:
                    best, who = area, j
        for t in range(text.n_tokens):
            if who is not None and any(text.spans[k][0] <= t < text.spans[k][1] for k in refs[who]):
                M[r, t] = 1.0
    return M


def test_empty_scene_target_all_zero():
    s = Scene((6, 6), (), 0)
    t = sw.synthesize_text(s, "detection", 0, n_distractors=2)
    assert sw.build_target_matrix(s, t).matrix.sum() == 0


def test_single_cell_object_two_nonzeros():
    s = one("red", "circle", (2.0, 2.0, 3.0, 3.0))
    t = sw.synthesize_text(s, "detection", 0, n_distractors=0)
    M = sw.build_target_matrix(s, t).matrix
    assert M.sum() == 2
    assert np.count_nonzero(M.any(axis=1)) == 1


def test_three_objects_five_by_five_match_brute_force():
    cfg = WorldConfig(grid=(5, 5), count_range=(3, 3))
    for seed in range(20):
        s = sw.sample_scene(seed, cfg)
        assert len(s.objects) == 3
        t = sw.synthesize_text(s, "detection", seed, cfg)
        np.testing.assert_array_equal(sw.build_target_matrix(s, t).matrix, brute_force_targets(s, t))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["detection", "grounding"]))
def test_targets_match_brute_force_everywhere(seed, mode):
    smp = sw.make_sample(seed, WORLD, mode)
    np.testing.assert_array_equal(smp.targets.matrix, brute_force_targets(smp.scene, smp.text))


def test_missing_object_is_consistency_error():
    s = one("red", "circle", (0.0, 0.0, 1.0, 1.0))
    t = sw.prompt_for_labels(["red circle"]).with_objects([(3,)])
    with pytest.raises(sw.ConsistencyError):
        sw.build_target_matrix(s, t)


def test_match_threshold_validated():
    s = Scene((6, 6), (), 0)
    with pytest.raises(ValueError):
        sw.build_target_matrix(s, sw.prompt_for_labels(["red circle"]), iou_match_thr=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_same_label_rows_identical_on_label_columns(seed):
    smp = sw.make_sample(seed, WORLD, "detection")
    M = smp.targets.matrix
    labels = smp.region_labels()
    cols = smp.text.column_labels()
    for lab in set(l for l in labels if l is not None):
        rows = [r for r, l in enumerate(labels) if l == lab]
        span_cols = [c for c, l in enumerate(cols) if l == lab]
        block = M[np.ix_(rows, span_cols)]
        assert np.all(block == block[0])


def test_distractor_columns_are_zero():
    for seed in range(30):
        smp = sw.make_sample(seed, WORLD, "detection")
        for k, objs in enumerate(smp.text.span_objects):
            if not objs:
                a, b = smp.text.spans[k]
                assert smp.targets.matrix[:, a:b].sum() == 0


# manifests

def test_manifest_round_trip_is_bit_exact(tmp_path):
    entries = [sw.ManifestEntry(s, WORLD.digest(), "train", m) for s, m in [(1, "detection"), (2, "grounding")]]
    path = tmp_path / "m.jsonl"
    sw.write_manifest(path, entries)
    assert sw.read_manifest(path) == entries
    again = sw.regenerate(sw.read_manifest(path), WORLD)
    for e, smp in zip(entries, again):
        ref = sw.make_sample(e.seed, WORLD, e.mode)
        assert smp.image_tokens.tobytes() == ref.image_tokens.tobytes()
        assert smp.text == ref.text


def test_manifest_config_mismatch_rejected():
    with pytest.raises(sw.ConsistencyError):
        sw.regenerate([sw.ManifestEntry(1, "deadbeef", "train")], WORLD)
