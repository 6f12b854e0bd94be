import numpy as np
import pytest

from xmodal import corpus as C

GOLDEN_SEED0 = "c3008de05a482f83b795adf16116f7c75d8a9d57d72a998ce03e7d9a7abbe99b"


def test_vocabulary_layout():
    v = C.build_vocabulary()
    assert len(v) == 28
    assert v.tokens[:6] == list(C.ACTION_WORDS)
    assert v.tokens[-2:] == [C.BOS, C.EOS]
    for w in C.ACTION_WORDS + C.COLOR_WORDS + C.SPEED_WORDS:
        assert v.synonym(v.synonym(w)) == w
        assert v.meaning(w) == v.meaning(v.synonym(w))
    assert v.meaning("scarlet") == "red"
    assert v.meaning("unhurriedly") == "slow"
    with pytest.raises(C.EncodingError):
        v.index("jump")


def test_pattern_and_description_counts():
    assert len(C.action_labels()) == 12
    assert len(C.arrangements()) == 12
    assert len(C.enumerate_patterns()) == 144
    assert len(set(C.all_descriptions())) == 288


def test_descriptions_are_synonym_variants(corpus):
    s = corpus.samples[0]
    descs = s.descriptions
    assert len(descs) == 8 and len(set(descs)) == 8
    assert {C.semantics(d) for d in descs} == {s.semantics}


def test_corpus_sizes(corpus):
    assert len(corpus) == 864
    assert len(corpus.train_indices) == 648
    assert len(corpus.test_indices) == 216
    assert not set(corpus.train_indices) & set(corpus.test_indices)


def test_sequence_lengths_by_speed(corpus):
    for s in corpus.samples:
        assert s.seq_len == (50 if s.label.speed == "fast" else 100)
        assert s.joints.shape == (s.seq_len, 5)
        assert np.all(np.abs(s.joints) <= 1.0)


def test_test_split_covers_every_description_and_label(corpus):
    test = corpus.test
    assert {s.semantics for s in test} == {s.semantics for s in corpus.samples}
    assert {s.label for s in test} == set(C.action_labels())
    per_label = {}
    for s in test:
        per_label[s.label] = per_label.get(s.label, 0) + 1
    assert set(per_label.values()) == {18}


def test_every_pattern_keeps_training_variations(corpus):
    counts = {}
    for s in corpus.train:
        key = (s.label, s.scene.arrangement_id)
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 144
    assert min(counts.values()) >= 4


def test_generation_is_deterministic_and_seed_dependent(corpus):
    assert C.generate_corpus(0).checksum() == corpus.checksum()
    assert C.generate_corpus(1).checksum() != corpus.checksum()


def test_golden_checksum(corpus):
    assert corpus.checksum() == GOLDEN_SEED0


def test_variations_differ_within_pattern(corpus):
    group = [s for s in corpus.samples if s.label == corpus.samples[0].label
             and s.scene == corpus.samples[0].scene]
    assert len(group) == 6
    assert len({s.joints.tobytes() for s in group}) == 6


def test_min_jerk_profile():
    tau = np.linspace(0, 1, 101)
    s = C.min_jerk(tau)
    assert s[0] == 0.0 and s[-1] == pytest.approx(1.0)
    assert np.all(np.diff(s) >= 0)
    assert s[50] == pytest.approx(0.5)
    vel = np.gradient(s, tau)
    assert abs(vel[0]) < 1e-2 and abs(vel[-1]) < 1e-2


def test_trajectory_starts_at_rest_and_depends_on_label(corpus):
    by_type = {}
    for s in corpus.samples:
        np.testing.assert_allclose(s.joints[0], C.REST_POSTURE, atol=0.1)
        by_type.setdefault(s.label.action_type, s.joints[int(0.7 * s.seq_len)])
    ends = list(by_type.values())
    assert min(np.abs(a - b).max() for i, a in enumerate(ends) for b in ends[i + 1:]) > 0.05


def test_render_frame_shape_range_and_errors(corpus):
    s = corpus.samples[3]
    f = C.render_frame(s.scene, s.joints[0])
    assert f.shape == (48, 64, 3) and f.dtype == np.float32
    assert f.min() >= 0.0 and f.max() <= 1.0
    with pytest.raises(ValueError):
        C.render_frame(s.scene, np.full(5, 2.0))
    with pytest.raises(ValueError):
        C.render_frame(s.scene, np.zeros(4))


def test_frames_show_both_cube_colours(corpus):
    s = corpus.samples[0]
    f = s.frames([0])[0].reshape(-1, 3)
    for colour in (s.scene.left_color, s.scene.right_color):
        rgb = np.asarray(C.RGB[colour])
        assert np.min(np.abs(f - rgb).sum(axis=1)) < 1e-6


def test_selected_steps_match_full_render(corpus):
    s = corpus.samples[10]
    full = s.frames()
    np.testing.assert_array_equal(s.frames([0, 7, s.seq_len - 1]), full[[0, 7, s.seq_len - 1]])


def test_encode_language_layout():
    x = C.encode_language("describe")
    assert x.shape == (5, 28)
    assert not x[1:4].any()
    assert x[4, C.VOCAB.index(C.EOS)] == 1.0
    y = C.encode_language("execute", ("push", "red", "slowly"))
    assert C.decode_language(y) == ("execute", ("push", "red", "slowly"))
    assert np.all(y.sum(axis=1) == 1.0)
    with pytest.raises(C.EncodingError):
        C.encode_language("execute", ("push", "red"))
    with pytest.raises(C.EncodingError):
        C.encode_language("execute", ("push", "red", "describe"))


def test_save_load_round_trip(tmp_path, corpus):
    small = C.Corpus(corpus.seed, corpus.samples, corpus.train_indices, corpus.test_indices)
    C.save_corpus(small, tmp_path, frames=False)
    loaded = C.load_corpus(tmp_path)
    assert loaded.checksum() == corpus.checksum()
    np.testing.assert_array_equal(loaded.samples[5].joints, corpus.samples[5].joints)
    (tmp_path / "checksum").write_text("0" * 64)
    with pytest.raises(ValueError):
        C.load_corpus(tmp_path)


def test_stored_frames_are_memory_mapped(tmp_path, corpus):
    idx = [0, 1]
    sub = C.Corpus(corpus.seed, [corpus.samples[i] for i in idx], [0], [1])
    C.save_corpus(sub, tmp_path, frames=True)
    loaded = C.load_corpus(tmp_path)
    np.testing.assert_array_equal(loaded.samples[1].frames(), corpus.samples[1].frames())
