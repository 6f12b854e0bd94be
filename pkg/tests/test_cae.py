import numpy as np
import pytest

from xmodal import cae
from xmodal.corpus import generate_corpus


@pytest.fixture(scope="module")
def small_frames():
    c = generate_corpus(0, resolution=(16, 16))
    return np.concatenate([s.frames([0, s.seq_len - 1]) for s in c.samples[::40]])


def test_channel_cae_shapes():
    cfg = cae.CaeConfig(bottleneck=3, filters=(2, 4, 4))
    m = cae.ChannelCAE("G", (16, 24), cfg, np.random.default_rng(0))
    frames = np.random.default_rng(1).random((5, 16, 24, 3)).astype(np.float32)
    assert m.features(frames).shape == (5, 3)
    rec = m.reconstruct(frames)
    assert rec.shape == (5, 16, 24) and rec.min() >= 0 and rec.max() <= 1
    with pytest.raises(ValueError):
        m.features(np.zeros((1, 8, 8, 3)))
    with pytest.raises(ValueError):
        cae.ChannelCAE("X", (16, 16), cfg, np.random.default_rng(0))
    with pytest.raises(ValueError):
        cae.ChannelCAE("R", (12, 16), cfg, np.random.default_rng(0))


def test_training_reduces_reconstruction_error(small_frames):
    cfg = cae.CaeConfig(bottleneck=4, filters=(4, 8, 8), epochs=25, batch_size=8, lr=3e-3)
    model, hist = cae.train_cae(small_frames, "R", cfg)
    assert hist[-1] < 0.5 * hist[0]
    model2, hist2 = cae.train_cae(small_frames, "R", cfg)
    assert hist == hist2


def test_encoder_features_and_reconstruction(small_frames):
    cfg = cae.CaeConfig(bottleneck=2, filters=(2, 4, 4), epochs=1, batch_size=16)
    models = [cae.train_cae(small_frames, c, cfg)[0] for c in cae.CHANNELS]
    enc = cae.VisualEncoder(models)
    assert enc.feature_dim == 6
    f = cae.extract_features(small_frames[0], enc)
    assert f.shape == (6,)
    frame, mse = cae.reconstruct(small_frames[0], enc)
    assert frame.shape == small_frames[0].shape and mse >= 0
    identical = cae.extract_features(small_frames[0], enc)
    np.testing.assert_array_equal(f, identical)


def test_encoder_persistence(tmp_path, small_frames):
    cfg = cae.CaeConfig(bottleneck=2, filters=(2, 4, 4), epochs=1)
    enc = cae.VisualEncoder([cae.train_cae(small_frames, c, cfg)[0] for c in cae.CHANNELS])
    cae.save_encoder(tmp_path / "e.npz", enc, (16, 16))
    back = cae.load_encoder(tmp_path / "e.npz")
    np.testing.assert_array_equal(back.raw_features(small_frames), enc.raw_features(small_frames))


def test_feature_cache_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    feats = [rng.normal(size=(n, 4)) for n in (3, 5, 2)]
    digest = cae.save_feature_cache(tmp_path / "f.bin", feats, "abc")
    assert len(digest) == 64
    back, key = cae.load_feature_cache(tmp_path / "f.bin", "abc")
    assert key == "abc"
    for a, b in zip(feats, back):
        np.testing.assert_array_equal(a.astype(np.float32), b)
    with pytest.raises(ValueError, match="different corpus"):
        cae.load_feature_cache(tmp_path / "f.bin", "other")
    (tmp_path / "g.bin").write_bytes(b"nonsense-file")
    with pytest.raises(ValueError):
        cae.load_feature_cache(tmp_path / "g.bin")


def test_training_frames_include_last_step():
    c = generate_corpus(0, resolution=(16, 16))
    frames = cae.training_frames(c.samples[:2], stride=20)
    # 50-step fast or 100-step slow: steps 0,20,..., plus the final one
    expected = sum(len(set(range(0, s.seq_len, 20)) | {s.seq_len - 1}) for s in c.samples[:2])
    assert len(frames) == expected
