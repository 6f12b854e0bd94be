"""Channel-separated convolutional autoencoder for per-frame visual features.

One small autoencoder is trained per RGB channel; the three bottleneck codes
are concatenated into the visual feature vector of a frame.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
import hashlib
import json
import struct

import numpy as np

from . import tensor as T

CHANNELS = ("R", "G", "B")
FEATURE_CACHE_VERSION = 1
_MAGIC = b"XMFEAT\x00\x00"


class TrainingFault(RuntimeError):
    pass


@dataclass
class CaeConfig:
    bottleneck: int = 8
    filters: tuple = (8, 16, 16)
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    frame_stride: int = 20
    seed: int = 0
    dtype: str = "float32"


class ChannelCAE:
    """Three stride-2 convolutions, a dense bottleneck and the mirrored decoder."""

    def __init__(self, channel, resolution, config, rng):
        if channel not in CHANNELS:
            raise ValueError(f"channel must be one of {CHANNELS}")
        self.channel = channel
        self.resolution = tuple(resolution)
        self.config = config
        h, w = resolution
        if h % 8 or w % 8:
            raise ValueError("frame height and width must be divisible by 8")
        dt = np.dtype(config.dtype)
        f = (1,) + tuple(config.filters)
        self.code_shape = (f[-1], h // 8, w // 8)
        flat = int(np.prod(self.code_shape))
        p = {}
        for i in range(3):
            fan = 16 * f[i], 16 * f[i + 1]
            p[f"enc{i}.w"] = T.glorot_uniform(rng, (f[i + 1], f[i], 4, 4), *fan, dtype=dt)
            p[f"enc{i}.b"] = np.zeros(f[i + 1], dt)
            p[f"dec{i}.w"] = T.glorot_uniform(rng, (f[3 - i], f[2 - i], 4, 4), *fan[::-1], dtype=dt)
            p[f"dec{i}.b"] = np.zeros(f[2 - i], dt)
        p["bottleneck.w"] = T.glorot_uniform(rng, (flat, config.bottleneck), dtype=dt)
        p["bottleneck.b"] = np.zeros(config.bottleneck, dt)
        p["expand.w"] = T.glorot_uniform(rng, (config.bottleneck, flat), dtype=dt)
        p["expand.b"] = np.zeros(flat, dt)
        self.params = {k: T.parameter(v, name=k) for k, v in p.items()}

    def encode(self, x):
        p = self.params
        for i in range(3):
            x = T.relu(T.conv2d(x, p[f"enc{i}.w"], p[f"enc{i}.b"]))
        x = T.reshape(x, (x.shape[0], -1))
        return T.linear(x, p["bottleneck.w"], p["bottleneck.b"])

    def decode(self, z):
        p = self.params
        x = T.relu(T.linear(z, p["expand.w"], p["expand.b"]))
        x = T.reshape(x, (x.shape[0],) + self.code_shape)
        for i in range(3):
            x = T.conv_transpose2d(x, p[f"dec{i}.w"], p[f"dec{i}.b"])
            x = T.relu(x) if i < 2 else T.sigmoid(x)
        return x

    def _input(self, frames):
        frames = np.asarray(frames)
        if frames.shape[-3:-1] != self.resolution:
            raise ValueError(f"frames are {frames.shape[-3:-1]}, encoder was trained on {self.resolution}")
        ch = CHANNELS.index(self.channel)
        return frames[..., ch][:, None].astype(self.config.dtype)

    def features(self, frames):
        """Bottleneck codes (n, bottleneck) for RGB frames (n, H, W, 3)."""
        return self.encode(T.Tensor(self._input(frames))).data

    def reconstruct(self, frames):
        """Decoded channel (n, H, W) clamped to [0, 1]."""
        out = self.decode(self.encode(T.Tensor(self._input(frames)))).data[:, 0]
        return np.clip(out, 0.0, 1.0)

    def state(self):
        return {k: v.data for k, v in self.params.items()}


def train_cae(frames, channel, config=None, resolution=None):
    """Fit one channel's autoencoder on ``frames`` (n, H, W, 3) with Adam on MSE.

    Returns ``(model, loss_history)``; raises :class:`TrainingFault` if the
    loss becomes non-finite.
    """
    config = config or CaeConfig()
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise ValueError("no frames to train on")
    resolution = resolution or frames.shape[1:3]
    seed_seq = np.random.SeedSequence([config.seed, CHANNELS.index(channel)])
    init_rng, order_rng = (np.random.default_rng(s) for s in seed_seq.spawn(2))
    model = ChannelCAE(channel, resolution, config, init_rng)
    opt = T.Adam(model.params, lr=config.lr)
    data = model._input(frames)
    history = []
    for epoch in range(config.epochs):
        perm = order_rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(data), config.batch_size):
            batch = T.Tensor(data[perm[start:start + config.batch_size]])
            recon = model.decode(model.encode(batch))
            loss = T.mean((recon - batch) ** 2)
            if not np.isfinite(loss.data):
                raise TrainingFault(f"CAE {channel} loss diverged in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(batch.data)
        history.append(total / len(data))
    return model, history


class VisualEncoder:
    """The three per-channel autoencoders plus feature standardisation stats."""

    def __init__(self, models, mean=None, std=None):
        self.models = {m.channel: m for m in models}
        self.mean = mean
        self.std = std

    @property
    def feature_dim(self):
        return sum(m.config.bottleneck for m in self.models.values())

    def raw_features(self, frames, batch=256):
        frames = np.asarray(frames)
        out = []
        for start in range(0, len(frames), batch):
            chunk = frames[start:start + batch]
            out.append(np.concatenate([self.models[c].features(chunk) for c in CHANNELS], axis=1))
        return np.concatenate(out).astype(np.float64)

    def fit_standardization(self, feature_rows):
        rows = np.concatenate(feature_rows)
        self.mean = rows.mean(axis=0)
        self.std = rows.std(axis=0) + 1e-6

    def standardize(self, feats):
        if self.mean is None:
            return feats
        return (feats - self.mean) / self.std


def extract_features(frame, encoder):
    """Concatenated per-channel code for a single frame (H, W, 3) -> (F,)."""
    return encoder.raw_features(np.asarray(frame)[None])[0]


def reconstruct(frame, encoder):
    """Rebuild a frame channel by channel; returns ``(frame', mse)``."""
    frame = np.asarray(frame)
    out = np.stack([encoder.models[c].reconstruct(frame[None])[0] for c in CHANNELS], axis=-1)
    return out, float(np.mean((out - frame) ** 2))


def training_frames(samples, stride=20):
    """Every ``stride``-th frame (always including the last) of each sample."""
    chunks = []
    for s in samples:
        m = s.seq_len
        chunks.append(s.frames(sorted(set(range(0, m, stride)) | {m - 1})))
    return np.concatenate(chunks)


def train_visual_encoder(corpus, config=None):
    """Train all three channels on training-split frames; returns (encoder, histories)."""
    config = config or CaeConfig()
    frames = training_frames(corpus.train, config.frame_stride)
    models, histories = [], {}
    for ch in CHANNELS:
        model, hist = train_cae(frames, ch, config, corpus.resolution)
        models.append(model)
        histories[ch] = hist
    return VisualEncoder(models), histories


def corpus_features(corpus, encoder):
    """Raw (unstandardised) features for every sample, in corpus order."""
    return [encoder.raw_features(s.frames()) for s in corpus.samples]


# ---------------------------------------------------------------- persistence

def encoder_state(encoder):
    state = {}
    for c, m in encoder.models.items():
        for k, v in m.state().items():
            state[f"{c}.{k}"] = v
    cfg = asdict(next(iter(encoder.models.values())).config)
    return state, cfg


def encoder_from_state(state, cfg, resolution):
    cfg = dict(cfg)
    cfg["filters"] = tuple(cfg["filters"])
    config = CaeConfig(**cfg)
    models = []
    for c in CHANNELS:
        m = ChannelCAE(c, resolution, config, np.random.default_rng(0))
        for k, p in m.params.items():
            p.data = np.asarray(state[f"{c}.{k}"], dtype=config.dtype).copy()
        models.append(m)
    return VisualEncoder(models)


def save_feature_cache(path, features, corpus_checksum):
    """Header (magic, version, F, rows, samples, corpus checksum), lengths, float32 rows."""
    feature_dim = features[0].shape[1]
    lengths = np.array([len(f) for f in features], dtype="<u4")
    rows = np.ascontiguousarray(np.concatenate(features), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIII", FEATURE_CACHE_VERSION, feature_dim, len(rows), len(features)))
        fh.write(corpus_checksum.encode("ascii").ljust(64, b"\0"))
        fh.write(lengths.tobytes())
        fh.write(rows.tobytes())
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def load_feature_cache(path, corpus_checksum=None):
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a feature cache")
        version, feature_dim, n_rows, n_samples = struct.unpack("<IIII", fh.read(16))
        if version != FEATURE_CACHE_VERSION:
            raise ValueError(f"feature cache version {version} unsupported")
        key = fh.read(64).rstrip(b"\0").decode("ascii")
        if corpus_checksum is not None and key != corpus_checksum:
            raise ValueError("feature cache was built for a different corpus")
        lengths = np.frombuffer(fh.read(4 * n_samples), dtype="<u4")
        rows = np.frombuffer(fh.read(4 * feature_dim * n_rows), dtype="<f4").reshape(n_rows, feature_dim)
    splits = np.cumsum(lengths)[:-1]
    return [r.astype(np.float64) for r in np.split(rows, splits)], key


def save_encoder(path, encoder, resolution):
    state, cfg = encoder_state(encoder)
    meta = json.dumps({"config": cfg, "resolution": list(resolution)}, sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **state)


def load_encoder(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        state = {k: data[k] for k in data.files if k != "__meta__"}
    return encoder_from_state(state, meta["config"], tuple(meta["resolution"]))
