"""Paired autoencoder models: the crossmodal-transformer model and a GMU baseline.

Both expose the same surface: ``encode`` to the shared latent, and the two
decoders on top of it.  Parameters live in one flat ``name -> Tensor`` dict.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import decoders, fusion
from . import tensor as T
from .corpus import N_JOINTS, VOCAB


@dataclass
class ModelConfig:
    kind: str = "ptae"
    h_dim: int = 256
    heads: int = 4
    ff_dim: int | None = None
    f_visual: int = 24
    joint_dim: int = N_JOINTS
    residual_norm: bool = False
    dtype: str = "float64"

    def to_dict(self):
        return asdict(self)


PAPER_PTAE = dict(kind="ptae", h_dim=256)
PAPER_GMU = dict(kind="gmu", h_dim=50)


class _Paired:
    def __init__(self, config, seed):
        self.config = config
        dt = np.dtype(config.dtype)
        rngs = T.spawn_rngs(seed, ["fusion", "lang_dec", "act_dec"])
        self.params = {}
        self._build_encoder(rngs["fusion"], dt)
        h = config.h_dim
        n_act = config.f_visual + config.joint_dim
        self._add("lang_dec", decoders.init_decoder_params(h, h, len(VOCAB), len(VOCAB), rngs["lang_dec"], dt))
        self._add("act_dec", decoders.init_decoder_params(h, h, n_act, config.joint_dim, rngs["act_dec"], dt))

    def _add(self, prefix, params):
        for k, p in params.items():
            p.name = f"{prefix}.{k}"
            self.params[p.name] = p

    def group(self, prefix):
        n = len(prefix) + 1
        return {k[n:]: p for k, p in self.params.items() if k.startswith(prefix + ".")}

    def n_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def language_logits(self, h, prev_tokens):
        return decoders.language_logits(h, prev_tokens, self.group("lang_dec"))

    def describe(self, h):
        """Greedy word distributions (B, N-1, vocab)."""
        return decoders.decode_language(h, self.group("lang_dec"))

    def act(self, h, v_seq, j_first):
        return decoders.decode_action(h, v_seq, j_first, self.group("act_dec"))

    def state_dict(self):
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)


class PTAE(_Paired):
    """Language queries attend over embedded action steps; latent = mean over queries."""

    def _build_encoder(self, rng, dt):
        c = self.config
        self.fusion_config = fusion.FusionConfig(
            h_dim=c.h_dim, heads=c.heads, ff_dim=c.ff_dim, f_visual=c.f_visual,
            joint_dim=c.joint_dim, residual_norm=c.residual_norm)
        self._add("fusion", fusion.init_fusion_params(self.fusion_config, rng, dt))

    def encode(self, lang, v, j, key_mask=None):
        p = self.group("fusion")
        q = fusion.embed_language(lang, p)
        kv = fusion.embed_action(v, j, p)
        h_t = fusion.crossmodal_attend(q, kv, kv, p, self.config.heads, key_mask, self.config.residual_norm)
        return fusion.pool_latent(h_t)


class GMUBaseline(_Paired):
    """LSTM encoders, mean-pooled over time, fused by a gated multimodal unit."""

    def _build_encoder(self, rng, dt):
        c = self.config
        h = c.h_dim
        n_act = c.f_visual + c.joint_dim
        enc = {
            "W_lang": T.glorot_uniform(rng, (len(VOCAB) + h, 4 * h), len(VOCAB) + h, h, dtype=dt),
            "b_lang": np.zeros(4 * h, dt),
            "W_act": T.glorot_uniform(rng, (n_act + h, 4 * h), n_act + h, h, dtype=dt),
            "b_act": np.zeros(4 * h, dt),
        }
        self._add("encoder", {k: T.parameter(v) for k, v in enc.items()})
        self._add("gmu", fusion.init_gmu_params(h, h, h, rng, dt))

    def encode(self, lang, v, j, key_mask=None):
        p = self.group("encoder")
        lang = T.as_tensor(lang)
        n = lang.shape[0]
        zeros = np.zeros((n, self.config.h_dim), dtype=lang.dtype)
        lang_feat = T.mean(T.lstm_sequence(lang, zeros, zeros, p["W_lang"], p["b_lang"]), axis=1)
        seq = T.lstm_sequence(T.concat([T.as_tensor(v), T.as_tensor(j)], axis=-1), zeros, zeros,
                              p["W_act"], p["b_act"])
        if key_mask is None:
            act_feat = T.mean(seq, axis=1)
        else:
            w = np.asarray(key_mask, float)
            w = w / w.sum(axis=1, keepdims=True)
            act_feat = T.tsum(seq * w[:, :, None], axis=1)
        return fusion.gmu_fuse(lang_feat, act_feat, self.group("gmu"))


def build_model(config, seed=0):
    if config.kind == "ptae":
        return PTAE(config, seed)
    if config.kind == "gmu":
        return GMUBaseline(config, seed)
    raise ValueError(f"unknown model kind {config.kind!r}")
