"""Crossmodal transformer bottleneck and the gated multimodal unit baseline.

Language tokens are embedded and used as queries; concatenated visual
features and joint values are embedded once and used as both keys and
values.  The attended sequence goes through a position-wise feedforward
layer and is average-pooled over the query steps into the shared latent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import LANG_LEN, N_JOINTS, VOCAB


class ConfigError(ValueError):
    pass


@dataclass
class FusionConfig:
    h_dim: int = 256
    heads: int = 4
    layers: int = 1
    ff_dim: int | None = None
    f_visual: int = 24
    joint_dim: int = N_JOINTS
    lang_len: int = LANG_LEN
    vocab_size: int = len(VOCAB)
    max_action_len: int = 100
    residual_norm: bool = False

    def __post_init__(self):
        if self.ff_dim is None:
            self.ff_dim = 2 * self.h_dim
        if self.h_dim % self.heads:
            raise ConfigError(f"h_dim {self.h_dim} is not divisible by {self.heads} heads")
        if self.layers != 1:
            raise ConfigError("only a single crossmodal layer is supported")


def positional_encoding(n, d):
    """Fixed sinusoid table: sin on even, cos on odd feature indices."""
    pos = np.arange(n)[:, None]
    rate = 1.0 / np.power(10000.0, (2 * (np.arange(d) // 2)) / d)
    pe = pos * rate[None, :]
    pe[:, 0::2] = np.sin(pe[:, 0::2])
    pe[:, 1::2] = np.cos(pe[:, 1::2])
    return pe


def _dense(rng, n_in, n_out, dtype):
    return T.glorot_uniform(rng, (n_in, n_out), dtype=dtype), np.zeros(n_out, dtype)


def init_fusion_params(cfg, rng, dtype=np.float64):
    p = {}
    h = cfg.h_dim
    layers = {
        "token": (cfg.vocab_size, h),
        "act": (cfg.f_visual + cfg.joint_dim, h),
        "q": (h, h), "k": (h, h), "v": (h, h), "o": (h, h),
        "ff1": (h, cfg.ff_dim), "ff2": (cfg.ff_dim, h),
    }
    for name, (n_in, n_out) in layers.items():
        p[f"W_{name}"], p[f"b_{name}"] = _dense(rng, n_in, n_out, dtype)
    if cfg.residual_norm:
        for k in ("ln1", "ln2"):
            p[f"{k}_gain"] = np.ones(h, dtype)
            p[f"{k}_bias"] = np.zeros(h, dtype)
    return {k: T.parameter(v, name=k) for k, v in p.items()}


def embed_language(tokens, params):
    """Q = relu(x W_token + b_token) + PE, for one-hot tokens (..., N, vocab)."""
    tokens = T.as_tensor(tokens)
    if tokens.shape[-1] != params["W_token"].shape[0]:
        raise T.DimensionError(f"token vectors must have {params['W_token'].shape[0]} entries")
    q = T.relu(T.linear(tokens, params["W_token"], params["b_token"]))
    pe = positional_encoding(tokens.shape[-2], q.shape[-1]).astype(q.dtype)
    return q + pe


def embed_action(v, j, params):
    """K = V = relu([v; j] W_act + b_act); no positional encoding."""
    v, j = T.as_tensor(v), T.as_tensor(j)
    if v.shape[:-1] != j.shape[:-1]:
        raise T.DimensionError(f"visual {v.shape} and joint {j.shape} sequences differ in length")
    return T.relu(T.linear(T.concat([v, j], axis=-1), params["W_act"], params["b_act"]))


def _layer_norm(x, gain, bias, eps=1e-5):
    mu = T.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = T.mean(xc * xc, axis=-1, keepdims=True)
    return xc / T.power(var + eps, 0.5) * gain + bias


def multi_head_attention(q_in, k_in, v_in, params, heads, key_mask=None, return_weights=False):
    """Scaled dot-product attention with per-head projections.

    ``q_in``: (B, N, H); ``k_in``, ``v_in``: (B, M, H); ``key_mask``: (B, M)
    bool with True for valid steps.  Masked keys get -inf logits.
    """
    n_batch, n_q, h = q_in.shape
    n_k = k_in.shape[1]
    dh = h // heads

    def split(x, n):
        return T.transpose(T.reshape(x, (n_batch, n, heads, dh)), (0, 2, 1, 3))

    q = split(T.linear(q_in, params["W_q"], params["b_q"]), n_q)
    k = split(T.linear(k_in, params["W_k"], params["b_k"]), n_k)
    v = split(T.linear(v_in, params["W_v"], params["b_v"]), n_k)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if key_mask is not None:
        scores = T.masked_fill(scores, ~np.asarray(key_mask, bool)[:, None, None, :], -np.inf)
    weights = T.softmax(scores, axis=-1)
    att = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (n_batch, n_q, h))
    out = T.linear(att, params["W_o"], params["b_o"])
    return (out, weights.data) if return_weights else out


def pwff(x, params):
    return T.linear(T.relu(T.linear(x, params["W_ff1"], params["b_ff1"])), params["W_ff2"], params["b_ff2"])


def crossmodal_attend(q, k, v, params, heads=4, key_mask=None, residual_norm=False):
    """h_t = PWFF(MHA(Q, K, V)) for every query step; accepts unbatched (N, H) input."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    unbatched = q.ndim == 2
    if unbatched:
        q, k, v = (T.reshape(t, (1,) + t.shape) for t in (q, k, v))
        key_mask = None if key_mask is None else np.asarray(key_mask)[None]
    if q.shape[-1] % heads:
        raise ConfigError(f"h_dim {q.shape[-1]} is not divisible by {heads} heads")
    a = multi_head_attention(q, k, v, params, heads, key_mask)
    if residual_norm:
        a = _layer_norm(a + q, params["ln1_gain"], params["ln1_bias"])
        h_t = _layer_norm(a + pwff(a, params), params["ln2_gain"], params["ln2_bias"])
    else:
        h_t = pwff(a, params)
    return T.reshape(h_t, h_t.shape[1:]) if unbatched else h_t


def pool_latent(h_t):
    """Average over the query (time) axis."""
    h_t = T.as_tensor(h_t)
    return T.mean(h_t, axis=-2)


# ---------------------------------------------------------------- GMU baseline

def init_gmu_params(lang_dim, act_dim, h_dim, rng, dtype=np.float64):
    p = {
        "W_l": T.glorot_uniform(rng, (lang_dim, h_dim), dtype=dtype),
        "W_a": T.glorot_uniform(rng, (act_dim, h_dim), dtype=dtype),
        "W_z": T.glorot_uniform(rng, (lang_dim + act_dim, h_dim), dtype=dtype),
        "b_z": np.zeros(h_dim, dtype),
    }
    return {k: T.parameter(v, name=k) for k, v in p.items()}


def gmu_fuse(lang_feat, act_feat, params):
    """h = z * tanh(lang W_l) + (1 - z) * tanh(act W_a), z = sigmoid([lang; act] W_z + b_z)."""
    lang_feat, act_feat = T.as_tensor(lang_feat), T.as_tensor(act_feat)
    hl = T.tanh(T.matmul(lang_feat, params["W_l"]))
    ha = T.tanh(T.matmul(act_feat, params["W_a"]))
    z = T.sigmoid(T.linear(T.concat([lang_feat, act_feat], axis=-1), params["W_z"], params["b_z"]))
    return z * hl + (1.0 - z) * ha
