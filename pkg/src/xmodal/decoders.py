"""Autoregressive LSTM decoders for words and joint values.

Both decoders start from one affine map of the shared latent that yields the
initial hidden and cell state.  The language decoder emits a softmax over the
vocabulary per step; the action decoder emits tanh joint values and feeds
them back, while visual features are always the ground-truth sequence.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .corpus import BOS, LANG_LEN, VOCAB


def init_decoder_params(h_dim, hidden, n_in, n_out, rng, dtype=np.float64):
    p = {
        "W_dec": T.glorot_uniform(rng, (h_dim, 2 * hidden), dtype=dtype),
        "b_dec": np.zeros(2 * hidden, dtype),
        "W_lstm": T.glorot_uniform(rng, (n_in + hidden, 4 * hidden), n_in + hidden, hidden, dtype=dtype),
        "b_lstm": np.zeros(4 * hidden, dtype),
        "W_out": T.glorot_uniform(rng, (hidden, n_out), dtype=dtype),
        "b_out": np.zeros(n_out, dtype),
    }
    return {k: T.parameter(v, name=k) for k, v in p.items()}


def init_decoder_state(h, params):
    """(h_0, c_0) as the two halves of ``h W_dec + b_dec``."""
    z = T.linear(h, params["W_dec"], params["b_dec"])
    hidden = z.shape[-1] // 2
    return z[..., :hidden], z[..., hidden:]


def language_logits(h, prev_tokens, params):
    """Teacher-forced logits (B, N-1, vocab); ``prev_tokens`` is (B, N-1, vocab) one-hot."""
    h0, c0 = init_decoder_state(h, params)
    hs = T.lstm_sequence(prev_tokens, h0, c0, params["W_lstm"], params["b_lstm"])
    return T.linear(hs, params["W_out"], params["b_out"])


def teacher_inputs(target_ids):
    """One-hot decoder inputs ``[BOS, w_1, .., w_{N-2}]`` for targets (B, N-1)."""
    target_ids = np.asarray(target_ids)
    prev = np.concatenate([np.full((len(target_ids), 1), VOCAB.index(BOS)), target_ids[:, :-1]], axis=1)
    return np.eye(len(VOCAB))[prev]


def decode_language(h, params, targets=None, steps=LANG_LEN - 1):
    """Word distributions (B, steps, vocab).

    With ``targets`` (B, steps) token ids the previous ground-truth word is fed
    at each step; otherwise the argmax of the previous step is fed back.
    """
    h = T.as_tensor(h)
    if targets is not None:
        return T.softmax(language_logits(h, teacher_inputs(targets), params), axis=-1).data
    h0, c0 = init_decoder_state(h, params)
    hid, cell = h0.data, c0.data
    w, b = params["W_lstm"].data, params["b_lstm"].data
    wo, bo = params["W_out"].data, params["b_out"].data
    n_vocab = wo.shape[1]
    x = np.zeros((hid.shape[0], n_vocab))
    x[:, VOCAB.index(BOS)] = 1.0
    out = np.empty((hid.shape[0], steps, n_vocab))
    for t in range(steps):
        hid, cell, _ = T._lstm_cell(np.concatenate([x, hid], axis=1) @ w + b, cell)
        logits = hid @ wo + bo
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        out[:, t] = e / e.sum(axis=1, keepdims=True)
        x = np.eye(n_vocab)[out[:, t].argmax(axis=1)]
    return out


def decode_action(h, v_seq, j_first, params):
    """Predicted joints (B, M-1, joints) for steps 2..M.

    ``v_seq`` (B, M, F) is the ground-truth visual feature sequence; step t
    consumes ``[v_t; j_hat_t]`` with ``j_hat_1 = j_first``.
    """
    h0, c0 = init_decoder_state(T.as_tensor(h), params)
    v_seq = np.asarray(v_seq)
    return T.lstm_rollout(v_seq[:, :-1], j_first, h0, c0, params["W_lstm"], params["b_lstm"],
                          params["W_out"], params["b_out"])
