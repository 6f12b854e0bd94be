"""Batch assembly, losses, supervision schedules, the training loop and checkpoints."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
import csv
import hashlib
import io
import json
import math
import struct

import numpy as np

from . import tensor as T
from .corpus import SIGNALS, encode_language, sentence_targets, action_labels, VOCAB
from .decoders import teacher_inputs
from .model import ModelConfig, build_model

CROSSMODAL = ("describe", "execute")
UNIMODAL = ("repeat_action", "repeat_language")
LANGUAGE_OUTPUT = ("describe", "repeat_language")
ACTION_OUTPUT = ("execute", "repeat_action")
REGULAR_CROSSMODAL_FRACTION = 2.0 / 3.0
N_TRAIN = 648

CHECKPOINT_VERSION = 1
_CKPT_MAGIC = b"XMCKPT\x00\x00"


class ConfigError(ValueError):
    pass


class TrainingFault(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 6
    epochs: int = 2500
    alpha: float = 1.0
    beta: float = 1.0
    regime: str = "iterations"
    fraction: float = REGULAR_CROSSMODAL_FRACTION
    seed: int = 0
    loss_mode: str = "signal"
    eval_every_epochs: int = 50
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError(f"fraction must lie in [0, 1], got {self.fraction}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be positive")
        if self.regime not in ("iterations", "samples"):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.loss_mode not in ("signal", "joint"):
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}")

    @property
    def iterations_per_epoch(self):
        return N_TRAIN // self.batch_size

    @property
    def total_iterations(self):
        return self.epochs * self.iterations_per_epoch

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "paper": dict(lr=1e-5, epochs=2500, model=dict(h_dim=256)),
    "desk": dict(lr=1e-3, epochs=300, model=dict(h_dim=64)),
}


def preset_config(preset="desk", kind="ptae", **overrides):
    """TrainConfig for a named preset; the GMU baseline keeps its 50-d latent."""
    base = {k: (dict(v) if isinstance(v, dict) else v) for k, v in PRESETS[preset].items()}
    model = dict(base.pop("model"), kind=kind)
    if kind == "gmu":
        model["h_dim"] = 50
    model.update(overrides.pop("model", {}))
    base.update(overrides)
    return TrainConfig(model=ModelConfig(**model), **base)


# ---------------------------------------------------------------- data

@dataclass
class Dataset:
    """Corpus plus standardised visual features and the joint normalisation range."""
    corpus: object
    features: list
    feature_mean: np.ndarray
    feature_std: np.ndarray
    joint_range: float

    @classmethod
    def build(cls, corpus, raw_features, feature_mean=None, feature_std=None, joint_range=None):
        if len(raw_features) != len(corpus.samples):
            raise ValueError("one feature sequence per corpus sample is required")
        if feature_mean is None:
            rows = np.concatenate([raw_features[i] for i in corpus.train_indices])
            feature_mean, feature_std = rows.mean(axis=0), rows.std(axis=0) + 1e-6
        if joint_range is None:
            joints = np.concatenate([corpus.samples[i].joints for i in corpus.train_indices])
            joint_range = float(joints.max() - joints.min())
        feats = [(f - feature_mean) / feature_std for f in raw_features]
        return cls(corpus, feats, np.asarray(feature_mean), np.asarray(feature_std), joint_range)

    @property
    def feature_dim(self):
        return self.features[0].shape[1]

    def sample(self, i):
        return self.corpus.samples[i]


@dataclass
class Batch:
    signal: str
    indices: list
    lang: np.ndarray
    v: np.ndarray
    j: np.ndarray
    dec_v: np.ndarray
    j_first: np.ndarray
    descriptions: list
    word_targets: np.ndarray | None = None
    joint_targets: np.ndarray | None = None
    key_mask: np.ndarray | None = None


def paired_description(sample):
    """Deterministic choice among the 8 synonym variants (used at evaluation)."""
    return sample.descriptions[sample.variation_seed % 8]


def assemble_batch(dataset, indices, signal, rng=None, descriptions=None, loss_mode="signal"):
    """Model inputs and loss targets for one uniform-signal batch.

    Descriptions default to a uniformly drawn synonym variant per sample.
    """
    if signal not in SIGNALS:
        raise ValueError(f"unknown task signal {signal!r}")
    if len(indices) == 0:
        raise ValueError("empty batch")
    samples = [dataset.sample(i) for i in indices]
    lengths = {s.seq_len for s in samples}
    if len(lengths) != 1:
        raise ValueError("a batch must contain sequences of one length")
    if descriptions is None:
        rng = rng or np.random.default_rng(0)
        descriptions = [s.descriptions[rng.integers(8)] for s in samples]
    if len(descriptions) != len(samples):
        raise ValueError("one description per sample is required")
    takes_words = signal in ("execute", "repeat_language")
    lang = np.stack([encode_language(signal, d if takes_words else None) for d in descriptions])
    v = np.stack([dataset.features[i] for i in indices])
    j = np.stack([s.joints for s in samples])
    batch = Batch(signal, list(indices), lang, v, j, v, j[:, 0].copy(), list(descriptions))
    if signal in LANGUAGE_OUTPUT or loss_mode == "joint":
        batch.word_targets = np.stack([sentence_targets(d) for d in descriptions])
    if signal in ACTION_OUTPUT or loss_mode == "joint":
        batch.joint_targets = j[:, 1:].copy()
    return batch


# ---------------------------------------------------------------- losses

def _pick(x, ids):
    """Entries x[b, t, ids[b, t]] as a flat tensor."""
    n, steps = ids.shape
    rows = np.repeat(np.arange(n), steps)
    cols = np.tile(np.arange(steps), n)
    return T.getitem(T.as_tensor(x), (rows, cols, ids.reshape(-1)))


def compute_loss(outputs, targets, signal, alpha=1.0, beta=1.0, loss_mode="signal"):
    """alpha * L_lang + beta * L_act with per-signal masking.

    ``outputs`` may hold ``word_logits`` or ``words`` (distributions, B x (N-1)
    x vocab) and ``joints`` (B x (M-1) x 5); ``targets`` holds ``words`` (token
    ids) and ``joints``.  Returns ``(loss, parts)``.
    """
    use_lang = signal in LANGUAGE_OUTPUT or loss_mode == "joint"
    use_act = signal in ACTION_OUTPUT or loss_mode == "joint"
    total = T.Tensor(0.0)
    parts = {"lang": 0.0, "act": 0.0}
    if use_lang:
        ids = np.asarray(targets["words"])
        if "word_logits" in outputs:
            logp = _pick(T.log_softmax(outputs["word_logits"], axis=-1), ids)
        else:
            logp = T.log(_pick(outputs["words"], ids))
        l_lang = T.mean(logp) * -1.0
        parts["lang"] = float(l_lang.data)
        total = total + l_lang * alpha
    if use_act:
        pred = T.as_tensor(outputs["joints"])
        diff = pred - np.asarray(targets["joints"])
        n, steps = pred.shape[:2]
        l_act = T.tsum(diff * diff) * (1.0 / (n * steps))
        parts["act"] = float(l_act.data)
        total = total + l_act * beta
    return total, parts


def forward_loss(model, batch, alpha=1.0, beta=1.0, loss_mode="signal"):
    h = model.encode(batch.lang, batch.v, batch.j, batch.key_mask)
    outputs, targets = {}, {}
    if batch.word_targets is not None:
        outputs["word_logits"] = model.language_logits(h, teacher_inputs(batch.word_targets))
        targets["words"] = batch.word_targets
    if batch.joint_targets is not None:
        outputs["joints"] = model.act(h, batch.dec_v, batch.j_first)
        targets["joints"] = batch.joint_targets
    return compute_loss(outputs, targets, batch.signal, alpha, beta, loss_mode)


# ---------------------------------------------------------------- supervision schedules

def supervised_subset_size(fraction, n_train=N_TRAIN):
    if fraction * n_train < 1:
        raise ConfigError(f"fraction {fraction} leaves no supervised training sample")
    return int(math.ceil(fraction * n_train - 1e-9))


def supervised_subset(corpus, fraction, rng):
    """Fixed crossmodal subset, round-robin over the 12 action labels in shuffled order."""
    n = supervised_subset_size(fraction, len(corpus.train_indices))
    by_label = {lab: [] for lab in action_labels()}
    for i in corpus.train_indices:
        by_label[corpus.samples[i].label].append(i)
    labels = list(by_label)
    order = rng.permutation(len(labels))
    pools = [list(rng.permutation(by_label[labels[k]])) for k in order]
    chosen = []
    while len(chosen) < n:
        for pool in pools:
            if pool and len(chosen) < n:
                chosen.append(int(pool.pop()))
    return sorted(chosen)


class SignalSchedule:
    """Draws the task signal and the eligible sample pool for each iteration.

    ``iterations``: crossmodal with probability ``fraction`` over the whole
    training set.  ``samples``: the regular 2/3 crossmodal rate, but
    crossmodal batches only come from a fixed supervised subset.
    """

    def __init__(self, regime, fraction, corpus, rng):
        self.regime = regime
        self.train = list(corpus.train_indices)
        if regime == "iterations":
            self.p_cross = fraction
            self.supervised = self.train
        elif regime == "samples":
            self.p_cross = REGULAR_CROSSMODAL_FRACTION
            self.supervised = supervised_subset(corpus, fraction, rng)
        else:
            raise ConfigError(f"unknown regime {regime!r}")
        self.seen_crossmodal = set()

    def draw(self, rng):
        if rng.random() < self.p_cross:
            return CROSSMODAL[rng.integers(2)], self.supervised
        return UNIMODAL[rng.integers(2)], self.train


def schedule_signal(iteration, schedule, rng):
    """Functional wrapper around :meth:`SignalSchedule.draw` (``iteration`` is unused)."""
    return schedule.draw(rng)


def draw_batch(pool, corpus, batch_size, rng):
    """Random anchor from ``pool``, filled with other pool members of the same length."""
    anchor = pool[rng.integers(len(pool))]
    m = corpus.samples[anchor].seq_len
    same = [i for i in pool if corpus.samples[i].seq_len == m and i != anchor]
    k = min(batch_size - 1, len(same))
    rest = rng.choice(same, size=k, replace=False).tolist() if k else []
    return [int(anchor)] + [int(i) for i in rest]


# ---------------------------------------------------------------- training

@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    params: dict
    feature_mean: np.ndarray
    feature_std: np.ndarray
    joint_range: float
    rng_state: dict
    iteration: int
    loss_history: np.ndarray
    adam: dict = field(default_factory=dict)
    adam_step: int = 0
    extra: dict = field(default_factory=dict)

    def restore_model(self):
        model = build_model(ModelConfig(**self.model_config))
        model.load_state_dict(self.params)
        return model


@dataclass
class TrainResult:
    model: object
    checkpoint: Checkpoint
    log_rows: list
    supervised: list
    seen_crossmodal: set


LOG_COLUMNS = ("iteration", "signal", "loss", "describe_accuracy", "execute_nrmse")


def _fmt(x):
    return "" if x is None else repr(float(x))


def metric_log_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["iteration"], r["signal"], _fmt(r["loss"]),
                    _fmt(r.get("describe_accuracy")), _fmt(r.get("execute_nrmse"))])
    return buf.getvalue()


def _rng_names():
    return ["schedule", "batch", "words", "subset"]


def train(config, dataset, eval_indices=None, log_path=None, checkpoint_path=None, progress=None,
          max_iterations=None):
    """Train one model end to end; deterministic given ``config.seed``.

    Returns a :class:`TrainResult`.  A non-finite loss aborts with
    :class:`TrainingFault`; if ``checkpoint_path`` is set the last good
    checkpoint (from the previous evaluation point) stays on disk.
    """
    from .evaluation import evaluate

    mcfg = ModelConfig(**{**config.model.to_dict(), "f_visual": dataset.feature_dim})
    model = build_model(mcfg, config.seed)
    opt = T.Adam(model.params, lr=config.lr)
    rngs = T.spawn_rngs(config.seed, _rng_names())
    schedule = SignalSchedule(config.regime, config.fraction, dataset.corpus, rngs["subset"])
    eval_indices = dataset.corpus.test_indices if eval_indices is None else eval_indices
    total = config.total_iterations if max_iterations is None else max_iterations
    eval_every = config.eval_every_epochs * config.iterations_per_epoch
    rows, losses = [], []
    log_fh = open(log_path, "w") if log_path else None
    if log_fh:
        log_fh.write(metric_log_csv([]))

    def snapshot(iteration):
        return make_checkpoint(model, config, dataset, rngs, iteration, losses, opt)

    try:
        for it in range(1, total + 1):
            signal, pool = schedule.draw(rngs["schedule"])
            idx = draw_batch(pool, dataset.corpus, config.batch_size, rngs["batch"])
            if signal in CROSSMODAL:
                schedule.seen_crossmodal.update(idx)
            batch = assemble_batch(dataset, idx, signal, rngs["words"], loss_mode=config.loss_mode)
            loss, _ = forward_loss(model, batch, config.alpha, config.beta, config.loss_mode)
            if not np.isfinite(loss.data):
                raise TrainingFault(f"non-finite loss at iteration {it}")
            opt.zero_grad()
            loss.backward()
            try:
                opt.step()
            except T.NumericFault as exc:
                raise TrainingFault(f"iteration {it}: {exc}") from exc
            losses.append(float(loss.data))
            row = {"iteration": it, "signal": signal, "loss": float(loss.data)}
            if (eval_every and it % eval_every == 0) or it == total:
                m = evaluate(model, dataset, eval_indices, ("describe", "execute"))
                row["describe_accuracy"] = m["describe"].sentence_accuracy
                row["execute_nrmse"] = m["execute"].nrmse
                if checkpoint_path:
                    save_checkpoint(snapshot(it), checkpoint_path)
                if progress:
                    progress(row)
            rows.append(row)
            if log_fh:
                log_fh.write(metric_log_csv([row]).split("\n", 1)[1])
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(model, snapshot(total), rows, schedule.supervised, schedule.seen_crossmodal)


def overfit(dataset, indices, model_config, steps=2000, lr=1e-3, seed=0, descriptions=None):
    """Fit a single fixed batch, cycling through the four signals.

    Returns ``(model, final_losses)`` with one L_all per signal.
    """
    mcfg = ModelConfig(**{**model_config.to_dict(), "f_visual": dataset.feature_dim})
    model = build_model(mcfg, seed)
    opt = T.Adam(model.params, lr=lr)
    if descriptions is None:
        descriptions = [dataset.sample(i).descriptions[0] for i in indices]
    batches = {s: assemble_batch(dataset, indices, s, descriptions=descriptions) for s in SIGNALS}
    for step in range(steps):
        loss, _ = forward_loss(model, batches[SIGNALS[step % 4]])
        opt.zero_grad()
        loss.backward()
        opt.step()
    final = {s: float(forward_loss(model, b)[0].data) for s, b in batches.items()}
    return model, final, batches


# ---------------------------------------------------------------- checkpoints

def make_checkpoint(model, config, dataset, rngs, iteration, losses, opt=None):
    adam = {}
    step = 0
    if opt is not None:
        step = opt.state.step_count
        for k in opt.state.first_moment:
            adam[f"m/{k}"] = opt.state.first_moment[k].copy()
            adam[f"v/{k}"] = opt.state.second_moment[k].copy()
    return Checkpoint(
        model_config=model.config.to_dict(),
        train_config=config.to_dict(),
        params={k: v.copy() for k, v in model.state_dict().items()},
        feature_mean=dataset.feature_mean.copy(),
        feature_std=dataset.feature_std.copy(),
        joint_range=float(dataset.joint_range),
        rng_state={k: g.bit_generator.state for k, g in rngs.items()},
        iteration=int(iteration),
        loss_history=np.asarray(losses, dtype=np.float64),
        adam=adam,
        adam_step=step,
    )


def _tensor_table(ckpt):
    table = {f"param/{k}": v for k, v in ckpt.params.items()}
    table["stats/feature_mean"] = ckpt.feature_mean
    table["stats/feature_std"] = ckpt.feature_std
    table["history/loss"] = ckpt.loss_history
    for k, v in ckpt.adam.items():
        table[f"adam/{k}"] = v
    return table


def save_checkpoint(ckpt, path):
    """Versioned header, JSON config block, little-endian float64 tensor table, SHA-256 trailer."""
    table = _tensor_table(ckpt)
    entries, blobs, offset = [], [], 0
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "joint_range": ckpt.joint_range,
        "rng_state": ckpt.rng_state,
        "iteration": ckpt.iteration,
        "adam_step": ckpt.adam_step,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = _CKPT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_CKPT_MAGIC) + 12 + 32 or raw[:len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checksum mismatch in {path}")
    version, hlen = struct.unpack("<IQ", body[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    header = json.loads(body[20:20 + hlen])
    data = body[20 + hlen:]
    table = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        table[e["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    return Checkpoint(
        model_config=header["model_config"],
        train_config=header["train_config"],
        params={k[6:]: v for k, v in table.items() if k.startswith("param/")},
        feature_mean=table["stats/feature_mean"],
        feature_std=table["stats/feature_std"],
        joint_range=header["joint_range"],
        rng_state=header["rng_state"],
        iteration=header["iteration"],
        loss_history=table["history/loss"],
        adam={k[5:]: v for k, v in table.items() if k.startswith("adam/")},
        adam_step=header["adam_step"],
        extra=header["extra"],
    )
