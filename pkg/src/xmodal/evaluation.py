"""Metrics, supervision sweeps and incongruent-input experiments."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace
import csv
import hashlib
import io
import itertools
import json
import os

import numpy as np

from .corpus import (ACTION_TYPES, COLORS, EOS, LANG_LEN, POSITIONS, SPEEDS, VOCAB,
                     encode_language, semantics)
from .trainer import ACTION_OUTPUT, LANGUAGE_OUTPUT, ConfigError, assemble_batch, paired_description

CHANCE_LEVEL = 1.0 / (len(ACTION_TYPES) * len(COLORS) * len(SPEEDS))
SIGNAL_ORDER = ("describe", "execute", "repeat_action", "repeat_language")
PAPER_FRACTIONS = (0.01, 0.02, 0.05, 0.10, 0.20, 0.50, 2.0 / 3.0)


@dataclass
class Metrics:
    signal: str
    n: int
    sentence_accuracy: float | None = None
    nrmse: float | None = None
    predictions: list = field(default_factory=list, repr=False)


def chance_level():
    """Probability of guessing all three words: 1 / (3 action types x 6 colours x 2 speeds)."""
    return CHANCE_LEVEL


def sentence_correct(tokens, target, exact=False):
    """Whether predicted token ids (N-1) express ``target`` and then stop with EOS.

    Synonym mode compares (action, colour, speed) meanings; exact mode
    compares the surface words.
    """
    tokens = [VOCAB.tokens[int(t)] for t in tokens]
    if len(tokens) != LANG_LEN - 1 or tokens[-1] != EOS:
        return False
    words = tokens[:-1]
    if any(w not in VOCAB.category for w in words):
        return False
    if [VOCAB.category[w] for w in words] != ["action", "color", "speed"]:
        return False
    if exact:
        return tuple(words) == tuple(target)
    return semantics(words) == semantics(target)


def sentence_accuracy(predicted, targets, exact=False):
    if len(predicted) == 0:
        return 0.0
    return float(np.mean([sentence_correct(p, t, exact) for p, t in zip(predicted, targets)]))


def nrmse(predicted, target, joint_range):
    """Root-mean-squared error over every step and joint, as percent of ``joint_range``."""
    predicted, target = np.asarray(predicted, float), np.asarray(target, float)
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {target.shape}")
    if not joint_range > 0:
        raise ConfigError("joint range must be positive")
    return float(np.sqrt(np.mean((predicted - target) ** 2)) / joint_range * 100.0)


def _pooled_nrmse(preds, targets, joint_range):
    sq = sum(float(np.sum((p - t) ** 2)) for p, t in zip(preds, targets))
    count = sum(p.size for p in preds)
    if not joint_range > 0:
        raise ConfigError("joint range must be positive")
    return float(np.sqrt(sq / count) / joint_range * 100.0)


# ---------------------------------------------------------------- conflicts

CONFLICT_FEATURES = {
    "language": ("action", "color", "speed"),
    "action": ("action_type", "position", "speed"),
}
LANGUAGE_CONFLICT_SIGNALS = ("describe", "repeat_action")
ACTION_CONFLICT_SIGNALS = ("execute", "repeat_language")


@dataclass(frozen=True)
class ConflictSpec:
    modality: str
    k: int
    submodality: str = "both"

    def __post_init__(self):
        if self.modality not in CONFLICT_FEATURES:
            raise ValueError(f"conflict modality must be 'language' or 'action', got {self.modality!r}")
        if not 0 <= self.k <= 3:
            raise ValueError("k must lie in 0..3")
        if self.submodality not in ("both", "vision_only", "proprio_only"):
            raise ValueError(f"unknown submodality {self.submodality!r}")
        if self.modality == "language" and self.submodality != "both":
            raise ValueError("submodality masks only apply to action conflicts")

    def valid_for(self, signal):
        pool = LANGUAGE_CONFLICT_SIGNALS if self.modality == "language" else ACTION_CONFLICT_SIGNALS
        return signal in pool


class ConflictSearchError(LookupError):
    pass


@dataclass
class ConflictInput:
    description: tuple | None
    v: np.ndarray
    j: np.ndarray
    distractor: int | None = None


def _wrong_word(category, true_value, rng):
    values = {"action": ACTION_TYPES, "color": COLORS, "speed": SPEEDS}[category]
    choice = rng.choice([x for x in values if x != true_value])
    return VOCAB.words_for(category, str(choice))[0]


def conflicting_description(description, k, rng):
    """Replace exactly ``k`` of the three words by a word of another meaning."""
    true = semantics(description)
    positions = sorted(rng.choice(3, size=k, replace=False).tolist()) if k else []
    out = list(description)
    for p in positions:
        out[p] = _wrong_word(CONFLICT_FEATURES["language"][p], true[p], rng)
    return tuple(out)


def _fit_length(x, m):
    if len(x) >= m:
        return x[:m]
    return np.concatenate([x, np.repeat(x[-1:], m - len(x), axis=0)])


def find_distractor(dataset, index, k, rng):
    """A sample in the same scene whose label differs in exactly ``k`` features.

    Test-split samples are preferred; the full corpus is the fallback.
    """
    corpus = dataset.corpus
    s = corpus.samples[index]

    def distance(o):
        return sum(getattr(s.label, f) != getattr(o.label, f) for f in CONFLICT_FEATURES["action"])

    for pool in (corpus.test_indices, range(len(corpus.samples))):
        cands = [i for i in pool if i != index
                 and corpus.samples[i].scene == s.scene and distance(corpus.samples[i]) == k]
        if cands:
            return int(cands[rng.integers(len(cands))])
    raise ConflictSearchError(f"no trajectory at distance {k} from sample {index}")


def make_conflict(dataset, index, spec, signal, rng):
    """Encoder inputs for ``signal`` on sample ``index`` with the conflict applied.

    Language conflicts append a perturbed description to the signal token.
    Action conflicts substitute another trajectory's features (both streams,
    or only vision / only proprioception), fitted to the true length.
    """
    if not spec.valid_for(signal):
        raise ValueError(f"{spec.modality} conflicts do not apply to {signal}")
    s = dataset.sample(index)
    v, j = dataset.features[index], s.joints
    description = paired_description(s)
    if spec.modality == "language":
        return ConflictInput(conflicting_description(description, spec.k, rng), v, j)
    desc = description if signal in ("execute", "repeat_language") else None
    if spec.k == 0:
        return ConflictInput(desc, v, j)
    other = find_distractor(dataset, index, spec.k, rng)
    v_o = _fit_length(dataset.features[other], len(v))
    j_o = _fit_length(dataset.sample(other).joints, len(j))
    if spec.submodality == "vision_only":
        j_o = j
    elif spec.submodality == "proprio_only":
        v_o = v
    return ConflictInput(desc, v_o, j_o, other)


# ---------------------------------------------------------------- evaluation

def _length_groups(dataset, indices):
    groups = {}
    for i in indices:
        groups.setdefault(dataset.sample(i).seq_len, []).append(int(i))
    return [groups[m] for m in sorted(groups)]


def evaluate(model, dataset, indices, signals=SIGNAL_ORDER, exact=False, conflict=None, seed=0,
             first_frame_only=False, keep_predictions=False):
    """Sentence accuracy for language-output signals and NRMSE for action-output signals.

    Every sample is paired with its deterministic description variant.  With
    ``first_frame_only`` the action stream (encoder input and decoder vision)
    is reduced to the first frame for every step.
    """
    out = {}
    for signal in signals:
        rng = np.random.default_rng([seed, SIGNAL_ORDER.index(signal)])
        preds, targets = [], []
        for group in _length_groups(dataset, indices):
            descs = [paired_description(dataset.sample(i)) for i in group]
            batch = assemble_batch(dataset, group, signal, descriptions=descs)
            if conflict is not None and conflict.valid_for(signal):
                made = [make_conflict(dataset, i, conflict, signal, rng) for i in group]
                batch.lang = np.stack([encode_language(signal, c.description) for c in made])
                batch.v = np.stack([c.v for c in made])
                batch.j = np.stack([c.j for c in made])
            if first_frame_only:
                batch.v = np.repeat(batch.v[:, :1], batch.v.shape[1], axis=1)
                batch.j = np.repeat(batch.j[:, :1], batch.j.shape[1], axis=1)
                batch.dec_v = np.repeat(batch.dec_v[:, :1], batch.dec_v.shape[1], axis=1)
            h = model.encode(batch.lang, batch.v, batch.j, batch.key_mask)
            if signal in LANGUAGE_OUTPUT:
                tokens = model.describe(h).argmax(axis=-1)
                preds.extend(tokens)
                targets.extend(descs)
            else:
                joints = model.act(h, batch.dec_v, batch.j_first).data
                true = np.stack([dataset.sample(i).joints[1:] for i in group])
                preds.extend(joints)
                targets.extend(true)
        m = Metrics(signal, len(preds))
        if signal in LANGUAGE_OUTPUT:
            m.sentence_accuracy = sentence_accuracy(preds, targets, exact)
        else:
            m.nrmse = _pooled_nrmse(preds, targets, dataset.joint_range)
        if keep_predictions:
            m.predictions = preds
        out[signal] = m
    return out


def conflict_specs(ks=(0, 1, 2, 3), submodalities=True):
    specs = [ConflictSpec("language", k) for k in ks]
    specs += [ConflictSpec("action", k) for k in ks]
    if submodalities:
        specs += [ConflictSpec("action", k, sub) for sub in ("vision_only", "proprio_only") for k in ks if k]
    return specs


def run_conflict_eval(model, dataset, specs=None, indices=None, seed=0):
    """One row per (signal, conflict modality, submodality, k) on the test split."""
    specs = conflict_specs() if specs is None else specs
    indices = dataset.corpus.test_indices if indices is None else indices
    rows = []
    for spec in specs:
        signals = LANGUAGE_CONFLICT_SIGNALS if spec.modality == "language" else ACTION_CONFLICT_SIGNALS
        res = evaluate(model, dataset, indices, signals, conflict=spec, seed=seed)
        for signal in signals:
            m = res[signal]
            metric = "sentence_accuracy" if signal in LANGUAGE_OUTPUT else "nrmse"
            rows.append({"signal": signal, "modality": spec.modality, "submodality": spec.submodality,
                         "k": spec.k, "metric": metric, "value": getattr(m, metric)})
    return rows


def conflict_value(rows, signal, k, modality=None, submodality="both"):
    for r in rows:
        if r["signal"] == signal and r["k"] == k and r["submodality"] == submodality \
                and (modality is None or r["modality"] == modality):
            return r["value"]
    raise KeyError((signal, k, submodality))


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepResult:
    regime: str
    fractions: list
    seeds: list
    cells: list = field(default_factory=list)

    def ok_cells(self, model, fraction):
        return [c for c in self.cells if c["model"] == model and c["status"] == "ok"
                and abs(c["fraction"] - fraction) < 1e-12]

    def mean(self, model, fraction, metric="sentence_accuracy"):
        vals = [c[metric] for c in self.ok_cells(model, fraction)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def failed(self):
        return [c for c in self.cells if c["status"] != "ok"]

    @property
    def models(self):
        return sorted({c["model"] for c in self.cells}, key=lambda m: (m != "ptae", m))

    def to_dict(self):
        return asdict(self)


CELL_FIELDS = ("model", "regime", "fraction", "seed", "status", "sentence_accuracy", "nrmse",
               "error", "config_hash")


def cell_config(base, model, regime, fraction, seed):
    """TrainConfig for one sweep cell; the GMU baseline keeps its 50-d latent."""
    from .trainer import TrainConfig
    mcfg = replace(base.model, kind=model, h_dim=50 if model == "gmu" else base.model.h_dim)
    return TrainConfig(**{**base.to_dict(), "model": mcfg, "regime": regime,
                          "fraction": fraction, "seed": seed})


def config_hash(config, extra=""):
    blob = json.dumps(config.to_dict(), sort_keys=True) + extra
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_cell(config, dataset, cache_dir=None, cache_key=""):
    """Train and evaluate one cell; failures are recorded, not raised."""
    from .trainer import train
    key = config_hash(config, cache_key)
    path = os.path.join(cache_dir, f"cell-{key}.json") if cache_dir else None
    if path and os.path.exists(path):
        with open(path) as fh:
            return json.load(fh)
    cell = {"model": config.model.kind, "regime": config.regime, "fraction": config.fraction,
            "seed": config.seed, "status": "ok", "sentence_accuracy": None, "nrmse": None,
            "error": "", "config_hash": key}
    try:
        result = train(config, dataset)
        m = evaluate(result.model, dataset, dataset.corpus.test_indices, ("describe", "execute"))
        cell["sentence_accuracy"] = m["describe"].sentence_accuracy
        cell["nrmse"] = m["execute"].nrmse
    except Exception as exc:  # recorded per cell; the sweep goes on
        cell["status"] = "failed"
        cell["error"] = f"{type(exc).__name__}: {exc}"
    if path and cell["status"] == "ok":
        os.makedirs(cache_dir, exist_ok=True)
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(cell, fh, sort_keys=True)
        os.replace(tmp, path)
    return cell


def run_supervision_sweep(fractions, regime, base_config, dataset, models=("ptae", "gmu"),
                          seeds=(0, 1, 2), workers=1, cache_dir=None, cache_key=""):
    """One training run per (model, fraction, seed), merged in that order."""
    fractions = sorted(float(f) for f in fractions)
    configs = [cell_config(base_config, m, regime, f, s)
               for m, f, s in itertools.product(models, fractions, seeds)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            cells = list(pool.map(run_cell, configs, itertools.repeat(dataset),
                                  itertools.repeat(cache_dir), itertools.repeat(cache_key)))
    else:
        cells = [run_cell(c, dataset, cache_dir, cache_key) for c in configs]
    return SweepResult(regime, fractions, list(seeds), cells)


# ---------------------------------------------------------------- output

def _csv(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})
    return buf.getvalue()


def _long_rows(result, metric):
    return [{"model": c["model"], "fraction": c["fraction"], "seed": c["seed"], "metric": metric,
             "value": c[metric], "status": c["status"]} for c in result.cells]


def write_sweep_outputs(result, out_dir):
    """cells.csv, summary.json and the plot-ready long-format files."""
    os.makedirs(out_dir, exist_ok=True)
    files = {"cells.csv": _csv(result.cells, CELL_FIELDS)}
    long_cols = ("model", "fraction", "seed", "metric", "value", "status")
    if result.regime == "iterations":
        rows = _long_rows(result, "sentence_accuracy") + _long_rows(result, "nrmse")
        files["fig3_iter_sweep.csv"] = _csv(rows, long_cols)
    else:
        files["fig4_sample_sweep_acc.csv"] = _csv(_long_rows(result, "sentence_accuracy"), long_cols)
        files["fig5_sample_sweep_nrmse.csv"] = _csv(_long_rows(result, "nrmse"), long_cols)
    summary = {"regime": result.regime, "fractions": result.fractions, "seeds": result.seeds,
               "chance_level": CHANCE_LEVEL, "failed": len(result.failed),
               "means": {m: {repr(f): {"sentence_accuracy": result.mean(m, f),
                                       "nrmse": result.mean(m, f, "nrmse")}
                             for f in result.fractions} for m in result.models}}
    files["summary.json"] = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    for name, text in files.items():
        with open(os.path.join(out_dir, name), "w") as fh:
            fh.write(text)
    return sorted(files)


def write_conflict_outputs(rows, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    cols = ("signal", "modality", "submodality", "k", "metric", "value")
    with open(os.path.join(out_dir, "fig6_conflicts.csv"), "w") as fh:
        fh.write(_csv(rows, cols))
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump({"rows": rows}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ["fig6_conflicts.csv", "summary.json"]


def _fmt(x, pct=True):
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "   n/a"
    return f"{100 * x:6.2f}" if pct else f"{x:6.2f}"


def emit_report(results):
    """Human-readable tables; returns ``(text, exit_status)``.

    ``results`` is a :class:`SweepResult`, a list of conflict rows, or empty.
    Failed sweep cells are listed and make the status nonzero.
    """
    if not results:
        return "no cells\n", 0
    lines = []
    chance = f"chance level (all three words): {100 * CHANCE_LEVEL:.2f}%"
    if isinstance(results, SweepResult):
        lines.append(f"supervision sweep, {results.regime} regime, seeds {results.seeds}")
        lines.append(f"{'fraction':>9} | " + " | ".join(f"{m:>6} acc% {m:>6} nrmse%" for m in results.models))
        for f in results.fractions:
            cells = [f"{_fmt(results.mean(m, f))}      {_fmt(results.mean(m, f, 'nrmse'), False)}       "
                     for m in results.models]
            lines.append(f"{100 * f:8.1f}% | " + " | ".join(cells))
        lines.append(chance)
        for c in results.failed:
            lines.append(f"FAILED {c['model']} fraction={c['fraction']} seed={c['seed']}: {c['error']}")
        return "\n".join(lines) + "\n", (1 if results.failed else 0)
    lines.append(f"{'signal':<16} {'conflict':<9} {'submodality':<13} {'k':>2} {'metric':<18} value")
    for r in results:
        pct = r["metric"] == "sentence_accuracy"
        lines.append(f"{r['signal']:<16} {r['modality']:<9} {r['submodality']:<13} {r['k']:>2} "
                     f"{r['metric']:<18} {_fmt(r['value'], pct)}")
    lines.append(chance)
    return "\n".join(lines) + "\n", 0
