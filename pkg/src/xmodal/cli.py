"""Command-line entry point: data generation, feature extraction, training and evaluation.

Every command writes into a fresh directory under the output root (``--out``,
else ``$XMODAL_OUT_ROOT``, else ``./xmodal-out``).  Output is assembled in a
temporary directory and renamed into place together with ``manifest.json``.
"""
from __future__ import annotations

import argparse
import configparser
import copy
import datetime as _dt
import hashlib
import json
import os
import shutil
import sys
import tempfile

from . import __version__
from . import cae
from . import tensor as T
from .corpus import generate_corpus, load_corpus, save_corpus
from .model import ModelConfig
from .trainer import (ConfigError, Dataset, TrainConfig, TrainingFault, CheckpointError,
                      load_checkpoint, save_checkpoint, train)
from . import evaluation as ev

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("gen-data", "train-cae", "extract-features", "train", "eval", "sweep", "conflict-eval")


class DependencyError(RuntimeError):
    pass


DEFAULTS = {
    "run": {"preset": "paper", "seed": 0},
    "data": {"height": 48, "width": 64, "store_frames": False},
    "cae": {"bottleneck": 8, "lr": 1e-3, "epochs": 30, "batch_size": 32, "frame_stride": 20},
    "model": {"kind": "ptae", "h_dim": 256, "heads": 4, "ff_dim": 0, "residual_norm": False},
    "train": {"lr": 1e-5, "batch_size": 6, "epochs": 2500, "alpha": 1.0, "beta": 1.0,
              "regime": "iterations", "fraction": 2.0 / 3.0, "loss_mode": "signal",
              "eval_every_epochs": 50},
    "sweep": {"fractions": "1,2,5,10,20,50,66.6", "seeds": "0,1,2", "models": "ptae,gmu", "workers": 1},
    "eval": {"exact": False, "first_frame_only": False},
}

PRESET_OVERRIDES = {
    "paper": {},
    "desk": {"model": {"h_dim": 64}, "train": {"epochs": 300, "lr": 1e-3}},
}

_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _coerce(section, key, value):
    if section not in DEFAULTS or key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key [{section}] {key}")
    default = DEFAULTS[section][key]
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            return _BOOL[value.strip().lower()]
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (KeyError, ValueError):
        raise ConfigError(f"[{section}] {key}: cannot read {value!r} as {type(default).__name__}") from None
    return value.strip()


def parse_config(path=None, overrides=None):
    """Defaults < preset < file < overrides.  ``overrides`` maps (section, key) to values."""
    file_values = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} does not exist")
        parser = configparser.ConfigParser()
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                file_values[(section, key)] = _coerce(section, key, value)
    overrides = {k: _coerce(*k, v) for k, v in (overrides or {}).items()}
    preset = overrides.get(("run", "preset"), file_values.get(("run", "preset"), DEFAULTS["run"]["preset"]))
    if preset not in PRESET_OVERRIDES:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in PRESET_OVERRIDES[preset].items():
        cfg[section].update(values)
    for (section, key), value in list(file_values.items()) + list(overrides.items()):
        cfg[section][key] = value
    cfg["run"]["preset"] = preset
    return cfg


def model_config(cfg, kind=None):
    m = cfg["model"]
    kind = kind or m["kind"]
    return ModelConfig(kind=kind, h_dim=50 if kind == "gmu" else m["h_dim"], heads=m["heads"],
                       ff_dim=m["ff_dim"] or None, residual_norm=m["residual_norm"])


def train_config(cfg):
    t = cfg["train"]
    return TrainConfig(lr=t["lr"], batch_size=t["batch_size"], epochs=t["epochs"], alpha=t["alpha"],
                       beta=t["beta"], regime=t["regime"], fraction=t["fraction"], seed=cfg["run"]["seed"],
                       loss_mode=t["loss_mode"], eval_every_epochs=t["eval_every_epochs"],
                       model=model_config(cfg))


def cae_config(cfg):
    c = cfg["cae"]
    return cae.CaeConfig(bottleneck=c["bottleneck"], lr=c["lr"], epochs=c["epochs"],
                         batch_size=c["batch_size"], frame_stride=c["frame_stride"], seed=cfg["run"]["seed"])


def parse_fractions(text):
    """Comma-separated percentages -> sorted fractions in [0, 1]."""
    try:
        vals = sorted(float(x) / 100.0 for x in str(text).split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"cannot parse fractions {text!r}") from None
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise ConfigError("fractions must be percentages in (0, 100]")
    return vals


def _int_list(text, name):
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse {name} {text!r}") from None


# ---------------------------------------------------------------- artifacts

def out_root(args_out):
    return os.path.abspath(args_out or os.environ.get("XMODAL_OUT_ROOT") or "xmodal-out")


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Artifact:
    """Temp directory renamed to ``root/name`` on success; existing targets are never touched."""

    def __init__(self, root, name, command, cfg):
        self.final = os.path.join(root, name)
        if os.path.exists(self.final):
            raise ConfigError(f"{self.final} already exists; choose another --out")
        os.makedirs(root, exist_ok=True)
        self.dir = tempfile.mkdtemp(prefix=f".{name}-", dir=root)
        self.manifest = {"command": command, "config": cfg, "tool_version": __version__,
                         "started": _now(), "inputs": {}}

    def path(self, name):
        return os.path.join(self.dir, name)

    def commit(self, **fields):
        self.manifest.update(fields)
        self.manifest["finished"] = _now()
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.rename(self.dir, self.final)
        return self.final

    def abort(self):
        shutil.rmtree(self.dir, ignore_errors=True)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _require(root, name, producer):
    path = os.path.join(root, name)
    if not os.path.exists(os.path.join(path, "manifest.json")):
        raise DependencyError(f"missing {path}; run `xmodal {producer}` first")
    return path


def _load_corpus(root):
    path = _require(root, "corpus", "gen-data")
    return load_corpus(path), path


def _load_features(root, corpus):
    path = _require(root, "features", "extract-features")
    fpath = os.path.join(path, "features.bin")
    try:
        feats, _ = cae.load_feature_cache(fpath, corpus.checksum())
    except ValueError as exc:
        raise DependencyError(f"{exc}; rerun `xmodal extract-features`") from None
    return feats, _sha256_file(fpath)


def _dataset(root, ckpt=None):
    corpus, _ = _load_corpus(root)
    feats, fsum = _load_features(root, corpus)
    if ckpt is None:
        return Dataset.build(corpus, feats), corpus, fsum
    return Dataset.build(corpus, feats, ckpt.feature_mean, ckpt.feature_std, ckpt.joint_range), corpus, fsum


def _run_tag(cfg, kind=None):
    t = cfg["train"]
    kind = kind or cfg["model"]["kind"]
    return f"{kind}-{cfg['run']['preset']}-{t['regime']}-{100 * t['fraction']:g}-seed{cfg['run']['seed']}"


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg, root):
    d = cfg["data"]
    corpus = generate_corpus(cfg["run"]["seed"], (d["height"], d["width"]))
    art = Artifact(root, "corpus", "gen-data", cfg)
    try:
        save_corpus(corpus, art.dir, frames=d["store_frames"])
        checksum = corpus.checksum()
        art.commit(corpus_checksum=checksum, seeds=[cfg["run"]["seed"]])
    except BaseException:
        art.abort()
        raise
    print(f"corpus: {len(corpus)} samples ({len(corpus.train_indices)} train / "
          f"{len(corpus.test_indices)} test), checksum {checksum}")
    return EXIT_OK


def cmd_train_cae(args, cfg, root):
    corpus, cpath = _load_corpus(root)
    art = Artifact(root, "cae", "train-cae", cfg)
    try:
        encoder, hist = cae.train_visual_encoder(corpus, cae_config(cfg))
        cae.save_encoder(art.path("encoder.npz"), encoder, corpus.resolution)
        with open(art.path("loss.csv"), "w") as fh:
            fh.write("epoch," + ",".join(cae.CHANNELS) + "\n")
            for e in range(len(hist["R"])):
                fh.write(f"{e + 1}," + ",".join(repr(hist[c][e]) for c in cae.CHANNELS) + "\n")
        art.commit(corpus_checksum=corpus.checksum(), seeds=[cfg["run"]["seed"]],
                   inputs={"corpus": cpath})
    except BaseException:
        art.abort()
        raise
    print("final reconstruction MSE: " + ", ".join(f"{c}={hist[c][-1]:.5f}" for c in cae.CHANNELS))
    return EXIT_OK


def cmd_extract_features(args, cfg, root):
    corpus, cpath = _load_corpus(root)
    epath = _require(root, "cae", "train-cae")
    encoder = cae.load_encoder(os.path.join(epath, "encoder.npz"))
    art = Artifact(root, "features", "extract-features", cfg)
    try:
        feats = cae.corpus_features(corpus, encoder)
        fsum = cae.save_feature_cache(art.path("features.bin"), feats, corpus.checksum())
        art.commit(corpus_checksum=corpus.checksum(), feature_cache_checksum=fsum,
                   inputs={"corpus": cpath, "cae": epath})
    except BaseException:
        art.abort()
        raise
    print(f"features: {len(feats)} sequences, F={feats[0].shape[1]}, checksum {fsum}")
    return EXIT_OK


def cmd_train(args, cfg, root):
    dataset, corpus, fsum = _dataset(root)
    tcfg = train_config(cfg)
    art = Artifact(root, f"train-{_run_tag(cfg)}", "train", cfg)
    try:
        def progress(row):
            print(f"iter {row['iteration']}: loss {row['loss']:.5f} describe acc "
                  f"{100 * row['describe_accuracy']:.1f}% execute nrmse {row['execute_nrmse']:.2f}%",
                  flush=True)
        result = train(tcfg, dataset, log_path=art.path("metrics.csv"),
                       checkpoint_path=art.path("checkpoint.ckpt"), progress=progress)
        save_checkpoint(result.checkpoint, art.path("checkpoint.ckpt"))
        art.commit(corpus_checksum=corpus.checksum(), feature_cache_checksum=fsum,
                   seeds=[tcfg.seed], supervised_subset=result.supervised if tcfg.regime == "samples" else None)
    except TrainingFault:
        # keep the last good checkpoint for inspection
        failed = art.final + ".failed"
        if not os.path.exists(failed):
            os.rename(art.dir, failed)
        raise
    except BaseException:
        art.abort()
        raise
    print(f"checkpoint written to {art.final}")
    return EXIT_OK


def _checkpoint_path(args, cfg, root):
    if args.checkpoint:
        return args.checkpoint
    return os.path.join(_require(root, f"train-{_run_tag(cfg)}", "train"), "checkpoint.ckpt")


def _load_model(args, cfg, root):
    path = _checkpoint_path(args, cfg, root)
    try:
        ckpt = load_checkpoint(path)
    except FileNotFoundError:
        raise DependencyError(f"missing checkpoint {path}; run `xmodal train` first") from None
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from None
    return ckpt, path


def cmd_eval(args, cfg, root):
    ckpt, path = _load_model(args, cfg, root)
    dataset, corpus, fsum = _dataset(root, ckpt)
    model = ckpt.restore_model()
    e = cfg["eval"]
    res = ev.evaluate(model, dataset, corpus.test_indices, exact=e["exact"],
                      first_frame_only=e["first_frame_only"])
    rows = [{"signal": s, "n": m.n, "sentence_accuracy": m.sentence_accuracy, "nrmse": m.nrmse}
            for s, m in res.items()]
    art = Artifact(root, f"eval-{os.path.basename(os.path.dirname(os.path.abspath(path)))}", "eval", cfg)
    try:
        with open(art.path("metrics.csv"), "w") as fh:
            fh.write(ev._csv(rows, ("signal", "n", "sentence_accuracy", "nrmse")))
        art.commit(corpus_checksum=corpus.checksum(), feature_cache_checksum=fsum,
                   inputs={"checkpoint": path})
    except BaseException:
        art.abort()
        raise
    for r in rows:
        value = (f"accuracy {100 * r['sentence_accuracy']:.2f}%" if r["nrmse"] is None
                 else f"NRMSE {r['nrmse']:.3f}%")
        print(f"{r['signal']:<16} {value}")
    print(f"chance level: {100 * ev.CHANCE_LEVEL:.2f}%")
    return EXIT_OK


def cmd_sweep(args, cfg, root):
    dataset, corpus, fsum = _dataset(root)
    s = cfg["sweep"]
    fractions = parse_fractions(s["fractions"])
    seeds = _int_list(s["seeds"], "seeds")
    models = [m.strip() for m in s["models"].split(",") if m.strip()]
    if any(m not in ("ptae", "gmu") for m in models):
        raise ConfigError(f"unknown model in {s['models']!r}")
    regime = cfg["train"]["regime"]
    art = Artifact(root, f"sweep-{regime}-{cfg['run']['preset']}", "sweep", cfg)
    try:
        result = ev.run_supervision_sweep(fractions, regime, train_config(cfg), dataset, models, seeds,
                                          workers=s["workers"])
        files = ev.write_sweep_outputs(result, art.dir)
        art.commit(corpus_checksum=corpus.checksum(), feature_cache_checksum=fsum, seeds=seeds, files=files)
    except BaseException:
        art.abort()
        raise
    text, status = ev.emit_report(result)
    print(text, end="")
    return status


def cmd_conflict_eval(args, cfg, root):
    ckpt, path = _load_model(args, cfg, root)
    dataset, corpus, fsum = _dataset(root, ckpt)
    rows = ev.run_conflict_eval(ckpt.restore_model(), dataset, seed=cfg["run"]["seed"])
    name = f"conflict-{os.path.basename(os.path.dirname(os.path.abspath(path)))}"
    art = Artifact(root, name, "conflict-eval", cfg)
    try:
        files = ev.write_conflict_outputs(rows, art.dir)
        art.commit(corpus_checksum=corpus.checksum(), feature_cache_checksum=fsum,
                   inputs={"checkpoint": path}, files=files)
    except BaseException:
        art.abort()
        raise
    text, status = ev.emit_report(rows)
    print(text, end="")
    return status


HANDLERS = {
    "gen-data": cmd_gen_data, "train-cae": cmd_train_cae, "extract-features": cmd_extract_features,
    "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "conflict-eval": cmd_conflict_eval,
}


def build_parser():
    p = argparse.ArgumentParser(prog="xmodal", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI file with [run], [data], [cae], [model], [train], [sweep], [eval]")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=sorted(PRESET_OVERRIDES))
    p.add_argument("--regime", choices=("iterations", "samples"))
    p.add_argument("--supervised-fraction", type=float, help="crossmodal fraction in [0, 1]")
    p.add_argument("--fractions", help="comma-separated percentages for sweep")
    p.add_argument("--model", choices=("ptae", "gmu"))
    p.add_argument("--out", help="output root (default: $XMODAL_OUT_ROOT or ./xmodal-out)")
    p.add_argument("--workers", type=int)
    p.add_argument("--checkpoint", help="checkpoint for eval / conflict-eval")
    return p


def _overrides(args):
    mapping = {
        ("run", "seed"): args.seed, ("run", "preset"): args.preset,
        ("train", "regime"): args.regime, ("train", "fraction"): args.supervised_fraction,
        ("sweep", "fractions"): args.fractions, ("model", "kind"): args.model,
        ("sweep", "workers"): args.workers,
    }
    return {k: v for k, v in mapping.items() if v is not None}


def dispatch(command, cfg, args, root):
    return HANDLERS[command](args, cfg, root)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, _overrides(args))
        if args.command == "sweep" and args.model:
            cfg["sweep"]["models"] = args.model
        return dispatch(args.command, cfg, args, out_root(args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (TrainingFault, T.NumericFault, cae.TrainingFault) as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
