import json

import pytest

from xmodal import cli
from xmodal.trainer import ConfigError, TrainingFault

TINY = """
[data]
height = 16
width = 16

[cae]
epochs = 1
frame_stride = 50
bottleneck = 2

[model]
h_dim = 8

[train]
epochs = 1
eval_every_epochs = 1
lr = 0.001

[sweep]
fractions = 50
seeds = 0
models = ptae
"""


def test_empty_config_gives_paper_defaults(tmp_path):
    path = tmp_path / "empty.ini"
    path.write_text("")
    cfg = cli.parse_config(str(path))
    assert cfg["model"]["h_dim"] == 256
    assert cfg["train"]["lr"] == 1e-5 and cfg["train"]["batch_size"] == 6 and cfg["train"]["epochs"] == 2500


def test_precedence_and_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\npreset = desk\n[train]\nepochs = 12\n")
    cfg = cli.parse_config(str(path))
    assert cfg["model"]["h_dim"] == 64 and cfg["train"]["epochs"] == 12
    cfg = cli.parse_config(str(path), {("train", "epochs"): "7"})
    assert cfg["train"]["epochs"] == 7
    cfg = cli.parse_config(None, {("run", "preset"): "desk"})
    assert cfg["model"]["h_dim"] == 64 and cfg["train"]["epochs"] == 300
    cfg = cli.parse_config(None, {("train", "fraction"): 0.1, ("train", "regime"): "samples"})
    tc = cli.train_config(cfg)
    assert tc.regime == "samples" and tc.fraction == 0.1


def test_config_errors(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[train]\nlearning_rate = 3\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        cli.parse_config(str(path))
    path.write_text("[train]\nepochs = many\n")
    with pytest.raises(ConfigError, match="epochs"):
        cli.parse_config(str(path))
    path.write_text("[optimizer]\nlr = 1\n")
    with pytest.raises(ConfigError, match="optimizer"):
        cli.parse_config(str(path))
    with pytest.raises(ConfigError):
        cli.parse_config(str(tmp_path / "missing.ini"))


def test_parse_fractions():
    assert cli.parse_fractions("66.6,1,2") == pytest.approx([0.01, 0.02, 0.666])
    with pytest.raises(ConfigError):
        cli.parse_fractions("0,5")
    with pytest.raises(ConfigError):
        cli.parse_fractions("a,b")


def _cfg(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return str(path)


def test_gen_data_is_deterministic(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    for name in ("a", "b"):
        assert cli.main(["gen-data", "--seed", "7", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    ma = json.loads((tmp_path / "a" / "corpus" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "corpus" / "manifest.json").read_text())
    assert ma["corpus_checksum"] == mb["corpus_checksum"]
    assert ma["seeds"] == [7]
    # existing artifacts are never overwritten
    assert cli.main(["gen-data", "--seed", "7", "--config", cfg, "--out", str(tmp_path / "a")]) == 1


def test_missing_prerequisite_is_dependency_error(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    out = str(tmp_path / "o")
    assert cli.main(["train", "--config", cfg, "--out", out]) == 2
    assert cli.main(["gen-data", "--config", cfg, "--out", out]) == 0
    capsys.readouterr()
    assert cli.main(["train", "--config", cfg, "--out", out]) == 2
    assert "extract-features" in capsys.readouterr().err


def test_out_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("XMODAL_OUT_ROOT", str(tmp_path / "env"))
    assert cli.main(["gen-data", "--config", _cfg(tmp_path)]) == 0
    assert (tmp_path / "env" / "corpus" / "manifest.json").exists()


def test_numeric_fault_exit_code(tmp_path, monkeypatch):
    cfg = _cfg(tmp_path)
    out = str(tmp_path / "o")
    monkeypatch.setattr(cli, "_dataset", lambda root, ckpt=None: (None, None, None))

    def boom(*a, **k):
        raise TrainingFault("non-finite loss at iteration 4")

    monkeypatch.setattr(cli, "train", boom)
    monkeypatch.setattr(cli, "Artifact", lambda *a, **k: _NullArtifact(tmp_path))
    assert cli.main(["train", "--config", cfg, "--out", out]) == 3


class _NullArtifact:
    def __init__(self, tmp_path):
        self.dir = str(tmp_path / "null")
        self.final = str(tmp_path / "null-final")
        (tmp_path / "null").mkdir(exist_ok=True)

    def path(self, name):
        return self.dir + "/" + name

    def abort(self):
        pass


def test_full_pipeline(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    out = tmp_path / "run"
    common = ["--config", cfg, "--out", str(out)]
    for cmd in ("gen-data", "train-cae", "extract-features", "train"):
        assert cli.main([cmd] + common) == 0, cmd
    train_dirs = [p for p in out.iterdir() if p.name.startswith("train-")]
    assert len(train_dirs) == 1
    tdir = train_dirs[0]
    assert {"manifest.json", "metrics.csv", "checkpoint.ckpt"} <= {p.name for p in tdir.iterdir()}
    manifest = json.loads((tdir / "manifest.json").read_text())
    feats = json.loads((out / "features" / "manifest.json").read_text())
    assert manifest["feature_cache_checksum"] == feats["feature_cache_checksum"]
    assert manifest["corpus_checksum"] == feats["corpus_checksum"]
    capsys.readouterr()
    assert cli.main(["eval"] + common) == 0
    assert "chance level: 2.78%" in capsys.readouterr().out
    assert cli.main(["conflict-eval"] + common) == 0
    conflict = [p for p in out.iterdir() if p.name.startswith("conflict-")][0]
    assert (conflict / "fig6_conflicts.csv").exists()
    assert cli.main(["sweep", "--regime", "samples"] + common) == 0
    sweep = out / "sweep-samples-paper"
    assert (sweep / "fig4_sample_sweep_acc.csv").exists() and (sweep / "manifest.json").exists()
    assert not [p for p in out.iterdir() if p.name.startswith(".")]
    for d in out.iterdir():
        assert (d / "manifest.json").exists()
