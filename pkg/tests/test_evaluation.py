import json

import numpy as np
import pytest

from xmodal import evaluation as E
from xmodal.corpus import VOCAB, EOS, semantics, sentence_targets
from xmodal.model import build_model
from xmodal.trainer import ConfigError, TrainConfig, paired_description


def ids(*words):
    return [VOCAB.index(w) for w in words]


def test_chance_level():
    assert E.chance_level() == pytest.approx(1 / 36)
    assert round(100 * E.chance_level(), 2) == 2.78


def test_sentence_correct_cases():
    target = ("push", "red", "slowly")
    assert E.sentence_correct(ids("push", "red", "slowly", EOS), target)
    assert E.sentence_correct(ids("move-up", "scarlet", "unhurriedly", EOS), target)
    assert not E.sentence_correct(ids("move-up", "scarlet", "unhurriedly", EOS), target, exact=True)
    assert not E.sentence_correct(ids("push", "green", "slowly", EOS), target)
    assert not E.sentence_correct(ids("push", "red", "slowly", "slowly"), target)
    assert not E.sentence_correct(ids("red", "push", "slowly", EOS), target)
    assert not E.sentence_correct(ids("push", "red", EOS), target)
    assert E.sentence_accuracy([ids("push", "red", "slowly", EOS), ids("pull", "red", "slowly", EOS)],
                               [target, target]) == 0.5


def test_nrmse_closed_forms():
    rng = np.random.default_rng(0)
    j = rng.uniform(-0.5, 0.5, (3, 10, 5))
    assert E.nrmse(j, j, 1.3) == 0.0
    assert E.nrmse(j + 1.3, j, 1.3) == pytest.approx(100.0)
    assert E.nrmse(j - 0.65, j, 1.3) == pytest.approx(50.0)
    with pytest.raises(ConfigError):
        E.nrmse(j, j, 0.0)
    with pytest.raises(ValueError):
        E.nrmse(j, j[:, :-1], 1.0)


def test_conflicting_description_replaces_exactly_k():
    rng = np.random.default_rng(1)
    base = ("push", "red", "slowly")
    assert E.conflicting_description(base, 0, rng) == base
    for k in (1, 2, 3):
        for _ in range(20):
            d = E.conflicting_description(base, k, rng)
            diff = sum(a != b for a, b in zip(semantics(d), semantics(base)))
            assert diff == k
            assert [VOCAB.category[w] for w in d] == ["action", "color", "speed"]


def test_conflict_spec_validation():
    with pytest.raises(ValueError):
        E.ConflictSpec("language", 4)
    with pytest.raises(ValueError):
        E.ConflictSpec("language", 1, "vision_only")
    assert E.ConflictSpec("language", 1).valid_for("describe")
    assert not E.ConflictSpec("action", 1).valid_for("describe")


def test_distractors_have_exact_hamming_distance(toy_dataset):
    corpus = toy_dataset.corpus
    rng = np.random.default_rng(2)
    for i in corpus.test_indices[:40]:
        s = corpus.samples[i]
        for k in (1, 2, 3):
            o = corpus.samples[E.find_distractor(toy_dataset, i, k, rng)]
            assert o.scene == s.scene
            assert sum(getattr(s.label, f) != getattr(o.label, f)
                       for f in ("action_type", "position", "speed")) == k


def test_make_conflict_submodalities(toy_dataset):
    i = toy_dataset.corpus.test_indices[0]
    s = toy_dataset.sample(i)
    rng = np.random.default_rng(3)
    same = E.make_conflict(toy_dataset, i, E.ConflictSpec("action", 0), "execute", rng)
    np.testing.assert_array_equal(same.v, toy_dataset.features[i])
    both = E.make_conflict(toy_dataset, i, E.ConflictSpec("action", 2), "execute", rng)
    assert both.v.shape == toy_dataset.features[i].shape and both.j.shape == s.joints.shape
    assert not np.array_equal(both.j, s.joints)
    vis = E.make_conflict(toy_dataset, i, E.ConflictSpec("action", 2, "vision_only"), "execute", rng)
    np.testing.assert_array_equal(vis.j, s.joints)
    assert not np.array_equal(vis.v, toy_dataset.features[i])
    pro = E.make_conflict(toy_dataset, i, E.ConflictSpec("action", 2, "proprio_only"), "execute", rng)
    np.testing.assert_array_equal(pro.v, toy_dataset.features[i])
    lang = E.make_conflict(toy_dataset, i, E.ConflictSpec("language", 3), "describe", rng)
    assert sum(a != b for a, b in zip(semantics(lang.description), s.semantics)) == 3
    with pytest.raises(ValueError):
        E.make_conflict(toy_dataset, i, E.ConflictSpec("language", 1), "execute", rng)


def test_fit_length_pads_with_last_step():
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(E._fit_length(x, 2), x[:2])
    np.testing.assert_array_equal(E._fit_length(x, 5)[3:], [[4, 5], [4, 5]])


def test_evaluate_shapes_and_purity(toy_dataset, tiny_config):
    model = build_model(tiny_config)
    idx = toy_dataset.corpus.test_indices[:12]
    a = E.evaluate(model, toy_dataset, idx, keep_predictions=True)
    b = E.evaluate(model, toy_dataset, idx)
    for s in E.SIGNAL_ORDER:
        assert a[s].n == 12
        assert (a[s].sentence_accuracy, a[s].nrmse) == (b[s].sentence_accuracy, b[s].nrmse)
    assert a["describe"].nrmse is None and a["execute"].sentence_accuracy is None
    assert 0.0 <= a["describe"].sentence_accuracy <= 1.0 and a["execute"].nrmse > 0
    ff = E.evaluate(model, toy_dataset, idx, ("execute",), first_frame_only=True)
    assert ff["execute"].nrmse != a["execute"].nrmse


def test_conflict_eval_table(toy_dataset, tiny_config):
    model = build_model(tiny_config)
    idx = toy_dataset.corpus.test_indices[:6]
    rows = E.run_conflict_eval(model, toy_dataset, E.conflict_specs(ks=(0, 1)), idx)
    keys = {(r["signal"], r["modality"], r["submodality"], r["k"]) for r in rows}
    assert ("describe", "language", "both", 1) in keys
    assert ("execute", "action", "vision_only", 1) in keys
    assert ("repeat_language", "action", "proprio_only", 1) in keys
    assert E.conflict_value(rows, "execute", 0) == E.evaluate(model, toy_dataset, idx, ("execute",))["execute"].nrmse


def test_emit_report_cases(tmp_path):
    text, status = E.emit_report([])
    assert "no cells" in text and status == 0
    res = E.SweepResult("samples", [0.1, 1.0], [0], [
        {"model": "ptae", "fraction": 0.1, "seed": 0, "status": "ok", "sentence_accuracy": 0.5, "nrmse": 2.0},
        {"model": "ptae", "fraction": 1.0, "seed": 0, "status": "failed", "sentence_accuracy": None,
         "nrmse": None, "error": "TrainingFault: boom"},
    ])
    text, status = E.emit_report(res)
    assert "2.78%" in text and "FAILED" in text and status == 1
    files = E.write_sweep_outputs(res, tmp_path)
    assert "fig4_sample_sweep_acc.csv" in files and "fig5_sample_sweep_nrmse.csv" in files
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["failed"] == 1
    res.regime = "iterations"
    assert "fig3_iter_sweep.csv" in E.write_sweep_outputs(res, tmp_path / "it")


def test_sweep_runs_cells_and_records_failures(toy_dataset, tiny_config, tmp_path):
    base = TrainConfig(lr=1e-3, epochs=1, eval_every_epochs=100, model=tiny_config)
    res = E.run_supervision_sweep([0.5, 0.0005], "samples", base, toy_dataset, models=("ptae",), seeds=(0,),
                                  cache_dir=tmp_path)
    assert res.fractions == [0.0005, 0.5]
    bad, good = res.cells
    assert bad["status"] == "failed" and "ConfigError" in bad["error"]
    assert good["status"] == "ok" and 0 <= good["sentence_accuracy"] <= 1
    cached = list(tmp_path.glob("cell-*.json"))
    assert len(cached) == 1
    again = E.run_cell(E.cell_config(base, "ptae", "samples", 0.5, 0), toy_dataset, tmp_path)
    assert again == good
