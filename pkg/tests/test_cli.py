import json
import shutil

import numpy as np
import pytest

from afusion.cli import main
from afusion.datapipe.formats import read_predictions
from afusion.datapipe.records import list_records, load_record

TINY = ["--max-epoch", "2", "--warmup-epochs", "1", "--lr", "1e-3", "--min-lr", "1e-6", "--batch-size", "4",
        "--backbone-channels", "4,4,4", "--tcn-levels", "2", "--tcn-channels", "8", "--d-attn", "4",
        "--d-fused", "8"]


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--trials", "3", "--subjects", "3", "--n-frames", "260",
                 "--val-subjects", "1", "--test-trials", "1", "--seed", "4"]) == 0
    assert main(["preprocess", "--manifest", str(root / "data" / "manifest.jsonl"),
                 "--out", str(root / "store")]) == 0
    return root


def test_synth_is_byte_deterministic(tmp_path):
    args = ["--trials", "2", "--subjects", "2", "--n-frames", "60", "--seed", "9"]
    assert main(["synth", "--out", str(tmp_path / "a")] + args) == 0
    assert main(["synth", "--out", str(tmp_path / "b")] + args) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_synth_rejects_bad_counts(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--trials", "0"]) == 1
    assert "error" in capsys.readouterr().err


def test_preprocess_store_and_idempotence(corpus, tmp_path, capsys):
    assert list_records(corpus / "store") == ["t000", "t001", "t002", "t003"]
    rec = load_record(corpus / "store", "t003")
    assert rec.split == "test" and not rec.valid_mask.any()
    before = tree_bytes(corpus / "store")
    assert main(["preprocess", "--manifest", str(corpus / "data" / "manifest.jsonl"),
                 "--out", str(corpus / "store")]) == 0
    assert "preprocessed 4 trials" in capsys.readouterr().out
    assert tree_bytes(corpus / "store") == before


def test_preprocess_isolates_a_broken_trial(corpus, tmp_path, capsys):
    data = tmp_path / "data"
    shutil.copytree(corpus / "data", data)
    (data / "trials" / "t001" / "audio.wav").unlink()
    code = main(["preprocess", "--manifest", str(data / "manifest.jsonl"), "--out", str(tmp_path / "store")])
    out = capsys.readouterr().out
    assert code == 2
    assert "FAILED t001" in out and "1 failed" in out
    assert list_records(tmp_path / "store") == ["t000", "t002", "t003"]


def test_synth_default_sized_corpus_round_trips(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d"), "--trials", "4", "--subjects", "4", "--n-frames", "400",
                 "--fps", "25", "--sentinel-rate", "0.05"]) == 0
    assert main(["preprocess", "--manifest", str(tmp_path / "d" / "manifest.jsonl"),
                 "--out", str(tmp_path / "s")]) == 0
    assert "preprocessed 4 trials, 1600 frames" in capsys.readouterr().out
    assert all((~load_record(tmp_path / "s", t).valid_mask).any() for t in list_records(tmp_path / "s"))


def test_thread_count_must_be_positive(corpus, tmp_path, monkeypatch):
    monkeypatch.setenv("AFUSION_THREADS", "0")
    assert main(["preprocess", "--manifest", str(corpus / "data" / "manifest.jsonl"), "--out", str(tmp_path)]) == 1
    monkeypatch.setenv("AFUSION_THREADS", "2")
    assert main(["preprocess", "--manifest", str(corpus / "data" / "manifest.jsonl"), "--out", str(tmp_path)]) == 0
    assert tree_bytes(tmp_path) == tree_bytes(corpus / "store")


def test_bad_manifest_is_a_validation_error(tmp_path):
    (tmp_path / "m.jsonl").write_text("{not json\n")
    assert main(["preprocess", "--manifest", str(tmp_path / "m.jsonl"), "--out", str(tmp_path / "s")]) == 1


@pytest.fixture(scope="module")
def trained(corpus):
    out = corpus / "runs"
    code = main(["train", "--store", str(corpus / "store"), "--out", str(out), "--seeds", "1,2,3"] + TINY)
    assert code == 0
    return out


def test_train_writes_the_run_tree(trained):
    root = trained / "CAN"
    assert (root / "config.txt").exists() and (root / "folds.json").exists()
    fold = root / "fold0"
    assert sorted(p.name for p in fold.iterdir()) == ["seed1", "seed2", "seed3", "selection.json"]
    for s in (1, 2, 3):
        names = {p.name for p in (fold / f"seed{s}").iterdir()}
        assert {"best.ackp", "last.ackp", "epoch_log.csv", "report.json", "config.txt"} <= names
    sel = json.loads((fold / "selection.json").read_text())
    scores = {int(k): v for k, v in sel["scores"].items()}
    assert sel["selected_seed"] == max(scores, key=lambda s: (scores[s], -s))
    rows = (fold / "seed1" / "epoch_log.csv").read_text().splitlines()
    assert len(rows) == 3


@pytest.mark.parametrize("modality", ["visual", "audio"])
def test_train_single_modality(corpus, tmp_path, modality):
    code = main(["train", "--store", str(corpus / "store"), "--out", str(tmp_path), "--modalities", modality,
                 "--max-epoch", "1"] + TINY[2:])
    assert code == 0
    assert (tmp_path / f"CAN[{modality}]" / "fold0" / "seed1" / "best.ackp").exists()


@pytest.mark.parametrize("bad", [["--model", "rnn"], ["--fold", "7"], ["--patience", "soon"],
                                 ["--modalities", "smell"], ["--no-such-flag", "1"]])
def test_train_invalid_fields_exit_1(corpus, tmp_path, bad, capsys):
    assert main(["train", "--store", str(corpus / "store"), "--out", str(tmp_path)] + bad) == 1
    assert capsys.readouterr().err.startswith("error:")
    assert not (tmp_path / "CAN").exists()


def test_train_config_file_and_override(corpus, tmp_path):
    cfg = tmp_path / "run.txt"
    cfg.write_text("# tiny\nmax_epoch = 5\nmodel = can\n")
    code = main(["train", "--config", str(cfg), "--store", str(corpus / "store"), "--out", str(tmp_path / "o")]
                + TINY)
    assert code == 0
    assert "max_epoch = 2" in (tmp_path / "o" / "CAN" / "config.txt").read_text()


def test_predict_writes_n_clamped_rows(corpus, trained, tmp_path):
    ckpt = trained / "CAN" / "fold0" / "seed1" / "best.ackp"
    assert main(["predict", "--checkpoint", str(ckpt), "--manifest", str(corpus / "data" / "manifest.jsonl"),
                 "--out", str(tmp_path)]) == 0
    for tid in ("t000", "t001", "t002", "t003"):
        pred = read_predictions(tmp_path / f"{tid}.csv")
        assert pred.shape == (load_record(corpus / "store", tid).n, 2)
        assert np.all(np.abs(pred) <= 1.0)
    head = (tmp_path / "t003.csv").read_text().splitlines()[:2]
    assert head[0] == "frame,valence,arousal" and head[1].startswith("0,")
    first = tree_bytes(tmp_path)
    assert main(["predict", "--checkpoint", str(ckpt), "--manifest", str(corpus / "data" / "manifest.jsonl"),
                 "--out", str(tmp_path)]) == 0
    assert tree_bytes(tmp_path) == first


def test_predict_rejects_missing_modality(corpus, trained, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(corpus / "data", data)
    (data / "trials" / "t000" / "audio.wav").unlink()
    ckpt = trained / "CAN" / "fold0" / "seed1" / "best.ackp"
    assert main(["predict", "--checkpoint", str(ckpt), "--manifest", str(data / "manifest.jsonl"),
                 "--out", str(tmp_path / "p")]) == 1
    assert main(["predict", "--checkpoint", str(tmp_path / "none.ackp"), "--manifest",
                 str(data / "manifest.jsonl"), "--out", str(tmp_path / "p")]) == 2


def _fake_run(root, method, fold, seed, v, a):
    d = root / method / f"fold{fold}" / f"seed{seed}"
    d.mkdir(parents=True)
    rep = {"ccc_valence": v, "ccc_arousal": a, "mean_ccc": (v + a) / 2}
    (d / "report.json").write_text(json.dumps({"fold_index": fold, "seed": seed, "method": method,
                                               "best_score": (v + a) / 2, "best_report": rep}))


def test_report_grid(tmp_path, capsys):
    for k in range(6):
        _fake_run(tmp_path, "CAN", k, 1, 0.1 * k, 0.5)
        _fake_run(tmp_path, "CAN", k, 2, 0.0, 0.0)
        if k != 3:
            _fake_run(tmp_path, "LFAN", k, 1, 0.2, 0.25)
    assert main(["report", str(tmp_path), "--out", str(tmp_path / "rep")]) == 0
    lines = (tmp_path / "rep" / "report.csv").read_text().splitlines()
    assert lines[0] == "emotion,method,fold0,fold1,fold2,fold3,fold4,fold5,mean"
    assert lines[1] == "valence,CAN,0.000,0.100,0.200,0.300,0.400,0.500,0.250"
    assert lines[2] == "valence,LFAN,0.200,0.200,0.200,-,0.200,0.200,0.200"
    assert lines[3].startswith("arousal,CAN,0.500") and len(lines) == 5
    assert capsys.readouterr().out == (tmp_path / "rep" / "report.txt").read_text()


def test_report_single_cell(tmp_path):
    _fake_run(tmp_path, "CAN", 0, 1, 0.4, 0.6)
    assert main(["report", str(tmp_path / "CAN" / "fold0" / "seed1"), "--out", str(tmp_path / "r")]) == 0
    lines = (tmp_path / "r" / "report.csv").read_text().splitlines()
    assert lines == ["emotion,method,fold0,mean", "valence,CAN,0.400,0.400", "arousal,CAN,0.600,0.600"]


def test_report_without_runs_exits_1(tmp_path):
    assert main(["report", str(tmp_path)]) == 1


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--instances", "1"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "afusion", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout
    res = subprocess.run([sys.executable, "-m", "afusion", "bogus"], capture_output=True, text=True)
    assert res.returncode == 1
