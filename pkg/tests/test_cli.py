import json

import pytest

from contentsep import cli, separation, speaker_encoder
from contentsep.tensorio import load_tensors

TINY_CFG = """
classifiers = LDA
corpus_speakers = 8
corpus_sessions = 2
corpus_utterances = 2
corpus_duration = 2.5
pretrain_speakers = 4
pretrain_utterances = 2
speaker_pretrain_steps = 2
speaker_finetune_steps = 2
speaker_batch = 3
separator_steps = 2
baseline_steps = 2
n_trials = 2
folds = 3
"""


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    assert cli.main(["--seed", "1", "gen-corpus", "--out", str(out), "--speakers", "4", "--utterances", "3", "--duration", "2.5"]) == 0
    return out


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_exp")
    path = root / "exp.cfg"
    path.write_text(TINY_CFG + f"artifact_dir = {root / 'artifacts'}\n")
    return path


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("preprocess", "gen-corpus", "train-speaker", "train-sep", "extract", "classify", "experiment", "plot", "report"):
        assert cmd in out


def test_preprocess(small_corpus, tmp_path, capsys):
    wavs = sorted((small_corpus / "wav").glob("*.wav"))[:2]
    out = tmp_path / "mels.cstc"
    assert cli.main(["preprocess", *map(str, wavs), "--preset", "speaker", "--vad", "--out", str(out)]) == 0
    mels = load_tensors(out)
    assert list(mels) == [w.stem for w in wavs]
    assert all(v.shape[0] == 40 for v in mels.values())


def test_train_speaker_prints_eer_report(small_corpus, tmp_path, capsys):
    ckpt = tmp_path / "spk.cstc"
    args = ["train-speaker", "--manifest", str(small_corpus / "manifest.csv"), "--out", str(ckpt), "--steps", "3"]
    assert cli.main(args + ["--speakers-per-batch", "3", "--utterances-per-speaker", "2"]) == 0
    report = speaker_encoder.parse_eer_report(capsys.readouterr().out)
    assert report["mode"] == "full" and report["steps"] == "3"
    assert 0.0 <= float(report["eer"]) <= 1.0
    # finetune from that checkpoint
    ft = tmp_path / "ft.cstc"
    args = ["train-speaker", "--manifest", str(small_corpus / "manifest.csv"), "--mode", "finetune", "--init", str(ckpt)]
    assert cli.main(args + ["--out", str(ft), "--steps", "2", "--speakers-per-batch", "3", "--utterances-per-speaker", "2"]) == 0
    assert speaker_encoder.parse_eer_report(capsys.readouterr().out)["mode"] == "finetune"


def test_train_sep_writes_progress(small_corpus, tmp_path, capsys):
    out = tmp_path / "sep.cstc"
    args = ["train-sep", "--manifest", str(small_corpus / "manifest.csv"), "--conditioning", "one-hot"]
    assert cli.main(args + ["--out", str(out), "--steps", "3", "--log-every", "1"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("step=")]
    assert [separation.parse_progress_line(l)["step"] for l in lines] == [0, 1, 2]
    assert separation.load_separator(out).config.cond_dim == 4
    assert cli.main(["train-sep", "--manifest", str(small_corpus / "manifest.csv"), "--out", str(out)]) == 1
    assert "--encoder" in capsys.readouterr().err


def test_experiment_report_compare(config_file, capsys):
    assert cli.main(["--config", str(config_file), "experiment", "--set", "conditioning=one-hot"]) == 0
    assert "LDA" in capsys.readouterr().out
    reports = config_file.parent / "artifacts" / "reports"
    first = reports / "content-one-hot-not-combined-seed0.json"
    saved = first.with_name("first.json")
    saved.write_text(first.read_text())
    assert cli.main(["--config", str(config_file), "experiment", "--set", "conditioning=one-hot"]) == 0
    capsys.readouterr()
    assert cli.main(["report", str(first), "--compare", str(saved)]) == 0
    assert "identical" in capsys.readouterr().out
    altered = json.loads(saved.read_text())
    altered["n_eval"] += 1
    saved.write_text(json.dumps(altered))
    assert cli.main(["report", str(first), "--compare", str(saved)]) == 1


def test_extract_classify_plot(config_file, tmp_path, capsys):
    emb = tmp_path / "emb.cstc"
    base = ["--config", str(config_file)]
    assert cli.main(base + ["extract", "--embedding", "speaker", "--conditioning", "pretrained", "--out", str(emb)]) == 0
    embs = load_tensors(emb)
    assert len(embs) == 16 and all(v.shape == (256,) for v in embs.values())
    assert set(json.loads(emb.with_suffix(".json").read_text())["labels"]) == set(embs)
    capsys.readouterr()
    report = tmp_path / "cls.json"
    args = ["--seed", "2", "classify", "--embeddings", str(emb), "--classifier", "LDA,DT", "--folds", "3", "--trials", "2"]
    assert cli.main(args + ["--out", str(report)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert sum(l.startswith("model=LDA fold=") for l in lines) == 4
    assert any(l.startswith("model=DT fold=ensembled accuracy=") for l in lines)
    assert set(json.loads(report.read_text())) == {"LDA", "DT"}
    png = tmp_path / "proj.png"
    assert cli.main(["plot", "--embeddings", str(emb), "--out", str(png), "--color-by", "speaker"]) == 0
    assert png.read_bytes()[:4] == b"\x89PNG"


def test_content_extract_keeps_code_shape(config_file, tmp_path):
    emb = tmp_path / "content.cstc"
    assert cli.main(["--config", str(config_file), "extract", "--embedding", "content", "--conditioning", "one-hot", "--out", str(emb)]) == 0
    assert {v.shape[0] for v in load_tensors(emb).values()} == {64}


def test_errors_exit_nonzero(tmp_path, capsys):
    assert cli.main(["classify", "--embeddings", str(tmp_path / "x.cstc"), "--classifier", "KNN"]) == 2
    assert cli.main(["report", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("folds = 4\n")
    assert cli.main(["--config", str(bad), "experiment"]) == 1
    assert "folds" in capsys.readouterr().err


def test_experiment_matrix_runs_every_condition(config_file, capsys):
    assert cli.main(["--config", str(config_file), "experiment", "--matrix", "sessions"]) == 0
    out = capsys.readouterr().out
    assert "content / finetuned / combined" in out and "content / finetuned / not-combined" in out
