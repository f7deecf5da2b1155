import json

import numpy as np
import pytest
from scipy.io import wavfile

from fmse.cli import default_threshold, main, parse_alpha_grid, read_validation_events
from fmse.errors import ConfigError

TINY = ["--set", "model.channels=4", "--set", "model.depth=1", "--set", "train.batch_size=2",
        "--set", "train.crop_frames=8", "--set", "train.val_interval=1", "--set", "train.ema_decay=0.5"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "corpus"
    assert main(["synth", str(root), "--n-utts", "5", "--n-val", "2", "--duration", "0.3", "--seed", "1"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    code = main(["train", "--corpus", str(corpus), "--objective", "x1", "--max-steps", "2",
                 "--output-dir", str(out), *TINY])
    assert code == 0
    (run_dir,) = out.iterdir()
    return run_dir


def test_synth_layout(corpus):
    assert len(list(corpus.rglob("*.wav"))) == 10
    assert json.loads((corpus / "manifest.json").read_text())["pairs"]


def test_train_outputs(trained):
    cfg = json.loads((trained / "resolved_config.json").read_text())
    assert cfg["train"]["objective"] == "x1" and cfg["train"]["max_steps"] == 2
    assert (trained / "last.pt").exists() and (trained / "best.pt").exists()
    lines = (trained / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2 and "val_metric" in json.loads(lines[-1])


def test_train_missing_corpus_exits_2(tmp_path, capsys):
    assert main(["train", "--output-dir", str(tmp_path)]) == 2
    assert "data.root" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  learning_rat: 0.1\n")
    assert main(["train", "--config", str(cfg), "--corpus", "x"]) == 2
    assert "train.learning_rat" in capsys.readouterr().err


def test_config_from_environment(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  widht: 3\n")
    monkeypatch.setenv("FMSE_CONFIG", str(cfg))
    assert main(["train", "--corpus", "x"]) == 2
    assert "model.widht" in capsys.readouterr().err


def test_bad_argument_exits_2():
    assert main(["train", "--objective", "score"]) == 2


def test_enhance_file_and_directory(trained, corpus, tmp_path, capsys):
    noisy_dir = corpus / "noisy_trainset_wav"
    first = sorted(noisy_dir.glob("*.wav"))[0]
    out = tmp_path / "one.wav"
    assert main(["enhance", str(trained / "last.pt"), str(first), str(out)]) == 0
    rate, data = wavfile.read(out)
    assert rate == 16000 and data.shape == wavfile.read(first)[1].shape
    out_dir = tmp_path / "all"
    out_dir.mkdir()
    assert main(["enhance", str(trained / "last.pt"), str(noisy_dir), str(out_dir)]) == 0
    assert len(list(out_dir.glob("*.wav"))) == 5
    assert "s\t->" in capsys.readouterr().out


def test_enhance_is_deterministic(trained, corpus, tmp_path):
    src = sorted((corpus / "noisy_trainset_wav").glob("*.wav"))[0]
    for name in ("a.wav", "b.wav"):
        assert main(["enhance", str(trained / "last.pt"), str(src), str(tmp_path / name)]) == 0
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()


def test_enhance_wrong_rate(trained, tmp_path, capsys):
    src = tmp_path / "in48.wav"
    wavfile.write(src, 48000, np.zeros(4800, dtype=np.float32))
    assert main(["enhance", str(trained / "last.pt"), str(src), str(tmp_path / "o.wav")]) == 2
    assert "--resample" in capsys.readouterr().err
    assert main(["enhance", str(trained / "last.pt"), str(src), str(tmp_path / "o.wav"), "--resample"]) == 0
    assert wavfile.read(tmp_path / "o.wav")[1].shape == (1600,)


def test_enhance_bad_checkpoint(tmp_path):
    bad = tmp_path / "x.pt"
    bad.write_bytes(b"junk")
    assert main(["enhance", str(bad), str(bad), str(tmp_path / "o.wav")]) == 1


def test_evaluate(trained, corpus, tmp_path):
    out = tmp_path / "eval"
    assert main(["evaluate", str(trained / "last.pt"), str(corpus), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["aggregate"]["SI-SDR"]["count"] == 2


def test_sweep(corpus, tmp_path):
    code = main(["sweep", "--objectives", "velocity,x1-edm", "--alphas", "0:0,0.1:0.01",
                 "--set", f"data.root={corpus}", "--set", f"output_dir={tmp_path}",
                 "--set", "train.max_steps=1", *TINY])
    assert code == 0
    (sweep,) = tmp_path.glob("sweep-*")
    summary = json.loads((sweep / "summary.json").read_text())
    assert len(summary["steps_to_threshold"]) == 4 and not summary["failures"]
    table = json.loads((sweep / "comparison.json").read_text())
    assert len(table["labels"]) == 4 and table["best"]["SI-SDR"]


def test_sweep_rejects_bad_input(tmp_path):
    assert main(["sweep", "--objectives", "score"]) == 2
    assert main(["sweep", "--alphas", "0.1"]) == 2


def test_plot_skips_malformed(tmp_path, capsys):
    log = tmp_path / "train_log.jsonl"
    log.write_text('{"step": 1, "loss": 1.0}\n{"step": 2, "val_metric": 3.5}\nnot json\n'
                   '{"step": 4, "val_metric": 4.0}\n')
    assert main(["plot", str(log), "--out", str(tmp_path / "curve.png")]) == 0
    assert "1 malformed" in capsys.readouterr().out
    for suffix in (".png", ".svg", ".csv"):
        assert (tmp_path / f"curve{suffix}").exists()
    rows, skipped = read_validation_events([log])
    assert [r[1:] for r in rows] == [(2, 3.5), (4, 4.0)] and skipped == 1


def test_helpers():
    assert parse_alpha_grid("0:0, 1e-3:1e-4") == [(0.0, 0.0), (1e-3, 1e-4)]
    with pytest.raises(ConfigError):
        parse_alpha_grid("1e-3")
    hist = {"a": [(1, 0.0), (2, 4.0)], "b": [(1, 1.0), (2, 2.0)]}
    assert default_threshold(hist) == pytest.approx(1.5)
    assert default_threshold({}) is None
