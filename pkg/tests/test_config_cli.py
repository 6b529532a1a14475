import csv
import json

import numpy as np
import pytest

from densebam_gi.cli import attention_heatmap, main
from densebam_gi.config import ConfigError, ExperimentConfig, canonical
from densebam_gi.data.dataset import read_pgm

TINY = ["data.count=10", "data.target_height=32", "data.grammar_depth=1", "decoder.hidden=16", "decoder.embed=8",
        "decoder.width=8", "attention.attn_dim=8", "attention.cov_channels=4", "attention.kernel=3",
        "train.max_epochs=1", "train.batch_size=5", "train.lr=0.001"]


def tiny_config(tmp_path, extra=()):
    cfg = ExperimentConfig().with_overrides(TINY + list(extra) + [f'output_dir="{tmp_path / "run"}"'])
    path = tmp_path / "config.json"
    cfg.save(path)
    return path


# ---------------------------------------------------------------- config


def test_config_round_trip():
    cfg = ExperimentConfig().with_overrides(["train.lr=0.003", "encoder.bam_after=[1, 3]", "decoder.cell=\"gru\""])
    text = cfg.dumps()
    assert ExperimentConfig.loads(text) == cfg
    assert canonical(text) == text
    assert json.loads(text)["encoder"]["bam_after"] == [1, 3]


def test_partial_documents_take_defaults():
    text = '{"train": {"lr": 0.01}, "seed": 4}'
    cfg = ExperimentConfig.loads(text)
    assert cfg.train.lr == 0.01 and cfg.seed == 4 and cfg.decoder.hidden == ExperimentConfig().decoder.hidden
    assert canonical(text) == cfg.dumps()
    assert cfg.train_config().seed == 4


@pytest.mark.parametrize("text,key", [('{"trian": {}}', "trian"), ('{"train": {"lr0": 1}}', "lr0"),
                                      ('{"decoder": {"hidden": "big"}}', "hidden"),
                                      ('{"decoder": {"cell": "lstm"}}', "cell")])
def test_invalid_documents_name_the_key(text, key):
    with pytest.raises(ConfigError, match=key):
        ExperimentConfig.loads(text)


def test_override_errors():
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig().with_overrides(["train.momentun=0.5"])
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(["train.lr"])
    with pytest.raises(ConfigError):
        ExperimentConfig.loads("{not json")


def test_incompatible_sections_are_rejected():
    with pytest.raises(ValueError):
        ExperimentConfig().with_overrides(["train.lr=-1"])


# ---------------------------------------------------------------- commands


def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck"]) == 0
    assert "suites passed" in capsys.readouterr().out


def test_train_one_epoch_writes_checkpoint_and_one_row(tmp_path):
    assert main(["train", "--config", str(tiny_config(tmp_path))]) == 0
    run = tmp_path / "run"
    rows = list(csv.reader(open(run / "metrics.csv")))
    assert len(rows) == 2 and rows[1][0] == "1"
    assert (run / "best.ckpt").stat().st_size > 0 and (run / "final.ckpt").exists()
    report = json.loads((run / "report.json").read_text())
    assert report["seed"] == 0 and report["epochs"] == 1
    assert ExperimentConfig.load(run / "config.json") == ExperimentConfig.load(tmp_path / "config.json")


def test_eval_and_attention_dump(tmp_path):
    cfg = tiny_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 0
    ckpt = tmp_path / "run" / "final.ckpt"
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 0
    ev = json.loads((tmp_path / "run" / "eval.json").read_text())
    assert ev["samples"] == 1 and ev["exprate"] <= ev["le1"] <= ev["le2"] <= ev["le3"]
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--beam", "2"]) == 0
    assert main(["attention-dump", "--config", str(cfg), "--checkpoint", str(ckpt), "--index", "3"]) == 0
    dump = tmp_path / "run" / "attention_0003"
    meta = json.loads((dump / "meta.json").read_text())
    steps = sorted(dump.glob("step_*.pgm"))
    assert len(steps) == meta["steps"] >= 1
    assert read_pgm(steps[0]).shape == read_pgm(dump / "input.pgm").shape
    assert (dump / "prediction.txt").read_text().strip() == meta["prediction"]


def test_ablate_decoder_axis(tmp_path):
    assert main(["ablate", "--axis", "decoder", "--config", str(tiny_config(tmp_path))]) == 0
    rows = list(csv.DictReader(open(tmp_path / "run" / "ablation_decoder.csv")))
    assert [r["variant"] for r in rows] == ["gru", "gi_gru"]
    assert {"exprate", "le1", "le2", "le3", "wer", "epochs_to_loss_0.5"} <= set(rows[0])


def test_exit_codes(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "none.ckpt")]) == 2
    assert main(["train", "--config", str(cfg), "--set", "train.bogus=1"]) == 1
    assert "train.bogus" in capsys.readouterr().err
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"DBGI\x01")
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(bad)]) == 1
    with pytest.raises(SystemExit):
        main(["ablate", "--axis", "width"])


def test_cli_overrides_seed_and_output(tmp_path):
    cfg = tiny_config(tmp_path)
    out = tmp_path / "other"
    assert main(["train", "--config", str(cfg), "--seed", "7", "--out", str(out)]) == 0
    assert json.loads((out / "report.json").read_text())["seed"] == 7
    assert ExperimentConfig.load(out / "config.json").seed == 7


def test_heatmap_scales_peak_and_upsamples():
    alpha = np.array([[0.0, 0.25], [0.5, 0.25]])
    img = attention_heatmap(alpha, 4, 6)
    assert img.shape == (4, 6) and img.dtype == np.uint8
    assert img.max() == 255 and img[3, 0] == 255 and img[0, 0] == 0 and img[0, 5] == 128
