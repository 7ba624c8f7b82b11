import csv
import json

import numpy as np
import pytest

from duconet.cli import build_parser, main
from duconet.imageio import read_rgb_png, write_mask_png, write_rgb_png
from duconet.network import DucoNetConfig, load_checkpoint
from duconet.synth import PerturbSpec

SUBCOMMANDS = ["synth", "train", "harmonize", "evaluate", "ablation-table", "correlation", "channel-stats", "weight-maps", "bt-rank"]


@pytest.fixture
def config_file(tmp_path):
    doc = {
        "model": DucoNetConfig.tiny().to_dict(),
        "train": {"epochs": 2, "batch_size": 4, "decay_epochs": [1], "seed": 3},
        "data": {"size": 8, "n_train": 6, "n_test": 2, "perturb": PerturbSpec(seed=5).to_dict()},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def trained(tmp_path, config_file):
    data = tmp_path / "data"
    assert main(["synth", "--config", str(config_file), "--out", str(data)]) == 0
    ckpt = tmp_path / "model.dhck"
    assert main(["train", "--config", str(config_file), "--data", str(data), "--out", str(ckpt)]) == 0
    return data, ckpt


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_documents_flags(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_unknown_flag_is_an_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bt-rank", "--pairs", "p.csv", "--out", "o.json", "--bogus"])
    assert exc.value.code == 2


def test_synth_writes_dataset(tmp_path, config_file):
    out = tmp_path / "d"
    assert main(["synth", "--config", str(config_file), "--out", str(out), "--n", "3"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n_samples"] == 3 and manifest["size"] == 8
    assert len(list(out.glob("*_comp.png"))) == 3


def test_train_writes_checkpoint_and_loss_curve(trained, tmp_path):
    data, ckpt = trained
    cfg, _ = load_checkpoint(ckpt)
    assert cfg.ablation_mode.value == "CMPix"
    rows = list(csv.reader(open(ckpt.with_suffix(".loss.csv"))))
    assert rows[0] == ["epoch", "mean_l1", "lr"] and len(rows) == 3
    assert (tmp_path / "model.epoch0001.dhck").exists()


def test_train_ablation_override(tmp_path, config_file, trained):
    data, _ = trained
    ckpt = tmp_path / "avg.dhck"
    assert main(["train", "--config", str(config_file), "--data", str(data), "--out", str(ckpt), "--ablation", "CMAvg"]) == 0
    assert load_checkpoint(ckpt)[0].ablation_mode.value == "CMAvg"


def test_train_size_mismatch_leaves_nothing(tmp_path, config_file):
    data = tmp_path / "big"
    assert main(["synth", "--out", str(data), "--n", "1"]) == 0  # default config: 64px
    ckpt = tmp_path / "x.dhck"
    assert main(["train", "--config", str(config_file), "--data", str(data), "--out", str(ckpt)]) == 1
    assert not ckpt.exists() and not ckpt.with_suffix(".loss.csv").exists()


def test_harmonize_and_size_mismatch(trained, tmp_path, capsys):
    data, ckpt = trained
    out = tmp_path / "h.png"
    assert main(["harmonize", "--ckpt", str(ckpt), "--comp", str(data / "00000_comp.png"),
                 "--mask", str(data / "00000_mask.png"), "--out", str(out)]) == 0
    img = read_rgb_png(out)
    assert img.shape == (8, 8, 3)
    write_rgb_png(tmp_path / "big.png", np.zeros((16, 16, 3)))
    write_mask_png(tmp_path / "bigm.png", np.zeros((16, 16)))
    bad = tmp_path / "bad.png"
    code = main(["harmonize", "--ckpt", str(ckpt), "--comp", str(tmp_path / "big.png"),
                 "--mask", str(tmp_path / "bigm.png"), "--out", str(bad)])
    assert code != 0 and not bad.exists()
    assert "8x8" in capsys.readouterr().err


def test_evaluate_is_deterministic(trained, tmp_path):
    data, ckpt = trained
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        assert main(["evaluate", "--ckpt", str(ckpt), "--data", str(data), "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()
    ids = [r[0] for r in csv.reader(open(a))]
    assert ids[-2:] == ["mean", "composite"] and len(ids) == 1 + 8 + 2


def test_ablation_table(tmp_path, config_file, trained):
    data, _ = trained
    out = tmp_path / "table.csv"
    assert main(["ablation-table", "--config", str(config_file), "--data", str(data), "--out", str(out),
                 "--modes", "BackboneOnly", "CMPix"]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["mode", "mse", "fmse", "psnr"]
    assert [r[0] for r in rows[1:]] == ["composite", "BackboneOnly", "CMPix"]


def test_correlation_command(tmp_path):
    from duconet.synth import illumination_reflectance_corpus

    for i, im in enumerate(illumination_reflectance_corpus(5, 16, seed=1)):
        write_rgb_png(tmp_path / f"im{i}.png", im)
    out = tmp_path / "corr.json"
    args = ["correlation", "--images", str(tmp_path / "*.png"), "--n", "200", "--seed", "4", "--out", str(out)]
    assert main(args) == 0
    first = out.read_text()
    assert main(args) == 0 and out.read_text() == first
    assert json.loads(first)["n_pixels"] == 200
    assert main(["correlation", "--images", str(tmp_path / "none*.png"), "--out", str(tmp_path / "c2.json")]) == 1
    assert not (tmp_path / "c2.json").exists()


def test_channel_stats_command(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"size": 16, "perturb": PerturbSpec.fixed(dL=20.0).to_dict()}}))
    data = tmp_path / "d"
    assert main(["synth", "--config", str(cfg), "--out", str(data), "--n", "8"]) == 0
    out = tmp_path / "s.json"
    assert main(["channel-stats", "--data", str(data), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["n_images"] == 8 and abs(doc["mean_abs_delta_L"] - 20) <= 0.5


def test_weight_maps_command(trained, tmp_path):
    data, ckpt = trained
    out = tmp_path / "maps"
    assert main(["weight-maps", "--ckpt", str(ckpt), "--comp", str(data / "00001_comp.png"),
                 "--mask", str(data / "00001_mask.png"), "--out", str(out)]) == 0
    assert len(list(out.glob("stage*_*.png"))) == 9


def test_bt_rank_command(tmp_path, capsys):
    pairs = tmp_path / "p.csv"
    pairs.write_text("winner_id,loser_id\n" + "A,B\n" * 3 + "B,A\n")
    out = tmp_path / "s.json"
    assert main(["bt-rank", "--pairs", str(pairs), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["scores"]["A"] - doc["scores"]["B"] == pytest.approx(np.log(3), abs=1e-6)
    pairs.write_text("A,B\nC,D\n")
    assert main(["bt-rank", "--pairs", str(pairs), "--out", str(tmp_path / "t.json")]) == 1
    assert not (tmp_path / "t.json").exists()


def test_bad_config_rejected(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"widths": 3}}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1
    assert not (tmp_path / "d").exists()
