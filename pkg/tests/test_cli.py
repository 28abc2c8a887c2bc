import csv
import json

import numpy as np
import pytest

from iamnn.cli import main
from iamnn.config import RunConfig, format_config, parse_config
from iamnn.cost import count_flops
from iamnn.errors import ConfigError
from iamnn.network import count_params, desk_config, imagenet_config

TINY = """
[net]
num_classes = 3
input_size = 8

[stem]
channels = 4

[blocks]
channels = 4, 8
max_iterations = 2, 2

[act]
hidden = 8

[train]
batch_size = 6
learning_rate = 0.005

[data]
samples_per_class = 6
noise_level = 0.4
noise_pattern = alternate
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


class TestConfig:
    def test_defaults_are_desk(self):
        run = parse_config("")
        assert run.net == desk_config()

    def test_tiny_fields(self):
        run = parse_config(TINY)
        assert [b.channels for b in run.net.blocks] == [4, 8]
        assert [b.bottleneck_channels for b in run.net.blocks] == [1, 2]
        assert run.net.input_shape == (3, 8, 8)
        assert run.train.batch_size == 6 and run.train.learning_rate == 0.005
        assert run.data.noise_pattern == "alternate"

    def test_preset_with_override(self):
        run = parse_config("[net]\npreset = imagenet\n[blocks]\nmax_iterations = 1, 1, 1, 1\n")
        assert count_flops(run.net).total == count_flops(imagenet_config(), "min").total

    @pytest.mark.parametrize("text,key", [
        ("[net]\nwidth = 3\n", "net.width"),
        ("[train]\nlr = 0.1\n", "train.lr"),
        ("[model]\nx = 1\n", "model"),
        ("[train]\nmax_steps = many\n", "train.max_steps"),
        ("[data]\nsource = mnist\n", "data.source"),
    ])
    def test_bad_keys_are_named(self, text, key):
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert info.value.key == key

    def test_round_trip(self):
        run = parse_config(TINY)
        again = parse_config(format_config(run))
        assert again == run
        assert parse_config(format_config(RunConfig())) == RunConfig()


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestTrain:
    def test_five_steps(self, tiny_cfg, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(tiny_cfg), "--out-dir", str(out), "--max-steps", "5"]) == 0
        assert len(rows(out / "metrics.csv")) == 5
        assert (out / "final.iamn").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["steps"] == 5 and "flops_mean" in summary["eval"]

    def test_seed_repeatable(self, tiny_cfg, tmp_path):
        for name in "ab":
            main(["train", "--config", str(tiny_cfg), "--out-dir", str(tmp_path / name), "--max-steps", "4",
                  "--seed", "7"])
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()

    def test_invalid_key_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nlearning_rat = 0.1\n")
        assert main(["train", "--config", str(bad), "--out-dir", str(tmp_path / "o")]) == 2
        assert "train.learning_rat" in capsys.readouterr().err

    def test_missing_dataset_path(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[data]\nsource = cifar10\n")
        missing = tmp_path / "nowhere"
        assert main(["train", "--config", str(cfg), "--data-dir", str(missing), "--out-dir", str(tmp_path / "o")]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_negative_tau(self, tiny_cfg, tmp_path):
        assert main(["train", "--config", str(tiny_cfg), "--out-dir", str(tmp_path), "--tau", "-1"]) == 2

    def test_unknown_flag(self, tiny_cfg):
        with pytest.raises(SystemExit) as info:
            main(["train", "--config", str(tiny_cfg), "--out-dir", "x", "--bogus"])
        assert info.value.code == 2


class TestCount:
    def test_table_and_json_agree(self, capsys):
        assert main(["count", "--reference", "resnet18"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        report = json.loads(lines[-1])
        table = dict(line.split() for line in lines[:-1])
        assert int(table["flops.min"]) == report["flops_min"]
        assert int(table["params.total"]) == report["params"]["total"]
        assert int(table["resnet18.params"]) == report["reference"]["params"]

    def test_min_line_is_single_iteration(self, capsys):
        main(["count"])
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert report["flops_min"] == count_flops(desk_config(), [1, 1, 1, 1]).total
        assert report["params"]["total"] == count_params(desk_config()).total

    def test_imagenet_reduction(self, tmp_path, capsys):
        cfg = tmp_path / "in.ini"
        cfg.write_text("[net]\npreset = imagenet\n")
        main(["count", "--config", str(cfg), "--reference", "resnet152", "--out-dir", str(tmp_path)])
        report = json.loads((tmp_path / "count.json").read_text())
        assert report["reference"]["param_reduction"] >= 0.88

    def test_repeatable(self, capsys):
        main(["count", "--input-size", "64"])
        first = capsys.readouterr().out
        main(["count", "--input-size", "64"])
        assert capsys.readouterr().out == first


class TestAnalyze:
    @pytest.fixture
    def checkpoint(self, tiny_cfg, tmp_path):
        out = tmp_path / "run"
        main(["train", "--config", str(tiny_cfg), "--out-dir", str(out), "--max-steps", "3"])
        return out / "final.iamn"

    def test_outputs(self, tiny_cfg, checkpoint, tmp_path):
        out = tmp_path / "an"
        assert main(["analyze", "--config", str(tiny_cfg), "--checkpoint", str(checkpoint), "--out-dir", str(out)]) == 0
        ranking = rows(out / "ranking.csv")
        assert len(ranking) == 18
        flops = [int(r["flops"]) for r in ranking]
        assert flops == sorted(flops)
        assert sorted(int(r["id"]) for r in ranking) == list(range(18))
        for b in (1, 2):
            hist = rows(out / f"iterations_block{b}.csv")
            assert sum(int(r["count"]) for r in hist) == 18
        summary = json.loads((out / "summary.json").read_text())
        assert summary["flops_min"] == min(flops) and summary["flops_max"] == max(flops)

    def test_without_config_uses_checkpoint_echo(self, checkpoint, tmp_path):
        assert main(["eval", "--checkpoint", str(checkpoint)]) == 0

    def test_config_mismatch(self, checkpoint, tmp_path, capsys):
        other = tmp_path / "other.ini"
        other.write_text(TINY.replace("max_iterations = 2, 2", "max_iterations = 3, 2"))
        assert main(["analyze", "--config", str(other), "--checkpoint", str(checkpoint), "--out-dir",
                     str(tmp_path / "x")]) == 2

    def test_missing_checkpoint(self, tiny_cfg, tmp_path):
        assert main(["eval", "--config", str(tiny_cfg), "--checkpoint", str(tmp_path / "none.iamn")]) == 2


def test_help_documents_every_flag(capsys):
    for cmd, flags in {
        "train": ["--config", "--data-dir", "--out-dir", "--seed", "--max-steps", "--tau"],
        "count": ["--reference", "--input-size"],
        "analyze": ["--checkpoint"],
    }.items():
        with pytest.raises(SystemExit):
            main([cmd, "--help"])
        text = capsys.readouterr().out
        assert all(f in text for f in flags)
