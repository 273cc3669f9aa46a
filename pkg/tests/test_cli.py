import csv

import pytest

from splitunet.cli import ConfigError, ExperimentConfig, main, resolve_config
from splitunet.data import digest, read_manifest

SMALL = ["--set", "n=12", "--set", "image_size=32", "--set", "epochs=1"]


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class TestConfig:
    def test_text_roundtrip(self):
        cfg = ExperimentConfig(noise_sigma=2.5, per_sample=True, attack_levels="0,4")
        back = ExperimentConfig.from_pairs(ExperimentConfig.parse_text(cfg.to_text()))
        assert back == cfg

    def test_all_problems_listed(self):
        with pytest.raises(ConfigError) as info:
            ExperimentConfig.from_pairs({"bogus": "1", "sites": "3", "dropout_p": "1.5", "lr": "x"})
        text = "\n".join(info.value.problems)
        for needle in ("bogus", "divisible by 3", "dropout_p", "lr"):
            assert needle in text
        assert len(info.value.problems) == 4

    def test_precedence(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("# comment\nepochs = 7\nseed = 3\n")
        cfg = resolve_config(str(p), ["seed=9"], flags={"epochs": None, "batch_size": 2})
        assert (cfg.epochs, cfg.seed, cfg.batch_size) == (7, 9, 2)

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("epochs 7\n")
        with pytest.raises(ConfigError, match="line 1"):
            resolve_config(str(p), [])


class TestGendata:
    def test_manifest_split_and_files(self, tmp_path):
        assert main(["gendata", "--size", "16", "--out", str(tmp_path / "d")]) == 0
        meta = read_manifest(tmp_path / "d" / "manifest.txt")
        assert meta["n"] == "484" and meta["split"] == "338/49/97"
        sample = tmp_path / "d" / "sample_0100"
        assert sorted(p.name for p in sample.iterdir()) == ["label.ten"] + [f"mod_{k}.ten" for k in range(4)]

    def test_rerun_same_hash_and_force(self, tmp_path):
        args = ["gendata", "--n", "10", "--size", "16", "--seed", "4", "--out", str(tmp_path / "d")]
        assert main(args) == 0
        first = digest(tmp_path / "d" / "manifest.txt"), digest(tmp_path / "d" / "sample_0003" / "mod_1.ten")
        assert main(args) == 1
        assert main(args + ["--force"]) == 0
        assert (digest(tmp_path / "d" / "manifest.txt"), digest(tmp_path / "d" / "sample_0003" / "mod_1.ten")) == first

    def test_bad_size(self, tmp_path):
        assert main(["gendata", "--size", "20", "--out", str(tmp_path / "d")]) == 1


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--out", str(out)] + SMALL) == 0
    return out


class TestTrain:
    def test_layout(self, trained):
        names = {p.name for p in trained.iterdir()}
        assert {"config.txt", "metrics.csv", "checkpoints", "dumps"} <= names
        assert [r["split"] for r in rows(trained / "metrics.csv")] == ["train", "val"]
        assert len(list((trained / "dumps").glob("site*_level*.ten"))) == 20

    def test_rerun_from_config_is_bit_identical(self, trained, tmp_path):
        assert main(["train", "--config", str(trained / "config.txt"), "--out", str(tmp_path)]) == 0
        for rel in ["metrics.csv", "config.txt", "dumps/site2_level3.ten", "dumps/site0_input.ten"]:
            assert (tmp_path / rel).read_bytes() == (trained / rel).read_bytes(), rel

    def test_central_baseline(self, tmp_path):
        assert main(["train", "--out", str(tmp_path)] + SMALL + ["--set", "variant=unet_central"]) == 0
        assert (tmp_path / "checkpoints" / "final_unet.ckpt").exists()
        assert not (tmp_path / "dumps").exists()

    def test_no_skips_dumps_bottleneck_only(self, tmp_path):
        assert main(["train", "--out", str(tmp_path)] + SMALL + ["--set", "variant=split_no_skips"]) == 0
        assert sorted(p.name for p in (tmp_path / "dumps").glob("site0_*")) == ["site0_input.ten", "site0_level4.ten"]

    def test_validation_exit_code(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path), "--set", "sites=5", "--set", "noise_sigma=-1"]) == 1
        err = capsys.readouterr().err
        assert "divisible by 5" in err and "noise_sigma" in err


class TestAttack:
    def run(self, trained, out, *extra):
        return main(["attack", "--dumps", str(trained / "dumps"), "--checkpoint", str(trained / "checkpoints"),
                     "--steps", "1", "--out", str(out), "--set", "attack_sites=0,2", *extra])

    def test_smoke_and_layout(self, trained, tmp_path):
        assert self.run(trained, tmp_path) == 0
        table = rows(tmp_path / "ssim.csv")
        assert [(r["site"], r["level"]) for r in table] == [(k, str(i)) for k in "02" for i in range(5)]
        assert all(-1 <= float(r["mean_ssim"]) <= 1 for r in table)
        assert (tmp_path / "gallery" / "site2_level4_b0.pgm").exists()
        assert (tmp_path / "dumps" / "inversion_site0_level0.ten").exists()

    def test_deterministic(self, trained, tmp_path):
        assert self.run(trained, tmp_path / "a", "--seed", "3") == 0
        assert self.run(trained, tmp_path / "b", "--seed", "3") == 0
        for rel in ["ssim.csv", "dumps/inversion_site2_level1.ten"]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_missing_files_listed(self, trained, tmp_path, capsys):
        assert main(["attack", "--dumps", str(trained / "dumps"), "--checkpoint", str(tmp_path / "none"),
                     "--out", str(tmp_path / "o")]) == 2
        assert "encoder_site0.ckpt" in capsys.readouterr().err

    def test_needs_inputs(self, tmp_path):
        assert main(["attack", "--out", str(tmp_path)]) == 1


class TestSweep:
    def test_rows_per_value_level_site(self, tmp_path):
        args = ["sweep", "--param", "dropout_p", "--values", "0", "0.5", "--out", str(tmp_path)] + SMALL
        args += ["--set", "attack_steps=1", "--set", "attack_sites=1,3", "--set", "attack_levels=0,2"]
        assert main(args) == 0
        table = rows(tmp_path / "sweep.csv")
        assert len(table) == 2 * 2 * 2
        assert {r["defense"] for r in table} == {"none", "dropout_p=0.5"}
        assert (tmp_path / "config.txt").read_text().count("epochs = 1") == 1

    def test_defaults_short_budget(self):
        from splitunet.cli import SWEEP_BASE
        assert (SWEEP_BASE.epochs, SWEEP_BASE.n) == (3, 200)

    def test_empty_values_rejected(self, tmp_path):
        assert main(["sweep", "--param", "noise_sigma", "--values", "--out", str(tmp_path)]) == 1
        assert main(["sweep", "--param", "noise_sigma", "--values", "a", "--out", str(tmp_path)]) == 1


def test_report(trained, capsys):
    assert main(["report", str(trained)]) == 0
    assert "validation dice" in capsys.readouterr().out
    assert main(["report", str(trained / "nope")]) == 2
