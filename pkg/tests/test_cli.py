import csv
import json

import numpy as np
import pytest

from sscmr.cli import main
from sscmr.dataset import load_manifest


def tiny_config(tmp_path, label_mode="single_label", **extra):
    d = {
        "dataset": {"synthetic": {"d_x": 8, "d_y": 6, "d_c": 4, "samples_per_class": 20,
                                  "noise_sigma": 0.5, "label_mode": label_mode,
                                  "multi_label_extra_tag_prob": 0.2}},
        "lp": {"hidden": 16, "max_epochs": 5},
        "crl": {"hidden": 16, "epochs": 5},
    }
    d.update(extra)
    path = tmp_path / f"cfg_{label_mode}.json"
    path.write_text(json.dumps(d))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestSynth:
    def test_shapes_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "d"
        assert main(["synth", "--classes", "10", "--per-class", "30", "--out", str(out)]) == 0
        data = load_manifest(out / "manifest.json")
        assert data.labels.shape == (10, 300)
        assert "300 samples" in capsys.readouterr().out

    def test_byte_identical_repeat(self, tmp_path):
        for name in ("a", "b"):
            main(["synth", "--per-class", "5", "--seed", "3", "--out", str(tmp_path / name)])
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_other_profile_rejected(self, tmp_path, capsys):
        assert main(["synth", "--profile", "wiki", "--out", str(tmp_path)]) == 2
        assert "stage 'config'" in capsys.readouterr().err


class TestTrainEval:
    def test_supervised_has_no_lp_artifacts(self, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", tiny_config(tmp_path), "--out", str(out)]) == 0
        assert not (out / "lp").exists()
        assert (out / "report.json").exists() and (out / "config.json").exists()

    def test_paired_and_unpaired_differ(self, tmp_path):
        cfg = tiny_config(tmp_path)
        for mode in ("semi_paired", "semi_unpaired"):
            assert main(["train", "--config", cfg, "--mode", mode, "--labeled-fraction", "0.4",
                         "--out", str(tmp_path / mode)]) == 0
        a = (tmp_path / "semi_paired" / "noisy_labels.csv").read_bytes()
        b = (tmp_path / "semi_unpaired" / "noisy_labels.csv").read_bytes()
        assert a != b

    def test_eval_reproduces_report(self, tmp_path, capsys):
        out = tmp_path / "run"
        main(["train", "--config", tiny_config(tmp_path), "--out", str(out)])
        trained = json.loads((out / "report.json").read_text())["map"]
        capsys.readouterr()
        assert main(["eval", str(out), "--out", str(tmp_path / "again")]) == 0
        again = json.loads((tmp_path / "again" / "report.json").read_text())["map"]
        assert again == trained
        assert "I-Q" in capsys.readouterr().out

    def test_eval_bad_path(self, tmp_path, capsys):
        assert main(["eval", str(tmp_path / "missing")]) == 2
        assert "stage 'eval'" in capsys.readouterr().err

    def test_missing_out(self, tmp_path, capsys):
        assert main(["train", "--config", tiny_config(tmp_path)]) == 2
        assert "--out" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
        assert "stage 'config'" in capsys.readouterr().err


class TestHarnesses:
    def test_sweep_rows(self, tmp_path):
        out = tmp_path / "sw"
        assert main(["sweep", "--config", tiny_config(tmp_path), "--fractions", "0.3,0.6",
                     "--out", str(out)]) == 0
        rows = read_csv(out / "sweep.csv")[1:]
        for direction in ("I-Q", "T-Q"):
            assert sum(r[3] == direction for r in rows) == 2 * 2

    def test_ablation_table(self, tmp_path):
        out = tmp_path / "ab"
        assert main(["ablate", "--config", tiny_config(tmp_path), "--out", str(out)]) == 0
        table = read_csv(out / "ablation_table.csv")
        assert len(table) - 1 == 5
        assert {r[0] for r in table[1:]} == {"full", "no_lab", "no_cross", "no_sim_dsim",
                                              "no_unlab"}

    def test_unknown_toggle(self, tmp_path):
        assert main(["ablate", "--config", tiny_config(tmp_path), "--toggles", "no_magic"]) != 0

    def test_lp_compare_columns(self, tmp_path):
        out = tmp_path / "lc"
        cfg = tiny_config(tmp_path, "multi_label")
        assert main(["lp-compare", "--config", cfg, "--fractions", "0.5", "--out", str(out)]) == 0
        rows = read_csv(out / "lp_compare.csv")
        assert rows[0][3:] == ["l1", "bce", "wbce"]
        errs = np.array(rows[1][2:], dtype=float)
        assert np.all((errs >= 0) & (errs <= 1))

    def test_lp_compare_single_label(self, tmp_path, capsys):
        assert main(["lp-compare", "--config", tiny_config(tmp_path), "--fractions", "0.5"]) != 0
        assert "multi-label" in capsys.readouterr().err

    def test_bad_seed_count(self, tmp_path):
        assert main(["sweep", "--config", tiny_config(tmp_path), "--seeds", "0"]) == 2

    @pytest.mark.parametrize("argv", [["bogus"], ["sweep", "--fractions", "a,b"]])
    def test_argparse_errors(self, argv):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2
