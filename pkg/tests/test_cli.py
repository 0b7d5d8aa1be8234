"""CLI subcommands exercised through main() with real tiny runs."""

import json

import pytest
import torch

from lungsound import cli
from lungsound import datasets as ds
from lungsound.errors import ConfigError
from lungsound.metrics import MetricsReport

torch.set_num_threads(1)

TINY_RUN_CONFIG = {
    "features": {"hop_s": 0.02, "stride_f": 16, "stride_t": 16},
    "mixstyle": {"insertion_depths": [0]},
    "model": {"embed_dim": 16, "num_layers": 2, "num_heads": 2},
    "train": {"epochs": 2, "warmup_epochs": 0, "batch_size": 8,
              "val_fraction": 0.0, "seed": 0},
}


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("clicorpus")
    rc = cli.main(["synth", "--out", str(out), "--steth", "24", "--phone", "24",
                   "--seed", "3"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, corpus_dir):
    cfg_path = tmp_path_factory.mktemp("cfg") / "run.json"
    cfg_path.write_text(json.dumps(TINY_RUN_CONFIG))
    out = tmp_path_factory.mktemp("run")
    rc = cli.main(["run", "--setup", "1",
                   "--manifest-phone", str(corpus_dir / "manifest_smartphone.csv"),
                   "--k", "2", "--config", str(cfg_path), "--out", str(out),
                   "--save-checkpoints", "--quiet"])
    assert rc == 0
    return out


class TestSynth:
    def test_writes_corpus(self, corpus_dir, capsys):
        for name in ("manifest_all.csv", "manifest_stethoscope.csv",
                     "manifest_smartphone.csv"):
            assert (corpus_dir / name).exists()
        assert len(ds.load_manifest(corpus_dir / "manifest_all.csv")) == 48

    def test_spec_file_with_seed_override(self, tmp_path, capsys):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(
            {"seed": 5, "counts": {"stethoscope": {"normal": 2, "wheeze": 2}}}))
        out = tmp_path / "corpus"
        rc = cli.main(["synth", "--out", str(out), "--spec", str(spec_path),
                       "--seed", "11"])
        assert rc == 0
        assert "wrote 4 clips" in capsys.readouterr().out
        manifest = ds.load_manifest(out / "manifest_all.csv")
        assert len(manifest) == 4
        assert "seed=11" in manifest.provenance


class TestSplit:
    def test_roundtrip(self, corpus_dir, tmp_path, capsys):
        out = tmp_path / "split.json"
        rc = cli.main(["split", "--manifest",
                       str(corpus_dir / "manifest_stethoscope.csv"),
                       "--k", "2", "--seed", "0", "--out", str(out)])
        assert rc == 0
        split = ds.FoldSplit.from_json_dict(json.loads(out.read_text()))
        assert len(split.folds) == 2
        sizes = [len(test) for _, test in split.folds]
        assert sum(sizes) == 24
        assert f"test fold sizes {sizes}" in capsys.readouterr().out

    def test_by_patient_flag(self, corpus_dir, tmp_path):
        out = tmp_path / "split.json"
        rc = cli.main(["split", "--manifest",
                       str(corpus_dir / "manifest_stethoscope.csv"),
                       "--k", "2", "--by-patient", "--out", str(out)])
        assert rc == 0


class TestRun:
    def test_emits_reports(self, run_dir, capsys):
        report = MetricsReport.from_json((run_dir / "report.json").read_text())
        aggs = report.aggregates(1)
        assert 0.0 <= aggs["score"].mean <= 100.0
        text = (run_dir / "report.txt").read_text()
        assert "Smartphone Only" in text and "Score" in text

    def test_saves_loadable_checkpoints(self, run_dir, corpus_dir, capsys):
        ckpt = run_dir / "setup1_fold1.pt"
        assert ckpt.exists() and (run_dir / "setup1_fold2.pt").exists()
        rc = cli.main(["evaluate", "--checkpoint", str(ckpt), "--manifest",
                       str(corpus_dir / "manifest_smartphone.csv")])
        assert rc == 0
        scored = json.loads(capsys.readouterr().out)
        assert set(scored) >= {"sensitivity", "specificity", "score", "f1",
                               "counts", "windows"}
        assert scored["windows"] == 24

    def test_requires_a_manifest(self, tmp_path, capsys):
        rc = cli.main(["run", "--setup", "1", "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_bad_setup_rejected_by_argparse(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["run", "--setup", "9", "--out", str(tmp_path / "x")])
        assert exc.value.code == 2


class TestReport:
    def test_renders_saved_report(self, run_dir, capsys):
        rc = cli.main(["report", "--report", str(run_dir / "report.json")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "Setup" in out and "Se (%)" in out


class TestErrorPaths:
    def test_domain_error_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("path,raw_label\n")  # missing required columns
        rc = cli.main(["split", "--manifest", str(bad), "--k", "2",
                       "--out", str(tmp_path / "s.json")])
        assert rc == 2
        assert "error:" in capsys.readouterr().err


class TestLoadRunConfig:
    def test_defaults_without_file(self):
        fcfg, mixstyle, model_overrides, tcfg = cli.load_run_config(None)
        assert fcfg.mel_bins == 64
        assert model_overrides == {}
        assert tcfg.epochs == 50

    def test_sections_and_tuple_coercion(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({
            "features": {"mel_bins": 32},
            "mixstyle": {"p": 0.7, "insertion_depths": [0, 3],
                         "epoch_windows": [[0, 10], None]},
            "model": {"embed_dim": 32},
            "train": {"epochs": 3, "warmup_epochs": 1, "betas": [0.9, 0.95]},
        }))
        fcfg, mixstyle, model_overrides, tcfg = cli.load_run_config(path)
        assert fcfg.mel_bins == 32
        assert mixstyle.p == 0.7
        assert mixstyle.insertion_depths == (0, 3)
        assert mixstyle.epoch_windows == ((0, 10), None)
        assert model_overrides == {"embed_dim": 32}
        assert tcfg.epochs == 3 and tcfg.betas == (0.9, 0.95)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"train": {"lr": 1.0}}))
        with pytest.raises(ConfigError):
            cli.load_run_config(path)


class TestParser:
    def test_serve_subcommand_wired(self):
        args = cli.build_parser().parse_args(["serve"])
        assert args.func is cli.cmd_serve
        assert args.config is None
