"""Command-line surface: subcommand wiring, exit codes, seed override."""

import csv
import os

import pytest

from ueforge.cli import build_parser, main


def say(*argv):
    return main(list(argv))


class TestParser:
    def test_all_subcommands_present(self):
        parser = build_parser()
        sub = next(a for a in parser._actions
                   if isinstance(a, type(parser._subparsers._group_actions[0])))
        assert set(sub.choices) == {
            "gen-data", "pretrain", "sf-pretrain", "gen-ue", "train",
            "evaluate", "diagnose", "grid", "report",
        }

    def test_no_command_is_usage_error(self):
        assert main([]) == 2

    def test_unknown_flag_is_usage_error(self, tmp_path):
        assert say("gen-data", "--out-dir", str(tmp_path), "--bogus") == 2

    def test_help_exits_clean(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["--help"])
        assert exc.value.code == 0


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    assert say("gen-data", "--out-dir", data, "--n-train", "64",
               "--n-test", "32") == 0
    return {"root": root, "train": os.path.join(data, "train.ueds"),
            "test": os.path.join(data, "test.ueds")}


class TestPipelineCommands:
    def test_gen_data_wrote_both_splits(self, work):
        assert os.path.exists(work["train"])
        assert os.path.exists(work["test"])

    def test_pretrain_then_evaluate(self, work, capsys):
        ckpt = str(work["root"] / "pre.uewt")
        assert say("pretrain", "--data", work["train"], "--out", ckpt,
                   "--epochs", "2") == 0
        assert say("evaluate", "--checkpoint", ckpt, "--data", work["test"]) == 0
        out = capsys.readouterr().out
        assert "accuracy=" in out and "n=32" in out

    def test_sf_pretrain_writes_checkpoint(self, work):
        ckpt = str(work["root"] / "sf.uewt")
        assert say("sf-pretrain", "--data", work["train"], "--out", ckpt,
                   "--epochs", "2", "--lambda-sf", "1.0") == 0
        assert os.path.exists(ckpt)

    def test_gen_ue_train_diagnose(self, work):
        deltas = str(work["root"] / "emn.uepd")
        assert say("gen-ue", "--data", work["train"], "--out", deltas,
                   "--epochs", "1", "--inner-steps", "1") == 0
        ckpt = str(work["root"] / "victim.uewt")
        assert say("train", "--data", work["train"], "--perturb", deltas,
                   "--out", ckpt, "--epochs", "2") == 0
        out_csv = str(work["root"] / "diag.csv")
        assert say("diagnose", "--metric", "cossim", "--checkpoint", ckpt,
                   "--data", work["train"], "--perturb", deltas,
                   "--out", out_csv) == 0
        with open(out_csv, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["run_id", "metric", "stage_or_bin", "value"]
        assert len(rows) > 1

    def test_gen_ue_ssc_needs_reference(self, work):
        deltas = str(work["root"] / "ssc.uepd")
        assert say("gen-ue", "--data", work["train"], "--out", deltas,
                   "--method", "ssc", "--epochs", "1") == 2

    def test_missing_data_file_is_config_error(self, work):
        assert say("pretrain", "--data", str(work["root"] / "absent.ueds"),
                   "--out", str(work["root"] / "x.uewt")) == 2

    def test_corrupt_checkpoint_is_config_error(self, work):
        bad = str(work["root"] / "bad.uewt")
        with open(bad, "wb") as fh:
            fh.write(b"not a checkpoint")
        assert say("evaluate", "--checkpoint", bad, "--data", work["test"]) == 2


class TestGridAndReport:
    def test_grid_then_report(self, tmp_path, capsys):
        spec = tmp_path / "cell.cfg"
        spec.write_text(
            "name = cell\nn_train = 64\nn_test = 32\nepochs = 2\n"
            f"output_dir = {tmp_path / 'cell'}\n"
        )
        table = str(tmp_path / "table.csv")
        assert say("grid", str(spec), "--table", table) == 0
        assert os.path.exists(table)
        results = os.path.join(str(tmp_path / "cell"), "results.csv")
        merged = str(tmp_path / "merged.csv")
        assert say("report", results, "--out", merged) == 0
        with open(merged, newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 3

    def test_grid_failure_exits_3(self, tmp_path):
        spec = tmp_path / "bad.cfg"
        # 12 classes exceed the 8 shapes of family 0: the data stage fails.
        spec.write_text(
            "name = bad\nnum_classes = 12\nn_train = 64\nn_test = 32\n"
            f"epochs = 2\noutput_dir = {tmp_path / 'bad'}\n"
        )
        assert say("grid", str(spec), "--table", str(tmp_path / "t.csv")) == 3

    def test_bad_spec_file_is_config_error(self, tmp_path):
        spec = tmp_path / "broken.cfg"
        spec.write_text("garbage line without equals\n")
        assert say("grid", str(spec), "--table", str(tmp_path / "t.csv")) == 2


class TestSeedOverride:
    def test_env_seed_changes_gen_data(self, tmp_path, monkeypatch):
        a, b, c = (str(tmp_path / d) for d in "abc")
        assert say("gen-data", "--out-dir", a, "--n-train", "64",
                   "--n-test", "32", "--seed", "5") == 0
        monkeypatch.setenv("UEFORGE_SEED", "5")
        assert say("gen-data", "--out-dir", b, "--n-train", "64",
                   "--n-test", "32", "--seed", "0") == 0
        monkeypatch.delenv("UEFORGE_SEED")
        assert say("gen-data", "--out-dir", c, "--n-train", "64",
                   "--n-test", "32", "--seed", "0") == 0
        blob = {}
        for tag, root in (("a", a), ("b", b), ("c", c)):
            with open(os.path.join(root, "train.ueds"), "rb") as fh:
                blob[tag] = fh.read()
        assert blob["a"] == blob["b"]
        assert blob["a"] != blob["c"]

    def test_env_seed_must_be_integer(self, tmp_path, monkeypatch):
        monkeypatch.setenv("UEFORGE_SEED", "soon")
        assert say("gen-data", "--out-dir", str(tmp_path / "x"),
                   "--n-train", "64", "--n-test", "32") == 2
