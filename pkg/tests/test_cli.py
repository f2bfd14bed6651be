"""End-to-end tests for the hci-coda command line on the tiny benchmark."""

import json

import pandas as pd
import pytest
import yaml

from hci_coda.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, _write_json, build_parser, main
from hci_coda.dataset import split_by_scope, write_manifest
from hci_coda.evaluation.cka import CKAMatrix
from hci_coda.exceptions import IOFailure
from hci_coda.training.records import read_status


@pytest.fixture
def write_config(tmp_path, tiny_config_data):
    """Write a tiny config for *method* and return its path."""

    def write(method="coda", **changes):
        data = tiny_config_data(tmp_path / "runs", method)
        data.update(changes)
        path = tmp_path / f"{method}.yaml"
        path.write_text(yaml.safe_dump(data))
        return str(path)

    return write


def run(*args):
    return main([*args, "--log-level", "WARNING"])


class TestParser:
    """Test cases for argument parsing."""

    def test_commands(self):
        parser = build_parser()
        for command in ("generate", "train", "adapt", "eval", "matrix", "granularity", "summarize", "plot"):
            assert parser.parse_args([command]).command == command

    def test_repeatable_overrides(self):
        parsed = build_parser().parse_args(["train", "--set", "a=1", "--set", "b=2", "--seed", "3"])
        assert parsed.overrides == ["a=1", "b=2"]
        assert parsed.seed == 3

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as info:
            main(["bogus"])
        assert info.value.code == 2


class TestExitCodes:
    """Test cases for configuration and runtime failures."""

    def test_invalid_value(self, write_config):
        assert run("train", "--config", write_config(), "--set", "plan.pretrain.epochs=0") == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert run("train", "--config", str(tmp_path / "none.yaml")) == EXIT_CONFIG

    def test_unknown_source(self, write_config):
        assert run("train", "--config", write_config(), "--set", "dataset.source=S9") == EXIT_CONFIG

    def test_cross_batch_method_on_single_batch_data(self, tmp_path, tiny_index, tiny_config_data):
        subset, _ = split_by_scope(tiny_index, "batch", ["S1B1", "S2B1"])
        manifest = write_manifest(subset, tmp_path / "single" / "manifest.csv")
        data = tiny_config_data(tmp_path / "runs", "coda")
        data["dataset"] = {"manifest": str(manifest)}
        path = tmp_path / "single.yaml"
        path.write_text(yaml.safe_dump(data))
        assert run("train", "--config", str(path)) == EXIT_CONFIG

    def test_empty_manifest(self, tmp_path, tiny_config_data):
        manifest = tmp_path / "empty" / "manifest.csv"
        manifest.parent.mkdir()
        manifest.write_bytes(b"")
        data = tiny_config_data(tmp_path / "runs", "oda")
        data["dataset"] = {"manifest": str(manifest)}
        path = tmp_path / "empty.yaml"
        path.write_text(yaml.safe_dump(data))
        assert run("train", "--config", str(path)) == EXIT_RUNTIME

    def test_report_write_failure_is_io_failure(self, tmp_path):
        with pytest.raises(IOFailure, match="report.json"):
            _write_json({"accuracy": 1.0}, tmp_path / "gone" / "report.json")

    def test_adapt_before_train(self, write_config):
        assert run("adapt", "--config", write_config("oda")) == EXIT_RUNTIME

    def test_summarize_without_metrics(self, write_config):
        assert run("summarize", "--config", write_config()) == EXIT_RUNTIME

    def test_plot_missing_input(self, tmp_path, write_config):
        assert run("plot", "--config", write_config(), str(tmp_path / "none.csv")) == EXIT_RUNTIME


class TestWorkflow:
    """Test cases for generate, train, adapt and eval."""

    def test_generate(self, tmp_path, write_config, capsys):
        assert run("generate", "--config", write_config()) == EXIT_OK
        manifest = tmp_path / "runs" / "data" / "manifest.csv"
        assert manifest.is_file()
        assert str(manifest) in capsys.readouterr().out
        assert len(pd.read_csv(manifest)) == 64

    def test_train_adapt_eval(self, tmp_path, write_config):
        # without a validation split every treatment keeps wells in both batches
        config = write_config("coda")
        common = ["--config", config, "--set", "plan.val_fraction=0.0"]
        runs = tmp_path / "runs"

        assert run("train", *common) == EXIT_OK
        train_dir = runs / "train" / "coda" / "seed0" / "S1"
        status = read_status(train_dir)
        assert status["status"] == "complete"
        assert set(status["checkpoints"]) == {"pretrain", "head"}
        assert 0.0 <= status["extra"]["test"]["accuracy"] <= 1.0

        assert run("adapt", *common) == EXIT_OK
        adapt_dir = runs / "adapt" / "coda" / "seed0" / "S1-S2"
        adapted = read_status(adapt_dir)
        assert adapted["extra"]["objectives"] == {"S2": "dino_cb"}
        assert "adapt:source:S2" in adapted["checkpoints"]

        assert run("eval", *common) == EXIT_OK
        eval_dir = runs / "eval" / "coda" / "seed0" / "S1-S2"
        report = json.loads((eval_dir / "report.json").read_text())
        assert report["n_samples"] == 32
        assert 0.0 <= report["accuracy"] <= 1.0
        assert len(pd.read_csv(eval_dir / "per_class.csv")) == 2
        assert len(pd.read_csv(eval_dir / "embeddings.csv")) == 32
        assert CKAMatrix.load(eval_dir / "cka.csv").values.shape == (2, 2)
        assert (eval_dir / "log.txt").is_file()

    def test_completed_run_is_not_repeated(self, tmp_path, write_config):
        config = write_config("dual_dino")
        assert run("train", "--config", config) == EXIT_OK
        record = tmp_path / "runs" / "train" / "dual_dino" / "seed0" / "S1" / "record.json"
        before = record.read_text()
        assert run("train", "--config", config) == EXIT_OK
        assert record.read_text() == before

    def test_supervised_in_domain(self, tmp_path, write_config):
        config = write_config("supervised")
        common = ["--config", config, "--set", "dataset.target=S1"]
        assert run("train", *common) == EXIT_OK
        assert run("eval", *common) == EXIT_OK
        report = json.loads((tmp_path / "runs" / "eval" / "supervised" / "seed0" / "S1-S1" / "report.json").read_text())
        # the held-out test split of S1: one well per treatment, two sites each
        assert report["n_samples"] == 8

    def test_adaptive_method_needs_another_target(self, write_config):
        assert run("eval", "--config", write_config("oda"), "--set", "dataset.target=S1") == EXIT_CONFIG

    def test_ttt(self, tmp_path, write_config):
        config = write_config("ttt")
        assert run("train", "--config", config) == EXIT_OK
        assert run("adapt", "--config", config) == EXIT_OK
        logits = pd.read_csv(tmp_path / "runs" / "adapt" / "ttt" / "seed0" / "S1-S2" / "logits.csv")
        assert list(logits.columns) == ["id", "l0", "l1"]
        assert len(logits) == 32
        assert run("eval", "--config", config) == EXIT_OK


class TestGridCommands:
    """Test cases for matrix, summarize, granularity and plot."""

    def test_matrix_then_summarize(self, tmp_path, write_config):
        config = write_config("dual_dino")
        assert run("matrix", "--config", config, "--set", "eval.methods=[supervised, dual_dino]") == EXIT_OK
        matrix_dir = tmp_path / "runs" / "matrix"
        metrics = pd.read_csv(matrix_dir / "metrics.csv")
        # 2 methods x 4 cells x 2 metrics
        assert len(metrics) == 16
        assert (matrix_dir / "table_accuracy.csv").is_file()
        improvements = pd.read_csv(matrix_dir / "improvements.csv")
        assert improvements["method"].tolist() == ["dual_dino"]
        assert run("summarize", "--config", config) == EXIT_OK

    def test_granularity(self, tmp_path, write_config):
        config = write_config("oda")
        assert run("granularity", "--config", config, "--set", "eval.levels=[source, plate]") == EXIT_OK
        table = pd.read_csv(tmp_path / "runs" / "granularity" / "granularity.csv")
        assert set(table["level"]) == {"none", "source", "plate"}
        assert set(table["seed"]) == {0}

    def test_granularity_rejects_mae_methods(self, write_config):
        assert run("granularity", "--config", write_config("ttt")) == EXIT_CONFIG

    def test_plot(self, tmp_path, write_config):
        pytest.importorskip("matplotlib")
        pytest.importorskip("seaborn")
        config = write_config("dual_dino")
        assert run("granularity", "--config", write_config("oda"), "--set", "eval.levels=[source]") == EXIT_OK
        figures = tmp_path / "figures"
        assert run("plot", "--config", config, "--plot-dir", str(figures)) == EXIT_OK
        assert (figures / "granularity_granularity.png").is_file()
