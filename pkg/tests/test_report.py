"""Test suite for reports and the command line"""
import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from app.engine import ResultRow, read_results, results_table
from app.engine.core import PipelineEngine
from app.engine.report import find_run_dirs, markdown_table, report
from app.errors import MissingArtifactsError
from app.config import build_run_config
from app.main import cli
from tests.conftest import tiny_run_data


def test_markdown_table():
    rows = [
        ResultRow(subset="Imbalanced (p=10)", n=20431, method="simsiam", accuracy=81.16, seed=0),
        ResultRow(subset="Imbalanced (p=10)", n=20431, method="simsiam+c+d", accuracy=83.35, seed=0),
    ]
    text = markdown_table(results_table(rows))
    lines = text.splitlines()
    assert lines[0] == "| subset | n | simsiam | simsiam+c+d |"
    assert lines[2] == "| Imbalanced (p=10) | 20431 | 81.16 | 83.35 |"


def test_report_requires_runs(tmp_path):
    with pytest.raises(MissingArtifactsError):
        report(tmp_path)
    with pytest.raises(MissingArtifactsError):
        report(tmp_path / "missing")


def test_report_over_grid_directory(artifact_root):
    for method in ("simsiam", "simsiam+c+d"):
        cfg = build_run_config(tiny_run_data(method=method, output_dir=f"grid/{method.replace('+', '')}", name=method))
        PipelineEngine(cfg, configure_logging=False).run()

    root = artifact_root / "grid"
    assert len(find_run_dirs(root)) == 2
    path = report(root)
    text = path.read_text()
    assert "simsiam+c+d" in text
    assert "Imbalanced (p=4)" in text

    pca = pd.read_csv(root / "plot_pca.csv")
    assert {"pc1", "pc2", "cluster", "true_label", "run"} <= set(pca.columns)
    losses = pd.read_csv(root / "plot_losses.csv")
    assert {"pretrain", "experts", "distill", "lineval"} <= set(losses["stage"])
    distribution = pd.read_csv(root / "plot_distribution.csv")
    assert len(distribution) == 2 * 4


def test_cli_run_and_report(artifact_root, tmp_path):
    config = tmp_path / "tiny.yaml"
    config.write_text(yaml.safe_dump(tiny_run_data()))
    runner = CliRunner()

    result = runner.invoke(cli, ["run", "--config", str(config), "--method", "simsiam", "--output-dir", "cli/run"])
    assert result.exit_code == 0, result.output
    assert "simsiam" in result.output
    rows = read_results(artifact_root / "cli/run/results.csv")
    assert rows[0].method == "simsiam"

    result = runner.invoke(cli, ["report", str(artifact_root / "cli/run")])
    assert result.exit_code == 0, result.output
    assert (artifact_root / "cli/run/report.md").exists()


def test_cli_stage_verbs(artifact_root, tmp_path):
    config = tmp_path / "tiny.yaml"
    config.write_text(yaml.safe_dump(tiny_run_data(output_dir="cli/staged")))
    runner = CliRunner()
    assert runner.invoke(cli, ["dataset", "build", "--config", str(config)]).exit_code == 0
    assert (artifact_root / "cli/staged/distribution.csv").exists()
    assert runner.invoke(cli, ["pretrain", "--config", str(config)]).exit_code == 0
    assert (artifact_root / "cli/staged/checkpoints/base.ckpt").exists()
    assert not (artifact_root / "cli/staged/results.csv").exists()


def test_cli_exit_codes(artifact_root, tmp_path):
    runner = CliRunner()
    config = tmp_path / "tiny.yaml"
    config.write_text(yaml.safe_dump(tiny_run_data()))

    assert runner.invoke(cli, ["run", "--config", str(config), "--set", "split.base=5"]).exit_code == 2
    assert runner.invoke(cli, ["run", "--config", str(config), "--set", "nonsense=1"]).exit_code == 2
    assert runner.invoke(cli, ["run", "--config", str(config), "--no-expert"]).exit_code == 2
    missing = runner.invoke(cli, ["run", "--config", str(config), "--set", f"dataset.source={tmp_path / 'none'}"])
    assert missing.exit_code == 10
    assert runner.invoke(cli, ["report", str(tmp_path / "empty")]).exit_code == 16


def test_cli_dataset_synth(tmp_path):
    result = CliRunner().invoke(
        cli, ["dataset", "synth", str(tmp_path / "corpus"), "--num-classes", "3", "--train-per-class", "5",
              "--test-per-class", "2", "--image-size", "8"],
    )
    assert result.exit_code == 0, result.output
    assert (tmp_path / "corpus" / "test_batch.bin").exists()
