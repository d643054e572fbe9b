"""ExperimentConfig semantics and the command-line interface."""

import json

import numpy as np
import pytest

from ardlab.cli import main
from ardlab.config import (
    ExperimentConfig,
    ar1_sequence,
    component_tables,
    load_config,
    named_distribution,
    save_config,
    two_mode,
)
from ardlab.errors import ConfigError, GridError
from ardlab.models import TrainConfig
from ardlab.storage import read_report_csv


# ---------------------------------------------------------------------------
# config document semantics
# ---------------------------------------------------------------------------


def test_named_distributions():
    assert named_distribution("bivariate", rho=0.5).components[0].covariance[0, 1] == 0.5
    assert named_distribution("ar1", n_frames=4).spec.n_frames == 4
    assert named_distribution("two-mode").components[0].mean[0] == -3.0
    with pytest.raises(ConfigError):
        named_distribution("gaussian-process")
    with pytest.raises(ConfigError):
        named_distribution("bivariate", sigma=2.0)


def test_component_tables_round_trip():
    dist = ar1_sequence(4, 0.6)
    config = ExperimentConfig(
        components=component_tables(dist), n_frames=4, frame_dim=1, chunk_size=1
    )
    rebuilt = config.distribution()
    assert np.allclose(
        rebuilt.components[0].covariance, dist.components[0].covariance
    )


def test_config_dict_round_trip_and_digest():
    config = ExperimentConfig(ode="causal-ode", master_seed=7)
    clone = ExperimentConfig.from_dict(config.to_dict())
    assert clone == config
    assert clone.digest() == config.digest()
    assert len(config.digest()) == 12
    assert config.with_overrides(master_seed=8).digest() != config.digest()


def test_partial_document_fills_defaults():
    config = ExperimentConfig.from_dict({"master_seed": 3})
    assert config.dataset_size == ExperimentConfig().dataset_size
    assert config.train["diffusion"] == TrainConfig()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({"master_sed": 3})
    with pytest.raises(ConfigError, match="unknown stage"):
        ExperimentConfig.from_dict({"train": {"warmup": {}}})
    with pytest.raises(ConfigError, match="unknown train keys"):
        ExperimentConfig.from_dict({"train": {"cd": {"momentum": 0.9}}})


def test_mode_and_pipeline_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(diffusion="ddpm")
    with pytest.raises(ConfigError):
        ExperimentConfig(dmd="dmd")  # nothing to initialize the generator from
    assert ExperimentConfig(dmd="dmd", dmd_fresh_init=True).dmd == "dmd"
    with pytest.raises(GridError):
        ExperimentConfig(grid=(0.9, 0.5))


def test_bad_component_tables():
    with pytest.raises(ConfigError, match="component"):
        ExperimentConfig(components=({"weight": 1.0, "mean": [0.0]},))


def test_save_load_config(tmp_path):
    config = ExperimentConfig(
        components=component_tables(two_mode(2.0)), n_frames=1, ode="none",
        dataset_size=64,
    )
    path = tmp_path / "config.json"
    save_config(config, path)
    assert load_config(path) == config
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(path)


# ---------------------------------------------------------------------------
# CLI behavior (in-process)
# ---------------------------------------------------------------------------


def _gen_data_args(out, seed):
    return [
        "gen-data", "--ode", "causal-ode", "--dataset-size", "30",
        "--solver-steps", "16", "--master-seed", str(seed), "--output-dir", str(out),
    ]


def test_cli_gen_data_is_deterministic(tmp_path, capsys):
    first = tmp_path / "a"
    second = tmp_path / "b"
    assert main(_gen_data_args(first, 3)) == 0
    assert main(_gen_data_args(second, 3)) == 0
    capsys.readouterr()
    a = (first / "pairs_causal.jsonl").read_bytes()
    assert a == (second / "pairs_causal.jsonl").read_bytes()
    assert len(a) > 0


def test_cli_config_file_overrides_flags(tmp_path, capsys):
    doc = tmp_path / "config.json"
    doc.write_text(json.dumps({"master_seed": 9}))
    with_file = tmp_path / "file"
    plain = tmp_path / "plain"
    args = _gen_data_args(with_file, 5) + ["--config", str(doc)]
    assert main(args) == 0
    assert main(_gen_data_args(plain, 9)) == 0
    capsys.readouterr()
    assert (with_file / "pairs_causal.jsonl").read_bytes() == (
        plain / "pairs_causal.jsonl"
    ).read_bytes()


def test_cli_flags_override_defaults(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(_gen_data_args(out, 0) + ["--grid", "1.0,0.5"]) == 0
    capsys.readouterr()
    from ardlab.storage import load_dataset

    ds = load_dataset(out / "pairs_causal.jsonl")
    assert ds.grid.times == (1.0, 0.5)


def test_cli_distribution_flag(tmp_path, capsys):
    out = tmp_path / "out"
    args = [
        "gen-data", "--ode", "asymmetric-ode", "--distribution", "ar1",
        "--n-frames", "4", "--corr", "0.5", "--dataset-size", "10",
        "--solver-steps", "8", "--output-dir", str(out),
    ]
    assert main(args) == 0
    capsys.readouterr()
    from ardlab.storage import load_dataset

    ds = load_dataset(out / "pairs_bidirectional.jsonl")
    assert ds.spec.n_frames == 4
    assert len(ds.records) == 40


def test_cli_usage_and_config_errors_exit_2(tmp_path, capsys):
    assert main(["distill", "--ode", "none", "--output-dir", str(tmp_path)]) == 2
    assert main(_gen_data_args(tmp_path, 0)[:1] + ["--ode", "none"]) == 2
    assert main(_gen_data_args(tmp_path, 0) + ["--grid", "1.0,oops"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{broken")
    assert main(_gen_data_args(tmp_path, 0) + ["--config", str(bad)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--diffusion", "ddim"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["preset", "fig9-analog"])
    assert exc.value.code == 2
    capsys.readouterr()


def test_cli_io_errors_exit_3(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    args = [
        "distill", "--ode", "causal-ode", "--data", str(missing),
        "--output-dir", str(tmp_path),
    ]
    assert main(args) == 3
    assert main(["report", str(tmp_path / "nope.csv")]) == 3
    garbled = tmp_path / "garbled.jsonl"
    garbled.write_text("not a dataset\n")
    assert main(args[:4] + [str(garbled), "--output-dir", str(tmp_path)]) == 3
    capsys.readouterr()


def test_cli_audit_passes_and_writes_reports(tmp_path, capsys):
    out = tmp_path / "audit"
    args = [
        "audit", "--kind", "both", "--resamples", "800", "--anchors", "8",
        "--master-seed", "0", "--output-dir", str(out),
    ]
    assert main(args) == 0
    capsys.readouterr()
    reports = read_report_csv(out / "audit_report.csv")
    assert "injectivity_variance" in reports
    assert "df_mismatch" in reports
    assert reports["df_mismatch"]["oracle_kl"].value == pytest.approx(
        0.12645006108444623
    )
    assert (out / "audit_report.txt").exists()


def test_cli_report_round_trip(tmp_path, capsys):
    out = tmp_path / "audit"
    main([
        "audit", "--kind", "df-mismatch", "--resamples", "200",
        "--output-dir", str(out),
    ])
    capsys.readouterr()
    assert main(["report", str(out / "audit_report.csv")]) == 0
    printed = capsys.readouterr().out
    assert "df_mismatch.expected_kl" in printed
    dest = tmp_path / "re-emitted.txt"
    assert main([
        "report", str(out / "audit_report.csv"), "--format", "structured-text",
        "--out", str(dest),
    ]) == 0
    capsys.readouterr()
    assert dest.read_text().splitlines()[0].startswith('report="df_mismatch"')


def test_cli_train_distill_pipeline(tmp_path, capsys):
    out = tmp_path / "pipe"
    common = [
        "--feature-count", "64", "--master-seed", "4", "--output-dir", str(out),
        "--dataset-size", "200", "--solver-steps", "16",
    ]
    assert main(["gen-data", "--ode", "causal-ode"] + common) == 0
    assert main(["train", "--diffusion", "tf"] + common) == 0
    assert main(["distill", "--ode", "causal-ode"] + common) == 0
    capsys.readouterr()
    from ardlab.storage import load_loss_trace, load_models

    models = load_models(out / "models_generator.jsonl")
    assert models.role == "generator"
    assert load_loss_trace(out / "diffusion_trace.csv").size > 0
    assert load_loss_trace(out / "distill_trace.csv").size > 0
