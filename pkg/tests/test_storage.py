"""On-disk formats: round trips, byte identity, malformed-input errors."""

import numpy as np
import pytest

from ardlab.config import bivariate_pair
from ardlab.diagnostics import DiagnosticsReport
from ardlab.errors import DatasetFormatError
from ardlab.models import make_chunk_models, predict
from ardlab.ode import DEFAULT_GRID, make_pairs_bi, make_pairs_causal
from ardlab.storage import (
    emit_report,
    load_dataset,
    load_loss_trace,
    load_models,
    read_report_csv,
    save_dataset,
    save_loss_trace,
    save_models,
)

DIST = bivariate_pair(0.8)


def small_dataset(seed=0):
    return make_pairs_causal(DIST, DEFAULT_GRID, count=6, steps=8, seed=seed)


def small_models(seed=0):
    models = make_chunk_models(
        DIST.spec, role="generator", m=12, seed=seed, parameterization="anchored"
    )
    rng = np.random.default_rng(seed)
    for i in (1, 2):
        models.member(i).theta[:] = rng.standard_normal(models.member(i).theta.shape)
    return models


# ---------------------------------------------------------------------------
# pair datasets
# ---------------------------------------------------------------------------


def test_dataset_round_trip_exact(tmp_path):
    ds = small_dataset()
    path = tmp_path / "pairs.jsonl"
    save_dataset(ds, path)
    loaded = load_dataset(path)
    assert loaded.provenance == ds.provenance
    assert loaded.spec == ds.spec
    assert loaded.grid.times == ds.grid.times
    assert loaded.metadata == ds.metadata
    assert len(loaded.records) == len(ds.records)
    for a, b in zip(ds.records, loaded.records):
        assert a.chunk_index == b.chunk_index and a.seed == b.seed
        assert np.array_equal(a.prefix, b.prefix)
        assert np.array_equal(a.endpoint, b.endpoint)
        for t in DEFAULT_GRID:
            assert np.array_equal(a.snapshots[t], b.snapshots[t])


def test_dataset_save_load_save_is_byte_identical(tmp_path):
    ds = make_pairs_bi(DIST, DEFAULT_GRID, count=5, steps=8, seed=1)
    first = tmp_path / "a.jsonl"
    second = tmp_path / "b.jsonl"
    save_dataset(ds, first)
    save_dataset(load_dataset(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_dataset_malformed_line_reports_lineno(tmp_path):
    path = tmp_path / "pairs.jsonl"
    save_dataset(small_dataset(), path)
    lines = path.read_text().splitlines()
    lines[3] = lines[3][:-10]  # truncate a record
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="line 4"):
        load_dataset(path)


def test_dataset_header_checks(tmp_path):
    path = tmp_path / "pairs.jsonl"
    path.write_text("")
    with pytest.raises(DatasetFormatError, match="empty"):
        load_dataset(path)
    path.write_text('{"format":"something-else","version":1}\n')
    with pytest.raises(DatasetFormatError, match="format"):
        load_dataset(path)
    path.write_text('{"format":"ardlab-pairs","version":99}\n')
    with pytest.raises(DatasetFormatError, match="version"):
        load_dataset(path)


def test_dataset_record_count_mismatch(tmp_path):
    path = tmp_path / "pairs.jsonl"
    save_dataset(small_dataset(), path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")  # drop one record
    with pytest.raises(DatasetFormatError, match="promises"):
        load_dataset(path)


# ---------------------------------------------------------------------------
# model checkpoints
# ---------------------------------------------------------------------------


def test_models_round_trip_predictions(tmp_path):
    models = small_models()
    path = tmp_path / "models.jsonl"
    save_models(models, path)
    loaded = load_models(path)
    assert loaded.role == models.role
    assert loaded.parameterization == models.parameterization
    x = np.array([[0.3], [-0.8]])
    y = np.array([[0.1], [0.2]])
    assert np.array_equal(
        predict(models.member(2), x, y, 0.5), predict(loaded.member(2), x, y, 0.5)
    )


def test_models_file_rejects_dataset_payload(tmp_path):
    ds_path = tmp_path / "pairs.jsonl"
    save_dataset(small_dataset(), ds_path)
    with pytest.raises(DatasetFormatError, match="format"):
        load_models(ds_path)


def test_models_bad_member_line(tmp_path):
    path = tmp_path / "models.jsonl"
    save_models(small_models(), path)
    lines = path.read_text().splitlines()
    lines[1] = lines[1].replace('"role":"generator"', '"role":"oracle"')
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="line 2"):
        load_models(path)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _reports():
    a = DiagnosticsReport(name="beta", config_digest="cafe01234567")
    a.add("metric_b", 0.123456789123, 0.01, 100, note="with, comma")
    a.add("metric_a", -1.0, 0.0, 4)
    b = DiagnosticsReport(name="alpha", config_digest="cafe01234567")
    b.add("only", 3.0, 0.5, 9, note='quote " inside')
    return [a, b]


def test_report_csv_round_trip(tmp_path):
    path = tmp_path / "report.csv"
    emit_report(_reports(), "csv", path)
    loaded = read_report_csv(path)
    assert set(loaded) == {"alpha", "beta"}
    entry = loaded["beta"]["metric_b"]
    assert entry.value == 0.123456789123
    assert entry.note == "with, comma"
    assert loaded["alpha"].config_digest == "cafe01234567"
    # rows are sorted by (report, metric): alpha first
    body = path.read_text().splitlines()
    assert body[1].startswith("alpha,")
    assert body[2].startswith("beta,metric_a")


def test_report_structured_text_one_record_per_line(tmp_path):
    path = tmp_path / "report.txt"
    emit_report(_reports(), "structured-text", path)
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith('report="alpha" metric="only" value=3.0')
    assert all("sample_count=" in line and "config_digest=" in line for line in lines)


def test_emit_report_rejects_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_report(_reports(), "yaml", tmp_path / "nope.yaml")


def test_read_report_rejects_bad_header(tmp_path):
    path = tmp_path / "report.csv"
    path.write_text("a,b,c\n")
    with pytest.raises(DatasetFormatError, match="header"):
        read_report_csv(path)


# ---------------------------------------------------------------------------
# loss traces
# ---------------------------------------------------------------------------


def test_loss_trace_round_trip(tmp_path):
    trace = np.array([1.5, 0.25, 0.125])
    path = tmp_path / "trace.csv"
    save_loss_trace(trace, path)
    assert np.array_equal(load_loss_trace(path), trace)
    assert path.read_text().splitlines()[0] == "step,loss"


def test_loss_trace_bad_header(tmp_path):
    path = tmp_path / "trace.csv"
    path.write_text("loss\n1.0\n")
    with pytest.raises(DatasetFormatError, match="header"):
        load_loss_trace(path)
