"""Command-line surface: gen, run, verify, analyze, and their contracts."""

from __future__ import annotations

import json

import pytest

from retta.cli import main


def write_stream_config(path, **overrides):
    cfg = {
        "num_classes": 3,
        "num_domains": 2,
        "dim": 12,
        "samples_per_domain": 50,
        "seed": 0,
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


def write_adapter_config(path, **overrides):
    cfg = {
        "capacity_per_class": 20,
        "retrieve_k": 2,
        "beta": 5.0,
        "lr": 0.01,
        "batch_size": 25,
        "seed": 0,
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def dataset_dir(tmp_path):
    cfg_path = write_stream_config(tmp_path / "stream.json")
    out = tmp_path / "data"
    assert main(["gen", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


def test_gen_writes_dataset_metadata_bank_and_manifest(tmp_path, dataset_dir):
    names = {p.name for p in dataset_dir.iterdir()}
    assert {"dataset.jsonl", "metadata.json", "textbank.json", "manifest.json"} <= names
    meta = json.loads((dataset_dir / "metadata.json").read_text())
    assert meta["C"] == 3 and meta["d"] == 12
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    assert manifest["command"] == "gen"
    assert set(manifest["outputs"]) == {"dataset.jsonl", "metadata.json", "textbank.json"}


def test_gen_same_config_and_seed_is_byte_identical(tmp_path):
    cfg_path = write_stream_config(tmp_path / "stream.json")
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["gen", "--config", str(cfg_path), "--out", str(out1)]) == 0
    assert main(["gen", "--config", str(cfg_path), "--out", str(out2)]) == 0
    for name in ("dataset.jsonl", "metadata.json", "textbank.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_gen_rejects_inconsistent_dims_with_named_constraint(tmp_path, capsys):
    cfg_path = write_stream_config(tmp_path / "bad.json", class_dims=8, domain_dims=6)
    code = main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "x")])
    assert code == 1
    assert "class_dims" in capsys.readouterr().err


def test_gen_rejects_unknown_field(tmp_path, capsys):
    cfg_path = write_stream_config(tmp_path / "bad.json", num_classs=4)
    assert main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "x")]) == 1
    assert "num_classs" in capsys.readouterr().err


def test_seed_flag_overrides_config_seed(tmp_path):
    cfg_path = write_stream_config(tmp_path / "stream.json", seed=0)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["gen", "--config", str(cfg_path), "--out", str(out1), "--seed", "5"]) == 0
    write_stream_config(tmp_path / "stream2.json", seed=5)
    assert main(["gen", "--config", str(tmp_path / "stream2.json"), "--out", str(out2)]) == 0
    assert (out1 / "dataset.jsonl").read_bytes() == (out2 / "dataset.jsonl").read_bytes()


def test_run_writes_report_csvs_trace_and_manifest(tmp_path, dataset_dir):
    acfg = write_adapter_config(tmp_path / "adapter.json")
    out = tmp_path / "run"
    code = main(["run", "--dataset", str(dataset_dir), "--method", "retta",
                 "--config", str(acfg), "--out", str(out)])
    assert code == 0
    names = {p.name for p in out.iterdir()}
    assert {"report.json", "per_domain.csv", "composition.csv", "bins.csv",
            "trace.jsonl", "manifest.json"} <= names
    report = json.loads((out / "report.json").read_text())
    assert 0.0 <= report["macro_average"] <= 1.0
    assert len(report["composition_matrix"]) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["method"] == "retta"
    assert manifest["config"]["capacity_per_class"] == 20  # defaults echoed, no silence


def test_run_is_reproducible_byte_for_byte(tmp_path, dataset_dir):
    acfg = write_adapter_config(tmp_path / "adapter.json")
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["run", "--dataset", str(dataset_dir), "--method", "retta",
                     "--config", str(acfg), "--out", str(out)]) == 0
        outs.append(out)
    for fname in ("report.json", "per_domain.csv", "composition.csv", "bins.csv",
                  "trace.jsonl", "manifest.json"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


def test_run_all_methods_execute(tmp_path, dataset_dir):
    acfg = write_adapter_config(tmp_path / "adapter.json")
    for method in ("retta-no-pb", "retta-no-dc", "retta-no-pb-dc", "retta-no-entw",
                   "retta-no-simw", "entmin", "zeroshot"):
        out = tmp_path / f"run-{method}"
        assert main(["run", "--dataset", str(dataset_dir), "--method", method,
                     "--config", str(acfg), "--out", str(out)]) == 0


def test_run_zeroshot_matches_predict_only_pass(tmp_path, dataset_dir):
    acfg = write_adapter_config(tmp_path / "adapter.json")
    out = tmp_path / "zs"
    assert main(["run", "--dataset", str(dataset_dir), "--method", "zeroshot",
                 "--config", str(acfg), "--out", str(out)]) == 0
    rows = [json.loads(line) for line in (out / "trace.jsonl").read_text().splitlines()]
    assert all(r["predicted"] == r["zero_shot"] for r in rows)


def test_run_rejects_unknown_method(tmp_path, dataset_dir, capsys):
    acfg = write_adapter_config(tmp_path / "adapter.json")
    code = main(["run", "--dataset", str(dataset_dir), "--method", "retta",
                 "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")])
    assert code == 1


def test_run_rejects_missing_dataset(tmp_path, capsys):
    acfg = write_adapter_config(tmp_path / "adapter.json")
    code = main(["run", "--dataset", str(tmp_path / "nowhere"), "--method", "retta",
                 "--config", str(acfg), "--out", str(tmp_path / "x")])
    assert code == 1
    assert "dataset" in capsys.readouterr().err


def test_analyze_recomputes_composition_and_bins(tmp_path, dataset_dir):
    acfg = write_adapter_config(tmp_path / "adapter.json")
    run_dir = tmp_path / "run"
    assert main(["run", "--dataset", str(dataset_dir), "--method", "retta",
                 "--config", str(acfg), "--out", str(run_dir)]) == 0
    out = tmp_path / "analysis"
    assert main(["analyze", "--run", str(run_dir), "--out", str(out)]) == 0
    assert (out / "composition.csv").exists()
    assert (out / "bins.csv").exists()
    # composition recomputed from the trace matches the run's own
    assert (out / "composition.csv").read_bytes() == (run_dir / "composition.csv").read_bytes()


def test_analyze_requires_a_trace(tmp_path, capsys):
    code = main(["analyze", "--run", str(tmp_path), "--out", str(tmp_path / "x")])
    assert code == 1
    assert "trace" in capsys.readouterr().err


def test_verify_all_suites_pass(capsys):
    assert main(["verify", "--suite", "all"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3
    for name in ("grad", "theorem", "cache"):
        assert f"PASS {name}" in out


def test_verify_single_suite(capsys):
    assert main(["verify", "--suite", "grad"]) == 0
    out = capsys.readouterr().out
    assert "PASS grad" in out and "theorem" not in out
