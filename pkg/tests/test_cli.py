import csv
import json

from backflow.cli import main, sign_flip_rows


def write_config(tmp_path, **overrides):
    mapping = {
        "output_dir": str(tmp_path / "run"),
        "dataset": {"kind": "synthetic", "input_dim": 12, "num_classes": 4,
                    "per_class": 120, "spread": 3.0, "seed": 0},
        "model": {"kind": "softmax_linear", "input_dim": 12, "num_classes": 4},
        "regimes": ["standard"],
        "break_flags": ["no", "break"],
        "seeds": [0],
        "repeats": 5,
        "batch_size": 24,
        "probe_size": 96,
        "early_stop": {"enabled": False},
        "diagnostics": {"noncommute_k_max": 2, "probe_subset": 64},
    }
    mapping.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(mapping))
    return path, mapping


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_run_negative_preset_smoke(tmp_path, capsys):
    path, mapping = write_config(
        tmp_path,
        regimes=["negative"],
        break_flags=["no"],
        repeats=64,
        diagnostics={"enabled": False},
    )
    assert main(["run", str(path)]) == 0
    out = capsys.readouterr().out
    assert "negative" in out
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    cell = summary["cells"][0]
    assert set(cell["metrics"]) == {"tv", "js", "hellinger"}
    for kind in cell["metrics"]:
        assert cell["metrics"][kind]["mean"] == 0.0


def test_run_rerun_identical_modulo_timestamp(tmp_path):
    path, mapping = write_config(tmp_path, repeats=4)
    assert main(["run", str(path)]) == 0
    first = json.loads((tmp_path / "run" / "summary.json").read_text())
    first_lines = (tmp_path / "run" / "standard__no__seed0.jsonl").read_text().splitlines()

    assert main(["run", str(path)]) == 0
    second = json.loads((tmp_path / "run" / "summary.json").read_text())
    second_lines = (tmp_path / "run" / "standard__no__seed0.jsonl").read_text().splitlines()

    first["meta"].pop("created_at")
    second["meta"].pop("created_at")
    assert first == second
    assert first_lines[1:] == second_lines[1:]  # only the header line may differ
    assert json.loads(first_lines[0]).keys() == json.loads(second_lines[0]).keys()


def test_run_unknown_preset_fails_naming_field(tmp_path, capsys):
    path, _ = write_config(tmp_path, regimes=["fancy"])
    assert main(["run", str(path)]) == 2
    err = capsys.readouterr().err
    assert "regimes" in err and "fancy" in err


def test_run_missing_config(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.json")]) == 2
    assert "not found" in capsys.readouterr().err


def test_oracle_smoke(capsys):
    assert main(["oracle", "--seed", "1", "--count", "5"]) == 0
    out = capsys.readouterr().out
    assert "worst back-flow delta" in out


def test_oracle_zero_count(capsys):
    assert main(["oracle", "--seed", "1", "--count", "0"]) == 0
    assert "0 processes" in capsys.readouterr().out


def test_oracle_demo_witness(capsys):
    assert main(["oracle", "--seed", "2", "--count", "2", "--demo-witness"]) == 0
    out = capsys.readouterr().out
    assert "memoryful demo" in out
    assert "before break" in out


def test_plot_data_outputs(tmp_path):
    path, mapping = write_config(tmp_path, regimes=["standard", "negative"], seeds=[0, 1])
    assert main(["run", str(path)]) == 0
    run_dir = tmp_path / "run"
    assert main(["plot-data", str(run_dir)]) == 0
    plots = run_dir / "plots"
    for name in ("delta_hist.csv", "break_scatter.csv", "break_scatter_summary.csv",
                 "regime_means.csv", "noncommute_curves.csv", "cka_table.csv",
                 "trajectories.csv", "delta_vs_slope.csv", "delta_vs_alignment.csv",
                 "correlations.csv", "alignment_hist.csv"):
        assert (plots / name).exists(), name

    scatter = read_csv(plots / "break_scatter.csv")
    assert len(scatter) == 4  # (regime, seed) cells present in both conditions
    summary_rows = read_csv(plots / "break_scatter_summary.csv")
    assert int(summary_rows[0]["n_points"]) == 4
    assert int(summary_rows[0]["n_sign_flips"]) == sum(int(r["sign_flip"]) for r in scatter)

    means = read_csv(plots / "regime_means.csv")
    assert len(means) == 4  # (regime, condition) pooled rows
    curves = read_csv(plots / "noncommute_curves.csv")
    assert len(curves) == 2 * 2 * 2 * 2  # regimes x conditions x seeds x k values


def test_plot_data_single_cell_run(tmp_path):
    path, _ = write_config(tmp_path, regimes=["standard"], break_flags=["no"], seeds=[0])
    assert main(["run", str(path)]) == 0
    assert main(["plot-data", str(tmp_path / "run")]) == 0
    means = read_csv(tmp_path / "run" / "plots" / "regime_means.csv")
    assert len(means) == 1


def test_plot_data_missing_inputs_named(tmp_path, capsys):
    missing = tmp_path / "empty"
    missing.mkdir()
    assert main(["plot-data", str(missing)]) == 2
    assert "summary.json" in capsys.readouterr().err


def test_sign_flip_count_on_fixture():
    def cell(regime, seed, flag, mean):
        return {"regime": regime, "seed": seed, "break": flag,
                "metrics": {"tv": {"mean": mean}}}

    cells = [
        cell("a", 0, "no", +0.02), cell("a", 0, "break", -0.01),   # flip
        cell("a", 1, "no", +0.01), cell("a", 1, "break", +0.005),  # no flip
        cell("b", 0, "no", -0.02), cell("b", 0, "break", -0.01),   # no flip
        cell("b", 1, "no", +0.03), cell("b", 1, "break", -0.02),   # flip
        cell("c", 0, "no", -0.01), cell("c", 0, "break", +0.02),   # flip
        cell("c", 1, "no", +0.02), cell("c", 1, "break", +0.01),   # no flip
    ]
    rows, flips = sign_flip_rows(cells)
    assert len(rows) == 6
    assert flips == 3


def test_run_persistent_nan_guard_exits_nonzero(tmp_path, capsys, monkeypatch):
    import backflow.protocol as protocol
    from backflow.errors import NanGuardError

    def always_fail(params, state, grad, config):
        raise NanGuardError("injected failure")

    monkeypatch.setattr(protocol, "step", always_fail)
    path, _ = write_config(tmp_path, break_flags=["no"], repeats=3,
                           diagnostics={"enabled": False})
    assert main(["run", str(path)]) == 1
    captured = capsys.readouterr()
    assert "NaN guard" in captured.err
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["n_persistent_errors"] == 3


def test_workers_env_default(tmp_path, monkeypatch):
    from backflow.protocol import config_from_mapping

    _, mapping = write_config(tmp_path)
    monkeypatch.setenv("BACKFLOW_WORKERS", "3")
    assert config_from_mapping(mapping).workers == 3
    monkeypatch.delenv("BACKFLOW_WORKERS")
    assert config_from_mapping(mapping).workers == 1
    assert config_from_mapping({**mapping, "workers": 2}).workers == 2


def test_report_writes_markdown(tmp_path, capsys):
    path, _ = write_config(tmp_path, regimes=["negative"], break_flags=["no"], repeats=4,
                           diagnostics={"enabled": False})
    assert main(["run", str(path)]) == 0
    assert main(["report", str(tmp_path / "run")]) == 0
    out = capsys.readouterr().out
    assert "| negative | no |" in out
    assert (tmp_path / "run" / "report.md").exists()
