import pytest

from qedgeproxy.cli import main
from qedgeproxy.emulator import load_topology, paper_topology


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_simulate_markdown(capsys):
    code, out, _ = run_cli(capsys, "simulate", "--scenario", "static", "--router", "qedge")
    assert code == 0
    assert "| QEdgeProxy |" in out and "100.00%" in out


def test_simulate_outputs(tmp_path, capsys):
    records, phases = tmp_path / "r.csv", tmp_path / "p.csv"
    code, out, _ = run_cli(capsys, "simulate", "--scenario", "dynamic", "--router", "nodeport",
                           "--out", str(records), "--phases", str(phases), "--format", "csv")
    assert code == 0 and out.startswith("configuration,avg_ms,success_rate")
    assert len(records.read_text().splitlines()) == 3751
    assert phases.read_text().startswith("phase,instance,count")
    code, again, _ = run_cli(capsys, "report", str(records), "--label", "NodePort", "--format", "csv")
    assert code == 0 and again == out


def test_alpha_without_proximity_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--router", "qedge", "--alpha", "0.5"])
    assert exc.value.code == 2
    assert "--alpha" in capsys.readouterr().err


def test_proximity_defaults_alpha(capsys):
    code, out, err = run_cli(capsys, "simulate", "--router", "proximity")
    assert code == 0 and "warning" in err and "proxy-mity 1.0" in out


def test_bad_alpha_is_domain_error(capsys):
    code, _, err = run_cli(capsys, "simulate", "--router", "proximity", "--alpha", "1.5")
    assert code == 1 and err.startswith("error:")


def test_unknown_scenario(capsys):
    code, _, err = run_cli(capsys, "simulate", "--scenario", "nope.yaml")
    assert code == 1


def test_compare_is_deterministic(capsys):
    code, first, _ = run_cli(capsys, "compare", "--seed", "1")
    _, second, _ = run_cli(capsys, "compare", "--seed", "1")
    assert code == 0 and first == second
    assert "NodePort (static)" in first and "QEdgeProxy (dynamic)" in first
    assert len(first.strip().splitlines()) == 10


def test_estimator_flags(capsys):
    code, out, _ = run_cli(capsys, "simulate", "--scenario", "dynamic", "--violation-limit", "none",
                           "--beta", "0.3", "--format", "csv")
    assert code == 0


def test_violation_limit_zero_rejected():
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--violation-limit", "0"])
    assert exc.value.code == 2


def test_topology_dump_and_validate(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "topology", "dump")
    assert code == 0 and load_topology(out) == paper_topology()
    good = tmp_path / "t.yaml"
    good.write_text(out)
    code, out, _ = run_cli(capsys, "topology", "validate", str(good))
    assert code == 0 and "ok" in out
    bad = tmp_path / "bad.yaml"
    bad.write_text("vertices:\n  node: [a, b]\nlinks:\n  - [a, c, 5]\n")
    code, _, err = run_cli(capsys, "topology", "validate", str(bad))
    assert code == 1 and "line 4" in err


def test_env_config_supplies_estimator(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("estimator: {violation_limit: 3}\n")
    monkeypatch.setenv("QEDGE_CONFIG", str(cfg))
    _, with_env, _ = run_cli(capsys, "simulate", "--scenario", "dynamic", "--format", "csv")
    monkeypatch.delenv("QEDGE_CONFIG")
    _, without, _ = run_cli(capsys, "simulate", "--scenario", "dynamic", "--format", "csv")
    assert with_env != without


def test_serve_needs_config(monkeypatch):
    monkeypatch.delenv("QEDGE_CONFIG", raising=False)
    with pytest.raises(SystemExit) as exc:
        main(["serve"])
    assert exc.value.code == 2


def test_random_qedge_selection(capsys):
    code, out, _ = run_cli(capsys, "simulate", "--qedge-selection", "random", "--format", "csv")
    assert code == 0 and "QEdgeProxy" in out
