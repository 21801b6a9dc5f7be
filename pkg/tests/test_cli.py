from __future__ import annotations

import csv
import json

import pytest

from conftest import config_of, five_square_ifs, gasket_ifs
from fractal_sio import cli

Z3 = {"kernel": "complex_power", "m": 3}


@pytest.fixture
def gasket_cfg(tmp_path):
    path = tmp_path / "gasket.json"
    path.write_text(json.dumps(config_of(gasket_ifs(), Z3, words=[[0]])))
    return path


def run(argv, tmp_path, name="out.json"):
    out = tmp_path / name
    code = cli.main(list(argv) + ["--out", str(out)])
    return code, (json.loads(out.read_text()) if out.exists() else None)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_check_unbounded_gasket(gasket_cfg, tmp_path):
    code, rep = run(["check-unbounded", "--config", str(gasket_cfg), "--depth", "3"], tmp_path)
    assert code == 0 and rep["exit_code"] == 0
    assert rep["outputs"]["certified"]
    assert set(rep) >= {"command", "version", "inputs", "determinism", "outputs"}
    assert rep["inputs"]["depth"] == 3 and rep["determinism"]["seed"] == 0


def test_check_unbounded_five_square_is_inconclusive(tmp_path):
    cfg = tmp_path / "five.json"
    cfg.write_text(json.dumps(config_of(five_square_ifs(), Z3)))
    code, rep = run(["check-unbounded", "--config", str(cfg), "--depth", "3", "--mode", "heuristic"],
                    tmp_path)
    assert code == 2 and not rep["outputs"]["certified"]


def test_overlapping_pieces_exit_inconclusive(tmp_path):
    cfg = tmp_path / "overlap.json"
    cfg.write_text(json.dumps({"space": {"group": "euclidean", "d": 2},
                               "maps": [{"q": [0, 0], "r": 0.3}, {"q": [0, 0], "r": 0.3},
                                        {"q": [0.5, 0.5], "r": 0.3}],
                               "kernel": Z3}))
    code, rep = run(["check-unbounded", "--config", str(cfg)], tmp_path)
    assert code == 2 and rep["outputs"]["status"] == "inconclusive-separation"


def test_bad_inputs_exit_three(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["check-unbounded", "--config", str(bad)]) == 3
    assert "malformed JSON" in capsys.readouterr().err
    assert cli.main(["check-unbounded", "--config", str(tmp_path / "missing.json")]) == 3
    nokernel = tmp_path / "nokernel.json"
    nokernel.write_text(json.dumps(gasket_ifs().to_config()))
    assert cli.main(["check-unbounded", "--config", str(nokernel)]) == 3
    assert cli.main(["check-unbounded", "--depth", "-1"]) == 3
    assert cli.main(["no-such-command"]) == 3


def test_dry_run(gasket_cfg, tmp_path):
    code, rep = run(["check-unbounded", "--config", str(gasket_cfg), "--dry-run"], tmp_path)
    assert code == 0 and rep["dry_run"] and "outputs" not in rep
    code, rep = run(["cantor-hn", "--dry-run"], tmp_path, "c.json")
    assert code == 0 and len(rep["outputs"]["stages"]) == 5


def test_cantor_infeasible_parameters(tmp_path):
    code, rep = run(["cantor-hn", "--n", "1", "--N", "2"], tmp_path)
    assert code == 3
    assert rep["outputs"]["stopped_at"] == "build_similarities"
    assert cli.main(["--N", "2", "--out", str(tmp_path / "p.json")], prog="cantor-hn") == 3


def test_telescope_and_eta_csv(gasket_cfg, tmp_path):
    code, rep = run(["telescope", "--config", str(gasket_cfg), "--k-max", "3", "--depth", "3"], tmp_path)
    assert code == 0 and len(rep["outputs"]["eta"]) == 4
    csv_path = tmp_path / "eta.csv"
    assert cli.main(["emit-plotdata", "--report", str(tmp_path / "out.json"), "--kind", "eta",
                     "--out", str(csv_path)]) == 0
    rows = read_csv(csv_path)
    assert rows[0][:3] == ["k", "eta_1", "eta_2"] and len(rows) == 1 + 4


def test_maximal_and_eps_csv(gasket_cfg, tmp_path):
    grid = [0.3, 0.1, 0.03]
    code, rep = run(["maximal", "--config", str(gasket_cfg), "--eps-grid", "0.3,0.1,0.03", "--depth", "3"],
                    tmp_path)
    assert code == 0 and rep["inputs"]["eps_grid"] == sorted(grid)
    csv_path = tmp_path / "eps.csv"
    assert cli.main(["emit-plotdata", "--report", str(tmp_path / "out.json"), "--kind", "eps",
                     "--out", str(csv_path)]) == 0
    rows = read_csv(csv_path)
    assert sorted(float(r[0]) for r in rows[1:]) == sorted(grid)
    assert cli.main(["maximal", "--config", str(gasket_cfg)]) == 3


def test_integrate_sweep_and_depth_csv(gasket_cfg, tmp_path):
    code, rep = run(["integrate", "--config", str(gasket_cfg), "--region", "complement:0", "--depth", "3",
                     "--sweep"], tmp_path)
    assert code == 0 and [c["depth"] for c in rep["outputs"]["convergence"]] == [0, 1, 2, 3]
    csv_path = tmp_path / "depth.csv"
    assert cli.main(["emit-plotdata", "--report", str(tmp_path / "out.json"), "--kind", "depth",
                     "--out", str(csv_path)]) == 0
    assert len(read_csv(csv_path)) == 5
    assert cli.main(["integrate", "--config", str(gasket_cfg), "--region", "ring"]) == 3


def test_phi_solve_and_heatmap(tmp_path):
    code, rep = run(["phi-solve", "--resolution", "64", "--values"], tmp_path)
    assert code == 0 and rep["outputs"]["verify"]["pass"]
    csv_path = tmp_path / "phi.csv"
    assert cli.main(["emit-plotdata", "--report", str(tmp_path / "out.json"), "--kind", "phi",
                     "--out", str(csv_path)]) == 0
    rows = read_csv(csv_path)
    assert len(rows) == 1 + 64 * 64
    # a report without grid values cannot be plotted
    run(["phi-solve", "--resolution", "8"], tmp_path, "small.json")
    assert cli.main(["emit-plotdata", "--report", str(tmp_path / "small.json"), "--kind", "phi"]) == 3


def test_dim_solve(tmp_path):
    code, rep = run(["dim-solve", "--ratios", "0.5,0.25"], tmp_path)
    assert code == 0 and rep["outputs"]["dimension"] == pytest.approx(0.6942419, abs=1e-7)
    code, rep = run(["dim-solve", "--n", "1", "--N", "18"], tmp_path, "d.json")
    assert code == 0 and rep["outputs"]["maps"] == 52489
    code, _ = run(["dim-solve", "--N", "2"], tmp_path, "e.json")
    assert code == 3


def test_emit_plotdata_needs_report(tmp_path):
    assert cli.main(["emit-plotdata", "--kind", "eta"]) == 3
    assert cli.main(["emit-plotdata", "--kind", "eta", "--report", str(tmp_path / "none.json")]) == 3


def test_reports_are_byte_identical(gasket_cfg, tmp_path):
    argv = ["integrate", "--config", str(gasket_cfg), "--region", "complement:0", "--depth", "3"]
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    cli.main(argv + ["--out", str(a)])
    cli.main(argv + ["--out", str(b)])
    assert a.read_bytes() == b.read_bytes()
