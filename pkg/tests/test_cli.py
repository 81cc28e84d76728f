import json

import numpy as np
import pytest

from bassdecomp import _jsonio
from bassdecomp.cli import main, slope_jumps
from bassdecomp.measures import DiscreteMeasure, quantile_discretize, save_measure
from bassdecomp.paving import PavingResult


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, json.loads(out)


@pytest.fixture
def files(tmp_path):
    def put(name, m):
        path = tmp_path / f"{name}.json"
        save_measure(m, path)
        return path

    return {
        "dirac": put("dirac", DiscreteMeasure.dirac([0.0])),
        "two": put("two", DiscreteMeasure([-1.0, 1.0], [0.5, 0.5])),
        "three": put("three", DiscreteMeasure([-2.0, 0.0, 2.0], [0.25, 0.5, 0.25])),
        "split_mu": put("split_mu", DiscreteMeasure([-2.0, 2.0], [0.5, 0.5])),
        "split_nu": put("split_nu", DiscreteMeasure([-3.0, -1.0, 1.0, 3.0], [0.25] * 4)),
        "circle": put("circle", quantile_discretize("circle", 24)),
        "dir": tmp_path,
    }


class TestMcov:
    def test_closed_forms(self, capsys, files):
        code, rep = _run(capsys, "mcov", files["dirac"])
        assert code == 0 and rep["value"] == 0.0
        code, rep = _run(capsys, "mcov", files["two"])
        assert code == 0 and abs(rep["value"] - 0.7978845608) < 1e-10

    def test_circle(self, capsys, files):
        code, rep = _run(capsys, "mcov", files["circle"], "--samples", 4096)
        # radial oracle sqrt(pi/2) up to discretization slack
        assert code == 0
        assert abs(rep["value"] - np.sqrt(np.pi / 2)) <= 3 * rep["error"] + 2e-2

    def test_invalid_input(self, capsys, files):
        bad = files["dir"] / "bad.json"
        bad.write_text('{"dim": 1, "atoms": [[0.0]], "weights": [0.4]}')
        assert _run(capsys, "mcov", bad)[0] == 2
        assert _run(capsys, "mcov", files["dir"] / "missing.json")[0] == 2


class TestOrderAndDual:
    def test_check_order(self, capsys, files):
        code, rep = _run(capsys, "check-order", files["dirac"], files["two"])
        assert code == 0 and rep["convex_order"]
        code, rep = _run(capsys, "check-order", files["two"], files["dirac"])
        assert code == 3 and not rep["convex_order"]

    def test_solve_dual_and_trace_export(self, capsys, files):
        out = files["dir"] / "sd"
        code, rep = _run(capsys, "solve-dual", files["dirac"], files["three"], "--out", out)
        assert code == 0 and rep["converged"] and abs(rep["gap"]) < 1e-8
        lines = (out / "trace.jsonl").read_text().splitlines()
        assert len(lines) == rep["iterations"]
        code, _ = _run(capsys, "solve-dual", files["dirac"], files["three"], "--out", out, "--format", "csv")
        assert (out / "trace.csv").read_text().startswith("iter,")

    def test_pave_routes(self, capsys, files):
        code, rep = _run(capsys, "pave", files["split_mu"], files["split_nu"])
        assert code == 0
        assert rep["partitions"]["lp"] == [[0], [1]]
        assert all(a["agree"] for a in rep["agreement"].values())
        code, rep = _run(capsys, "pave", files["split_mu"], files["split_nu"], "--method", "potential-1d")
        assert code == 0 and list(rep["partitions"]) == ["potential-1d"]


class TestDecomposeSimulate:
    def test_irreducible_is_one_component(self, capsys, files):
        code, rep = _run(capsys, "decompose", files["dirac"], files["three"])
        assert code == 0 and len(rep["components"]) == 1

    def test_infeasible_exit(self, capsys, files):
        code, rep = _run(capsys, "decompose", files["two"], files["dirac"])
        assert code == 3 and rep["error"] == "InfeasibleError"

    def test_byte_identical_reports(self, files):
        texts = []
        for k in range(2):
            out = files["dir"] / f"det{k}"
            assert main(["decompose", str(files["split_mu"]), str(files["split_nu"]),
                         "--out", str(out), "--seed", "7"]) == 0
            texts.append(((out / "report.json").read_bytes(), (out / "paving.json").read_bytes()))
        assert texts[0] == texts[1]

    def test_simulate_round_trip(self, capsys, files):
        out = files["dir"] / "dec"
        assert _run(capsys, "decompose", files["split_mu"], files["split_nu"], "--out", out)[0] == 0
        sim = files["dir"] / "sim"
        code, rep = _run(capsys, "simulate", out / "paving.json", "--paths", 5000, "--steps", 32,
                         "--out", sim, "--export-paths", 5)
        assert code == 0 and rep["passed"] and len(rep["components"]) == 2
        assert (sim / "paths_1.csv").exists()
        # the global flag may also come before the subcommand
        again = files["dir"] / "sim2"
        main(["--seed", "0", "simulate", str(out / "paving.json"), "--paths", "5000", "--steps", "32",
              "--out", str(again), "--export-paths", "5"])
        capsys.readouterr()
        assert (again / "report.json").read_bytes() == (sim / "report.json").read_bytes()

    def test_trivial_pair_simulates_constant_paths(self, capsys, files):
        out = files["dir"] / "triv"
        assert _run(capsys, "decompose", files["two"], files["two"], "--out", out)[0] == 0
        code, rep = _run(capsys, "simulate", out / "paving.json", "--paths", 200, "--steps", 16)
        assert code == 0 and rep["passed"]
        assert all(c["value"]["mean"] == 0.0 for c in rep["components"])

    def test_planted_defect_fails(self, capsys, files):
        out = files["dir"] / "plant"
        assert _run(capsys, "decompose", files["dirac"], files["three"], "--out", out)[0] == 0
        obj = _jsonio.load(out / "paving.json")
        # shift the Bass measure: the model no longer starts at the source atom
        obj["components"][0]["bass"]["alpha"]["atoms"] = [[0.4]]
        bad = files["dir"] / "planted.json"
        _jsonio.dump(obj, bad)
        code, rep = _run(capsys, "simulate", bad, "--paths", 4000, "--steps", 16)
        assert code == 5 and not rep["passed"]

    def test_missing_models(self, capsys, files):
        out = files["dir"] / "nom"
        _run(capsys, "decompose", files["dirac"], files["three"], "--out", out)
        obj = _jsonio.load(out / "paving.json")
        obj["components"][0].pop("bass")
        bad = files["dir"] / "nomodel.json"
        _jsonio.dump(obj, bad)
        assert _run(capsys, "simulate", bad)[0] == 2


def test_example_ex61_small(capsys, tmp_path):
    # the numeric tolerances are set for n=200; a coarse grid fails them with exit 5
    code, rep = _run(capsys, "example", "ex61", "--n", 60, "--out", tmp_path)
    assert code == 5 and not rep["passed"]
    assert rep["checks"]["two_components"] and rep["checks"]["kappa_half"]
    assert not rep["checks"]["value_near_one"]
    assert [c["kappa"] for c in rep["components"]] == [0.5, 0.5]
    assert (tmp_path / "psi_slope_jumps.csv").exists()
    res = PavingResult.from_json(_jsonio.load(tmp_path / "paving.json"))
    assert len(res.components) == 2


def test_slope_jumps_are_affine_free():
    y = np.array([0.5, 1.0, 2.0, 3.5])
    psi = y ** 2
    at, a = slope_jumps(y, psi)
    _, b = slope_jumps(y, psi + 3 - 2 * y)
    np.testing.assert_array_equal(at, y[1:-1])
    np.testing.assert_allclose(a, b, atol=1e-13)
    assert np.all(a > 0)


def test_bad_flags(capsys):
    with pytest.raises(SystemExit):
        main(["mcov", "x.json", "--seed", "-1"])
    with pytest.raises(SystemExit):
        main(["mcov", "x.json", "--tol", "0"])
    with pytest.raises(SystemExit):
        main(["example", "ex99"])
