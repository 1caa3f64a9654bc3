import csv
import json

import pytest

from onp import cli


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    assert run("generate", "toy4", "-o", d) == 0
    return d


def test_generate_toy(toy_dir):
    doc = json.loads((toy_dir / "instance.json").read_text())
    assert doc["generator"] == "toy4" and doc["schema"] == "onp.instance"
    assert len(json.loads((toy_dir / "routes.json").read_text())["routes"]) == 16
    run_doc = json.loads((toy_dir / "run.json").read_text())
    assert run_doc["command"] == "generate" and run_doc["seed"] == 0


def test_generate_random_and_determinism(tmp_path):
    for sub in ("a", "b"):
        assert run("generate", "random", "--routes", 50, "--seed", 1, "-o", tmp_path / sub) == 0
    a = (tmp_path / "a" / "instance.json").read_text()
    assert a == (tmp_path / "b" / "instance.json").read_text()
    assert json.loads(a)["edges"] == 10
    assert (tmp_path / "a" / "network.tntp").read_text() == (tmp_path / "b" / "network.tntp").read_text()


def test_generate_tntp(tmp_path):
    from importlib import resources

    net = resources.files("onp.data").joinpath("SiouxFalls_net.tntp")
    assert run("generate", "tntp", "--net", net, "--pairs", "1:2", "1:13", "--max-per-pair", 3, "-o", tmp_path) == 0
    doc = json.loads((tmp_path / "instance.json").read_text())
    assert doc["pairs"] == [[0, 1], [0, 12]]
    assert run("generate", "tntp", "--net", net, "--pairs", "1:99", "-o", tmp_path) == 2
    assert run("generate", "tntp", "--net", tmp_path / "nope.tntp", "--pairs", "1:2", "-o", tmp_path) == 2


def test_solve_paths_agree(toy_dir, tmp_path):
    assert run("solve", toy_dir / "instance.json", "--path", "sparse", "-o", tmp_path / "s") == 0
    assert run("solve", toy_dir / "instance.json", "--path", "dense", "-o", tmp_path / "d") == 0
    s = json.loads((tmp_path / "s" / "result.json").read_text())
    d = json.loads((tmp_path / "d" / "result.json").read_text())
    assert s["status"] == "converged" and max(s["residuals"].values()) <= 1e-8
    assert max(abs(a - b) for a, b in zip(s["p"], d["p"])) <= 1e-8
    assert s["instance_hash"] == d["instance_hash"]
    rows = list(csv.DictReader(open(tmp_path / "s" / "trace.csv")))
    assert len(rows) == s["iterations"] and "rho" in rows[0]
    assert (tmp_path / "s" / "run.json").exists()


def test_solve_missing_file(tmp_path, capsys):
    assert run("solve", tmp_path / "missing.json") == 2
    assert "not found" in capsys.readouterr().err


def test_solve_nonconvergence_exit(toy_dir, tmp_path):
    assert run("solve", toy_dir / "instance.json", "--max-iter", 0, "-o", tmp_path) == 3


def test_verify(toy_dir, tmp_path):
    assert run("verify", toy_dir / "instance.json", "--points", 2, "-o", tmp_path) == 0
    doc = json.loads((tmp_path / "verify.json").read_text())
    assert doc["passed"] and len(doc["fd"]) == 2 and len(doc["parity"]) == 2


def test_verify_tolerance_failure(toy_dir, tmp_path):
    assert run("verify", toy_dir / "instance.json", "--points", 1, "--grad-tol", 1e-30, "-o", tmp_path) == 1


def test_benchmark(tmp_path):
    assert run("benchmark", "--routes", 30, "--repeats", 1, "--samples", 40, "--iterations", 2,
               "-o", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "benchmark.csv")))
    assert [r["path"] for r in rows] == ["dense", "sparse"]
    assert all(float(r["std_ms"]) == 0 for r in rows)
    assert rows[0]["objective"] == rows[1]["objective"]
    assert set(cli.BENCH_COLUMNS) == set(rows[0])


def test_usage_errors(capsys):
    assert run("frobnicate") == 2
    assert run("benchmark", "--repeats", 0) == 2
