import json

import pytest

from augpdgd.cli import FAULT, NEGATIVE, OK, main
from augpdgd.problem import problem_to_dict

from conftest import two_agent


@pytest.fixture(scope="module")
def two_json(tmp_path_factory):
    f = tmp_path_factory.mktemp("prob") / "two.json"
    f.write_text(json.dumps(problem_to_dict(two_agent())))
    return f


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory, two_json):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synthesize", str(two_json), "--h", "2", "--eps", "1", "--out", str(out), "--quiet"]) == OK
    return out


def test_synthesize_outputs(synth_dir):
    cert = json.loads((synth_dir / "certificate.json").read_text())
    assert cert["kind"] == "certificate" and cert["h"] == [2.0]
    rows = (synth_dir / "margins.csv").read_text().splitlines()
    assert rows[0] == "block,margin" and len(rows) == 1 + len(cert["blocks"])
    cfg = json.loads((synth_dir / "config.json").read_text())
    assert cfg["command"] == "synthesize" and "format_version" in cfg and "out" not in cfg
    assert (synth_dir / "run.log").exists()


def test_synthesize_is_byte_reproducible(tmp_path, two_json, synth_dir):
    assert main(["synthesize", str(two_json), "--h", "2", "--eps", "1", "--out", str(tmp_path), "--quiet"]) == OK
    for name in ("certificate.json", "margins.csv", "config.json"):
        assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()


def test_synthesize_infeasible_is_negative(tmp_path, two_json):
    code = main(["synthesize", str(two_json), "--h", "128", "--eps", "1", "--out", str(tmp_path), "--quiet"])
    assert code == NEGATIVE
    rec = json.loads((tmp_path / "infeasible.json").read_text())
    assert "madub" in rec["hint"] and rec["h"] == 128.0


@pytest.mark.parametrize("argv", [
    ["synthesize", "paper10", "--h", "-1"],
    ["synthesize", "paper10"],
    ["madub", "paper10", "--tol", "0"],
    ["simulate", "paper10", "--delay", "spline:h=1", "--T", "1"],
    ["simulate", "paper10", "--dynamics", "augmented", "--T", "1"],
    ["nonsense"],
])
def test_faults_exit_one(tmp_path, argv):
    assert main(argv + ["--out", str(tmp_path), "--quiet"] if argv[0] != "nonsense" else argv) == FAULT


def test_missing_problem_file(tmp_path):
    assert main(["synthesize", str(tmp_path / "none.json"), "--h", "1", "--out", str(tmp_path), "--quiet"]) == FAULT


def test_madub_small(tmp_path, two_json):
    code = main(["madub", str(two_json), "--eps", "1", "--h-hi", "32", "--tol", "0.01", "--out", str(tmp_path),
                 "--quiet"])
    assert code == OK
    table = json.loads((tmp_path / "table.json").read_text())
    row = table["rows"][0]
    assert row["monotone"] and 8 < row["h_bar"] < 32
    assert (tmp_path / "certificate_eps1.json").exists() and (tmp_path / "trace_eps1.csv").exists()
    assert (tmp_path / "table.csv").read_text().splitlines()[1].startswith("1,")


def test_madub_not_bracketed_is_negative(tmp_path, two_json):
    code = main(["madub", str(two_json), "--eps", "1", "--h-hi", "4", "--tol", "0.5", "--no-gain-size",
                 "--out", str(tmp_path), "--quiet"])
    assert code == NEGATIVE
    row = json.loads((tmp_path / "table.json").read_text())["rows"][0]
    assert row["status"] == "NotBracketed" and "h_hi" in row["suggestion"]


def test_simulate_standard(tmp_path, two_json):
    code = main(["simulate", str(two_json), "--delay", "const:0.2", "--T", "60", "--dt", "0.01", "--ic", "random",
                 "--out", str(tmp_path), "--quiet"])
    assert code == OK
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["label"] == "Converged" and not s["augmented"]
    assert (tmp_path / "trajectory.csv").read_text().startswith("t,x1,x2,lambda1")


def test_simulate_augmented_with_lkf(tmp_path, two_json, synth_dir):
    code = main(["simulate", str(two_json), "--dynamics", "augmented", "--cert", str(synth_dir / "certificate.json"),
                 "--delay", "sin:h=2,d=0.1", "--T", "30", "--dt", "0.01", "--ic", "random", "--out", str(tmp_path),
                 "--quiet"])
    assert code == OK
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["augmented"] and s["lkf"]["ok"]


def test_verify_pass_and_tamper(tmp_path, two_json, synth_dir):
    cert = synth_dir / "certificate.json"
    args = ["--T", "10", "--dt", "0.01", "--samples", "20", "--quiet"]
    assert main(["verify", str(two_json), str(cert), "--out", str(tmp_path / "a")] + args) == OK
    rep = json.loads((tmp_path / "a" / "verification.json").read_text())
    assert rep["passed"] and all(rep["checks"].values())
    doc = json.loads(cert.read_text())
    doc["vars"]["X"][0][0] += 0.5
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["verify", str(two_json), str(bad), "--out", str(tmp_path / "b")] + args) == NEGATIVE
    rep = json.loads((tmp_path / "b" / "verification.json").read_text())
    assert not rep["checks"]["gain"] and not rep["checks"]["variables"]
