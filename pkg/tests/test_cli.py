import csv
import io
import json

import pytest

from dpcate.cli import main


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.delenv("DPCATE_LEDGER", raising=False)
    assert main(["gen", "--n", "400", "--seed", "7", "--out", str(tmp_path / "d.csv"), "--n-queries", "20"]) == 0
    return tmp_path


def _fit(tmp, name="m", eps="1", extra=()):
    return main(["fit", "--data", str(tmp / "d.csv"), "--model-dir", str(tmp / name), "--epsilon", eps,
                 "--ledger", str(tmp / "ledger.jsonl"), *extra])


def test_gen_rows_and_determinism(workdir):
    with open(workdir / "d.csv") as fh:
        assert sum(1 for _ in fh) == 401
    assert main(["gen", "--n", "400", "--seed", "7", "--out", str(workdir / "e.csv"), "--n-queries", "20"]) == 0
    assert (workdir / "d.csv").read_bytes() == (workdir / "e.csv").read_bytes()
    assert (workdir / "d_queries.csv").read_bytes() == (workdir / "e_queries.csv").read_bytes()


def test_gen_requires_n(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "x.csv")]) == 2


def test_unknown_flag_is_usage_error():
    assert main(["fit", "--bogus"]) == 2


def test_fit_writes_artifacts_and_refuses_refit(workdir):
    assert _fit(workdir) == 0
    assert (workdir / "m" / "nuisance.json").exists() and (workdir / "m" / "model.json").exists()
    assert _fit(workdir, "m2") == 3


def test_fit_infinite_epsilon_skips_ledger(workdir):
    assert _fit(workdir, eps="inf") == 0
    assert not (workdir / "ledger.jsonl").exists()
    meta = json.loads((workdir / "m" / "nuisance.json").read_text())
    assert meta["fit_meta"]["method"] == "nonprivate"


def test_release_finite_then_refusal(workdir, capsys):
    assert _fit(workdir) == 0
    args = ["release", "--model-dir", str(workdir / "m"), "--queries", str(workdir / "d_queries.csv"),
            "--ledger", str(workdir / "ledger.jsonl")]
    assert main(args + ["--out", str(workdir / "r.json"), "--audit"]) == 0
    assert "NON-PRIVATE" in capsys.readouterr().err
    rep = json.loads((workdir / "r.json").read_text())
    assert len(rep["private_estimates"]) == 20 and "raw_estimates" in rep
    assert main(args + ["--out", str(workdir / "r2.json")]) == 3
    assert not (workdir / "r2.json").exists()


def test_release_functional_csv(workdir):
    assert _fit(workdir) == 0
    assert main(["release", "--model-dir", str(workdir / "m"), "--queries", str(workdir / "d_queries.csv"),
                 "--mechanism", "functional", "--out", str(workdir / "f.csv"),
                 "--ledger", str(workdir / "ledger.jsonl")]) == 0
    with open(workdir / "f.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 20


def _serve(monkeypatch, capsys, argv, lines):
    monkeypatch.setattr("sys.stdin", io.StringIO("".join(line + "\n" for line in lines)))
    code = main(argv)
    return code, [json.loads(s) for s in capsys.readouterr().out.splitlines() if s.startswith("{")]


def test_serve_and_resume(workdir, monkeypatch, capsys):
    assert _fit(workdir) == 0
    capsys.readouterr()
    ck = workdir / "ck.json"
    base = ["serve", "--model-dir", str(workdir / "m"), "--ledger", str(workdir / "ledger.jsonl"),
            "--seed", "4", "--checkpoint", str(ck)]
    queries = ['{"x": [0.1, 0.2]}', "not json", '{"x": [0.5]}', '{"x": [0.3, 0.4]}', '{"x": [0.6, 0.9]}']
    code, out = _serve(monkeypatch, capsys, base, queries)
    assert code == 0
    assert "error" in out[1] and "error" in out[2]
    assert [o["query_index"] for o in out if "estimate" in o] == [0, 1, 2]
    # a second session under the same budget is refused
    code, _ = _serve(monkeypatch, capsys, base, queries)
    assert code == 3
    # replay: resuming from the checkpoint of a one-query session continues the same draws
    fresh = ["serve", "--model-dir", str(workdir / "m"), "--seed", "4", "--ledger"]
    _, first = _serve(monkeypatch, capsys, fresh + [str(workdir / "l2.jsonl"), "--checkpoint", str(ck)],
                      queries[:1])
    _, rest = _serve(monkeypatch, capsys, fresh + [str(workdir / "l2.jsonl"), "--checkpoint", str(ck),
                                                  "--resume"], queries[3:])
    _, whole = _serve(monkeypatch, capsys, fresh + [str(workdir / "l3.jsonl")], [queries[0]] + queries[3:])
    assert [o["estimate"] for o in first + rest] == [o["estimate"] for o in whole]
    assert [o["query_index"] for o in rest] == [1, 2]


def test_audit_exit_codes(capsys):
    assert main(["audit", "sensitivity", "--n", "30", "--trials", "10"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_sweep_command(tmp_path, capsys):
    assert main(["sweep", "--n", "400", "--seeds", "1", "--epsilons", "1,inf",
                 "--out-csv", str(tmp_path / "s.csv"), "--out-json", str(tmp_path / "s.json")]) == 0
    assert (tmp_path / "s.csv").read_text().startswith("epsilon,seed,pehe,baseline_pehe")
    assert "mean_pehe" in capsys.readouterr().out


def test_audit_failure_exit_code(monkeypatch, capsys):
    import dpcate.cli as cli
    monkeypatch.setattr(cli, "sensitivity_audit", lambda **kw: {"max_ratio": 1.5, "bound": 1.0, "passed": False})
    assert main(["audit", "sensitivity"]) == 1
    assert "FAIL" in capsys.readouterr().out
