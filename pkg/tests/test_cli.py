import csv
import json

import pytest

from ystar_bilevel.cli import OUT_ENV, TRACE_HEADER, SpecError, cell_seed, execute, main, parse_spec

SOLVE = {
    "kind": "solve",
    "instance": {"type": "quadratic", "d_x": 3, "d_y": 3, "seed": 0, "a_norm": 0.5},
    "oracle": {"type": "gaussian", "sigma_f": 0.1, "sigma_g": 0.1},
    "solver": {"schedule": "theorem2", "c_T": 0.25, "c_M": 0.25, "c_K": 2, "c_gamma": 4},
    "epsilon": [0.4],
    "x0": {"gap": 1.0},
    "seeds": [1],
}


def write(tmp_path, spec, name="spec.json"):
    path = tmp_path / name
    text = spec if isinstance(spec, str) else json.dumps(spec, indent=2)
    path.write_text(text)
    return path


def test_minimal_spec_parses(tmp_path):
    spec = parse_spec(write(tmp_path, SOLVE))
    assert spec.kind == "solve" and spec.seeds == (1,) and spec.epsilon == (0.4,)
    again = parse_spec(write(tmp_path, SOLVE, "other.json"))
    assert spec.digest == again.digest
    assert parse_spec(write(tmp_path, SOLVE), seed=9).digest != spec.digest


def _line_of(text, needle):
    return text[: text.index(needle)].count("\n") + 1


@pytest.mark.parametrize("mutate, needle, message", [
    (lambda s: s["instance"].update(lamda=1), '"lamda"', "lamda"),
    (lambda s: s["oracle"].update(N=1), '"N"', "N"),
    (lambda s: s.update(solver={"schedule": "explicit", "lam": 200.0, "alpha": 0.01, "gamma": 0.1,
                                "T": 5, "M": 5, "K": 5, "r_lambda": 0.5}), '"r_lambda"', "r_lambda"),
    (lambda s: s.update(solver={"schedule": "explicit", "lam": 0.5, "alpha": 0.01, "gamma": 0.1,
                                "T": 5, "M": 5, "K": 5, "r_lambda": 2.0}), '"lam"', "below its floor"),
    (lambda s: s.update(colour="red"), '"colour"', "colour"),
])
def test_invalid_specs_name_the_line(tmp_path, mutate, needle, message):
    spec = json.loads(json.dumps(SOLVE))
    mutate(spec)
    path = write(tmp_path, spec)
    text = path.read_text()
    with pytest.raises(SpecError) as err:
        parse_spec(path)
    assert f"{path}:{_line_of(text, needle)}:" in str(err.value)
    assert message in str(err.value)


def test_duplicate_key_rejected(tmp_path):
    text = json.dumps(SOLVE, indent=2).replace('"seeds"', '"epsilon": [0.2],\n  "seeds"')
    with pytest.raises(SpecError, match="duplicate"):
        parse_spec(write(tmp_path, text))


def test_invalid_json_reports_line(tmp_path):
    text = json.dumps(SOLVE, indent=2).replace('"seeds": [', '"seeds": [,')
    path = write(tmp_path, text)
    with pytest.raises(SpecError) as err:
        parse_spec(path)
    assert f":{_line_of(text, '[,')}:" in str(err.value)


def test_missing_file(tmp_path):
    with pytest.raises(SpecError):
        parse_spec(tmp_path / "nope.json")


def test_exit_codes(tmp_path, capsys):
    good = write(tmp_path, SOLVE, "good.json")
    assert main(["run", str(good), "--out", str(tmp_path / "a")]) == 0
    bad = dict(SOLVE, oracle={"type": "gaussian", "N": 1})
    assert main(["run", str(write(tmp_path, bad, "bad.json")), "--out", str(tmp_path / "b")]) == 2
    assert "config error" in capsys.readouterr().err
    fit = dict(SOLVE, kind="rate-fit", epsilon=[0.4, 0.2], seeds=[0, 1],
               fit={"n_boot": 10, "max_slope": -1.0})
    assert main(["run", str(write(tmp_path, fit, "fit.json")), "--out", str(tmp_path / "c")]) == 1
    summary = json.loads((tmp_path / "c" / "summary.json").read_text())
    assert summary["ok"] is False and summary["aggregate"]["ok"] is False


def test_reruns_are_byte_identical(tmp_path):
    spec = parse_spec(write(tmp_path, dict(SOLVE, seeds=[1, 2])))
    execute(spec, str(tmp_path / "a"))
    execute(spec, str(tmp_path / "b"), workers=2)
    for rel in ["summary.json", "traces/eps0.4_seed1.csv", "traces/eps0.4_seed2.csv"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_cell_seeds_ignore_the_rest_of_the_grid(tmp_path):
    small = parse_spec(write(tmp_path, SOLVE, "small.json"))
    big = parse_spec(write(tmp_path, dict(SOLVE, epsilon=[0.4, 0.3], seeds=[1, 5]), "big.json"))
    execute(small, str(tmp_path / "s"))
    execute(big, str(tmp_path / "g"))
    trace = "traces/eps0.4_seed1.csv"
    assert (tmp_path / "s" / trace).read_bytes() == (tmp_path / "g" / trace).read_bytes()
    assert cell_seed(0, "eps=0.4/seed=1") == cell_seed(0, "eps=0.4/seed=1")
    assert cell_seed(0, "eps=0.4/seed=1") != cell_seed(1, "eps=0.4/seed=1")


def test_output_directory_from_environment(tmp_path, monkeypatch):
    target = tmp_path / "from_env"
    monkeypatch.setenv(OUT_ENV, str(target))
    summary, code = execute(parse_spec(write(tmp_path, SOLVE)))
    assert code == 0 and (target / "summary.json").exists()
    with open(target / "traces" / "eps0.4_seed1.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TRACE_HEADER
    assert [int(r[0]) for r in rows[1:]] == list(range(len(rows) - 1))
    assert summary["cells"][0]["oracle_calls"] == int(rows[-1][1])


def test_stall_and_moments_kinds(tmp_path):
    stall = {"kind": "stall", "instance": {"type": "chain", "d_x": 6}, "epsilon": 0.2,
             "stall": {"p": [1.0, 0.5], "budget": 500, "checkpoints": [3]}, "seeds": [0, 1]}
    summary, code = execute(parse_spec(write(tmp_path, stall, "stall.json")), str(tmp_path / "st"))
    assert code == 0
    assert summary["aggregate"]["eps=0.2/p=1.0"]["median_activation_time"] == 6.0
    moments = {"kind": "oracle-moments", "instance": {"type": "chain", "d_x": 6},
               "oracle": {"type": "zero_chain", "p": 0.3}, "epsilon": 0.2,
               "moments": {"n": 2000, "block": "g"}, "seeds": [0]}
    summary, code = execute(parse_spec(write(tmp_path, moments, "mom.json")), str(tmp_path / "mo"))
    assert code == 0 and summary["cells"][0]["ok"]


def test_verify_kind_runs_selected_suites(tmp_path):
    spec = {"kind": "verify-lemmas", "seeds": [0],
            "verify": {"suites": ["surrogate", "psgd"], "n_points": 5, "psgd_seeds": 100}}
    summary, code = execute(parse_spec(write(tmp_path, spec)), str(tmp_path / "v"))
    assert code == 0
    assert [c["key"] for c in summary["cells"]] == ["suite=surrogate/seed=0", "suite=psgd/seed=0"]
