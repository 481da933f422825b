import json
import math
from pathlib import Path

import numpy as np
import pytest

from orthoz.cli import main, read_data_csv
from orthoz.config import ConfigError, load_config, parse_config

FIXTURES = Path(__file__).parent / "fixtures"
CONFIGS = Path(__file__).parent.parent / "configs"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# --- config parsing


def test_shipped_configs_parse():
    cfg = load_config(CONFIGS / "default.toml")
    exp = cfg.experiment
    assert exp.n_grid == [500, 1000, 2000, 4000, 8000]
    assert exp.replications == 1000
    assert exp.moments == ["plr", "plr-naive"]
    assert set(exp.learners) == {"fast", "slow", "oracle"}
    assert exp.learners["slow"].bandwidth_scale == 2.5
    assert load_config(CONFIGS / "smoke.toml").experiment.replications == 1


def test_parse_collects_every_error():
    with pytest.raises(ConfigError) as info:
        parse_config({
            "dgp": {"name": "plr", "colour": 1},
            "learners": {"a": {"kind": "knn", "k": 0}},
            "experiment": {"alpha": 1.5, "n_grid": [10, 5]},
            "extra": {},
        })  # fmt: skip
    errors = info.value.errors
    assert any("colour" in e for e in errors)
    assert any("k must be at least 1" in e for e in errors)
    assert any("alpha" in e for e in errors)
    assert any("n_grid" in e for e in errors)
    assert any("[extra]" in e for e in errors)


def test_parse_defaults_and_dgp_params():
    cfg = parse_config({"dgp": {"name": "plr", "theta0": 2}, "learners": {"f": {"kind": "kernel"}}})
    assert cfg.experiment.dgp_params == {"theta0": 2.0}
    assert cfg.experiment.build_dgp().theta0[0] == 2.0
    assert cfg.expect_rate == {"f": "ok"}
    assert cfg.check.draws_per_point == 1_000_000


def test_toml_syntax_error_reported(tmp_path):
    p = tmp_path / "broken.toml"
    p.write_text("[dgp\nname = 1\n")
    with pytest.raises(ConfigError, match="TOML syntax"):
        load_config(p)


@pytest.mark.parametrize("fixture", sorted(p.name for p in FIXTURES.glob("bad_*.toml")))
def test_every_bad_fixture_rejected(capsys, fixture):
    for command in ("check", "simulate"):
        code, _, err = run(capsys, command, "--config", FIXTURES / fixture)
        assert code == 1
        assert "invalid config" in err and len(err.strip().splitlines()) >= 2


def test_bad_key_is_named(capsys):
    code, _, err = run(capsys, "check", "--config", FIXTURES / "bad_values.toml")
    assert code == 1 and "'colour'" in err


# --- CSV ingestion


def test_read_data_csv_maps_columns():
    Z = read_data_csv(FIXTURES / "plr_sample.csv", ["outcome", "treatment", "age"])
    assert Z.shape == (600, 3)
    assert np.all(np.isfinite(Z))


def test_read_data_csv_errors(tmp_path):
    from orthoz.cli import InputError

    with pytest.raises(InputError, match="row 7, column 'treatment'"):
        read_data_csv(FIXTURES / "bad_cell_row7.csv", ["outcome", "treatment", "age"])
    with pytest.raises(InputError, match="missing column"):
        read_data_csv(FIXTURES / "mean3.csv", ["outcome"])
    one = tmp_path / "one.csv"
    one.write_text("y\n1\n")
    with pytest.raises(InputError, match="at least 2"):
        read_data_csv(one, ["y"])
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("y,x\n1,2\n3\n")
    with pytest.raises(InputError, match="row 2"):
        read_data_csv(ragged, ["y"])
    inf = tmp_path / "inf.csv"
    inf.write_text("y\n1\ninf\n")
    with pytest.raises(InputError, match="non-finite"):
        read_data_csv(inf, ["y"])


# --- estimate


def test_estimate_mean_three_rows(capsys, tmp_path):
    out = tmp_path / "est.json"
    code, text, _ = run(capsys, "estimate", "--data", FIXTURES / "mean3.csv", "--config", FIXTURES / "estimate_mean.toml", "--out", out)
    assert code == 0
    summary = json.loads(out.read_text())
    res = summary["result"]
    assert res["theta_hat"] == [2.0]
    # V uses divisor n: sd = sqrt(2/3)
    assert res["std_errors"][0] == pytest.approx(math.sqrt(2 / 3) / math.sqrt(3), rel=1e-12)
    assert summary["n_main"] == 3
    assert "theta[0] = 2" in text


def test_estimate_plr_prints_json_without_out(capsys):
    code, text, _ = run(capsys, "estimate", "--data", FIXTURES / "plr_sample.csv", "--config", FIXTURES / "estimate_plr.toml")
    assert code == 0
    payload = json.loads(text[text.index("{") :])
    assert payload["moment"] == "plr"
    assert payload["result"]["newton"]["converged"] is True
    assert payload["provenance"]["n_train"] == 300
    lo, hi = payload["result"]["ci_lower"][0], payload["result"]["ci_upper"][0]
    assert lo < payload["result"]["theta_hat"][0] < hi


def test_estimate_bad_cell_exit_1(capsys):
    code, _, err = run(capsys, "estimate", "--data", FIXTURES / "bad_cell_row7.csv", "--config", FIXTURES / "estimate_plr.toml")
    assert code == 1 and "row 7" in err


def test_estimate_constant_treatment_exit_2(capsys):
    code, _, err = run(capsys, "estimate", "--data", FIXTURES / "constant_w.csv", "--config", FIXTURES / "estimate_plr.toml")
    assert code == 2 and "SingularJacobian" in err


def test_estimate_requires_data_section(capsys):
    code, _, err = run(capsys, "estimate", "--data", FIXTURES / "mean3.csv", "--config", CONFIGS / "smoke.toml")
    assert code == 1 and "[data]" in err


def test_estimate_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "estimate", "--data", tmp_path / "nope.csv", "--config", FIXTURES / "estimate_mean.toml")
    assert code == 1 and "cannot read" in err


# --- simulate and report


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert main(["simulate", "--config", str(CONFIGS / "smoke.toml"), "--output-dir", str(out)]) == 0
    return out


def test_simulate_writes_outputs(smoke_run):
    for name in ("results.csv", "aggregate.csv", "report.md"):
        assert (smoke_run / name).stat().st_size > 0
    header = (smoke_run / "results.csv").read_text().splitlines()[0].split(",")
    for col in ("dgp", "moment", "learner", "n", "rep", "theta_hat", "se", "ci_lo", "ci_hi", "covered",
                "D_abs", "E_abs", "E_bound", "E_bound_pass", "converged"):  # fmt: skip
        assert col in header
    assert "## Verdicts" in (smoke_run / "report.md").read_text()


def test_smoke_simulate_is_fast(tmp_path):
    import time

    start = time.perf_counter()
    assert main(["simulate", "--config", str(CONFIGS / "smoke.toml"), "--output-dir", str(tmp_path)]) == 0
    assert time.perf_counter() - start < 5.0


def test_simulate_workers_byte_identical(tmp_path, smoke_run):
    assert main(["simulate", "--config", str(CONFIGS / "smoke.toml"), "--output-dir", str(tmp_path), "--workers", "2"]) == 0
    for name in ("results.csv", "aggregate.csv"):
        assert (tmp_path / name).read_bytes() == (smoke_run / name).read_bytes()


def test_report_round_trip(capsys, tmp_path, smoke_run):
    code, text, _ = run(capsys, "report", "--results", smoke_run / "results.csv", "--out", tmp_path)
    assert code == 0
    assert (tmp_path / "aggregate.csv").read_bytes() == (smoke_run / "aggregate.csv").read_bytes()
    assert "Normality per cell" in text


def test_report_missing_column(capsys, tmp_path, smoke_run):
    lines = (smoke_run / "results.csv").read_text().splitlines()
    header = lines[0].split(",")
    drop = header.index("covered")
    truncated = tmp_path / "truncated.csv"
    truncated.write_text("\n".join(",".join(c for i, c in enumerate(l.split(",")) if i != drop) for l in lines) + "\n")
    code, _, err = run(capsys, "report", "--results", truncated, "--out", tmp_path / "o")
    assert code == 1 and "covered" in err


def test_report_empty_file(capsys, tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    code, _, err = run(capsys, "report", "--results", empty, "--out", tmp_path / "o")
    assert code == 1 and "no rows" in err


def test_report_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "report", "--results", tmp_path / "none.csv", "--out", tmp_path / "o")
    assert code == 1


# --- check


def test_check_smoke_config_passes(capsys):
    code, out, _ = run(capsys, "check", "--config", CONFIGS / "smoke.toml")
    assert code == 0
    assert "plr: conditional orthogonality" in out
    assert "FAIL (expected FAIL)  plr-naive: conditional orthogonality" in out
    assert "learner oracle: first-stage rate" in out
    assert out.strip().endswith("overall: PASS")


def test_check_unexpected_outcome_exit_3(capsys, tmp_path):
    cfg = tmp_path / "wrong.toml"
    cfg.write_text(
        '[moments]\nmodels = ["plr"]\n'
        '[learners.zero]\nkind = "constant"\nexpect_rate = "ok"\n'
        "[check]\ndraws_per_point = 1000\nscore_sample = 1000\n"
    )
    code, out, _ = run(capsys, "check", "--config", cfg)
    assert code == 3
    assert "!! FAIL  learner zero" in out
