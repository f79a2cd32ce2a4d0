import csv
import json
import math

import numpy as np
import pytest

from curesem import cli
from curesem.estimators import FitError, initial_values
from curesem.likelihood import observed_loglik
from curesem.model import population_survival

SEM_ESTIMATES = {"phi": 3.281, "alpha0": -1.152, "alpha1": -0.488, "beta0": -2.756, "beta1": 2.801,
                 "gamma1": 0.381}


def write_csv(path, rows, header=("time", "status", "x_g", "z_g")):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


@pytest.fixture(scope="module")
def small_csv(tmp_path_factory, high_scenario_data):
    data = high_scenario_data
    rows = [[repr(float(t)), int(d), int(g), int(g)] for t, d, g in zip(data.time, data.delta, data.z[:, 1])]
    return write_csv(tmp_path_factory.mktemp("cli") / "small.csv", rows)


@pytest.fixture(scope="module")
def high_scenario_data():
    from curesem.distributions import RngStream
    from curesem.simulation import Scenario, generate_dataset, solve_censoring_rates
    from conftest import SCENARIOS

    sc = Scenario.from_json(SCENARIOS / "high_phi3_n200.json")
    return generate_dataset(sc, sc.true_params(), solve_censoring_rates(sc), RngStream(11, 0))


class TestReadDataset:
    def test_columns(self, small_csv):
        data = cli.read_dataset(small_csv)
        assert data.x_names == ["intercept", "x_g"] and data.z_names == ["intercept", "z_g"]
        assert len(data) == 200

    @pytest.mark.parametrize(
        "rows,message",
        [
            ([["1.0", "1", "1", "1"], ["2.0", "2", "1", "1"]], r":3: status must be 0 or 1"),
            ([["1.0", "1", "1", "1"], ["-1", "0", "1", "1"]], r":3: time must be positive"),
            ([["1.0", "1", "NA", "1"]], r":2: missing value in column 'x_g'"),
            ([["1.0", "1", "a", "1"]], r":2: column 'x_g' is not numeric"),
            ([["1.0", "1", "1"]], r":2: expected 4 fields, found 3"),
            ([["inf", "1", "1", "1"]], r":2: non-finite value"),
        ],
    )
    def test_line_numbered_errors(self, tmp_path, rows, message):
        path = write_csv(tmp_path / "bad.csv", rows)
        with pytest.raises(cli.DatasetError, match=message):
            cli.read_dataset(path)

    def test_missing_column(self, tmp_path):
        path = write_csv(tmp_path / "bad.csv", [["1.0", "1"]], header=("time", "x_g"))
        with pytest.raises(cli.DatasetError, match="missing required column 'status'"):
            cli.read_dataset(path)

    def test_missing_file_exit_code(self, tmp_path, capsys):
        assert cli.main(["fit", "--data", str(tmp_path / "nope.csv")]) == 2
        assert "nope.csv" in capsys.readouterr().err


class TestFit:
    def _fit(self, tmp_path, name, *extra):
        out = tmp_path / name
        code = cli.main(["fit", "--no-timing", "--out", str(out)] + list(extra))
        assert code == 0
        return out

    def test_sem_byte_identical(self, tmp_path, small_csv):
        args = ["--data", str(small_csv), "--algo", "sem", "--iters", "10", "--burnin", "5", "--seed", "7"]
        a = self._fit(tmp_path, "a.json", *args).read_bytes()
        b = self._fit(tmp_path, "b.json", *args).read_bytes()
        assert a == b
        c = self._fit(tmp_path, "c.json", *args[:-1], "8").read_bytes()
        assert a != c

    def test_report_round_trip(self, tmp_path, small_csv):
        out = self._fit(tmp_path, "dm.json", "--data", str(small_csv), "--algo", "dm")
        report = json.loads(out.read_text())
        data = cli.read_dataset(small_csv)
        params = cli.params_from_report(report, data)
        assert observed_loglik(data, params) == pytest.approx(report["loglik"], abs=1e-9)
        assert report["estimates"]["phi"] == params.phi
        for k, (lo, hi) in report["ci95"].items():
            assert lo == pytest.approx(report["estimates"][k] - 1.959963984540054 * report["se"][k])
        assert [c["profile"][1] for c in report["cure_rates"]] == [1.0, 2.0, 3.0, 4.0]

    def test_auto_init(self, tmp_path, small_csv):
        out = self._fit(tmp_path, "s.json", "--data", str(small_csv), "--iters", "3", "--burnin", "1")
        report = json.loads(out.read_text())
        ref = initial_values(cli.read_dataset(small_csv))
        np.testing.assert_allclose(list(report["init"].values()), ref.to_vector(), atol=1e-12)

    def test_init_from_report(self, tmp_path, small_csv):
        first = self._fit(tmp_path, "first.json", "--data", str(small_csv), "--algo", "dm")
        second = self._fit(tmp_path, "second.json", "--data", str(small_csv), "--algo", "dm", "--init", str(first))
        a, b = (json.loads(p.read_text()) for p in (first, second))
        assert b["loglik"] >= a["loglik"] - 1e-9

    def test_em_profile(self, tmp_path, small_csv):
        out = self._fit(tmp_path, "em.json", "--data", str(small_csv), "--algo", "em", "--phi-grid", "2:3:0.5")
        report = json.loads(out.read_text())
        assert [p["phi"] for p in report["profile"]] == [2.0, 2.5, 3.0]
        assert report["estimates"]["phi"] in (2.0, 2.5, 3.0)

    def test_cure_profile(self, tmp_path, small_csv):
        out = self._fit(tmp_path, "p.json", "--data", str(small_csv), "--algo", "dm", "--cure-profile", "z=2.5")
        assert json.loads(out.read_text())["cure_rates"][0]["profile"] == [1.0, 2.5]

    @pytest.mark.parametrize(
        "extra",
        [
            ["--algo", "dm", "--phi-grid", "1:2:0.1"],
            ["--algo", "em", "--iters", "10"],
            ["--algo", "sem", "--mc-samples", "5"],
            ["--algo", "em", "--phi-grid", "3:1:0.1"],
            ["--algo", "em", "--eps", "0"],
            ["--algo", "bogus"],
            ["--cure-profile", "z=1,2,3"],
        ],
    )
    def test_usage_errors(self, small_csv, extra, capsys):
        assert cli.main(["fit", "--data", str(small_csv)] + extra) == 2
        assert "curesem:" in capsys.readouterr().err

    def test_numeric_failure_exit_code(self, small_csv, monkeypatch, capsys):
        def boom(*a, **k):
            raise FitError("EM failed at every grid point", diagnostics={"profile": []})

        monkeypatch.setattr(cli, "fit_em", boom)
        assert cli.main(["fit", "--data", str(small_csv), "--algo", "em"]) == 3
        diag = json.loads(capsys.readouterr().out)
        assert diag["error"] == "FitError" and diag["diagnostics"] == {"profile": []}

    def test_env_seed(self, tmp_path, small_csv, monkeypatch):
        args = ["--data", str(small_csv), "--iters", "4", "--burnin", "1"]
        monkeypatch.setenv("CURESEM_SEED", "7")
        env = json.loads(self._fit(tmp_path, "env.json", *args).read_text())
        assert env["seed"] == 7
        flag = json.loads(self._fit(tmp_path, "flag.json", *args, "--seed", "7").read_text())
        assert env["estimates"] == flag["estimates"]
        # the flag wins over the environment
        other = json.loads(self._fit(tmp_path, "other.json", *args, "--seed", "9").read_text())
        assert other["seed"] == 9

    def test_bad_env_seed(self, small_csv, monkeypatch):
        monkeypatch.setenv("CURESEM_SEED", "abc")
        assert cli.main(["fit", "--data", str(small_csv), "--iters", "3", "--burnin", "1"]) == 2


class TestSimulate:
    def _scenario(self, tmp_path):
        path = tmp_path / "sc.json"
        path.write_text(json.dumps({"n": 80, "replicates": 2, "seed": 5}))
        return path

    def test_reproducible(self, tmp_path):
        sc = self._scenario(tmp_path)
        for tag in ("a", "b"):
            assert cli.main(["simulate", "--scenario", str(sc), "--algos", "dm", "--no-timing",
                             "--out-prefix", str(tmp_path / tag)]) == 0
        for suffix in ("_dm.tsv", "_dm_cure.tsv", "_raw.json"):
            assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()
        lines = (tmp_path / "a_dm.tsv").read_text().splitlines()
        assert lines[2].split("\t") == ["parameter", "truth", "estimate", "mean_se", "bias", "rmse", "cp95"]
        assert len(lines) == 3 + 6

    def test_invalid_scenario(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"n": 81}))
        assert cli.main(["simulate", "--scenario", str(bad), "--out-prefix", str(tmp_path / "x")]) == 2
        bad.write_text("[1, 2]")
        assert cli.main(["simulate", "--scenario", str(bad), "--out-prefix", str(tmp_path / "x")]) == 2

    def test_bad_algos(self, tmp_path):
        sc = self._scenario(tmp_path)
        assert cli.main(["simulate", "--scenario", str(sc), "--algos", "sem,foo",
                         "--out-prefix", str(tmp_path / "x")]) == 2


class TestDiagnose:
    def test_outputs(self, tmp_path, small_csv, high_scenario_data):
        fit = tmp_path / "fit.json"
        assert cli.main(["fit", "--data", str(small_csv), "--algo", "dm", "--out", str(fit)]) == 0
        prefix = tmp_path / "d"
        assert cli.main(["diagnose", "--fit", str(fit), "--data", str(small_csv), "--out-prefix", str(prefix)]) == 0
        with open(f"{prefix}_fitted.csv") as fh:
            rows = list(csv.DictReader(fh))
        firsts = [r for r in rows if float(r["time"]) == 0.0]
        assert len(firsts) == 4 and all(float(r["surv"]) == 1.0 for r in firsts)
        with open(f"{prefix}_residuals.csv") as fh:
            res = list(csv.DictReader(fh))
        assert len(res) == 200 and res[0]["subject_id"] == "0"
        with open(f"{prefix}_qq.csv") as fh:
            qq = [float(r["residual"]) for r in csv.DictReader(fh)]
        assert qq == sorted(qq)
        ks = json.loads(open(f"{prefix}_ks.json").read())
        assert 0 <= ks["D"] <= 1 and 0 <= ks["p"] <= 1
        assert set(ks["band_coverage"]) == {"1", "2", "3", "4"}

    def test_fitted_matches_model(self, tmp_path, small_csv):
        fit = tmp_path / "est.json"
        est = {"phi": 3.0, "alpha0": -1.5, "alpha1": 0.5, "beta0": -1.18, "beta1": 1.06, "gamma1": 0.3}
        fit.write_text(json.dumps({"estimates": est}))
        prefix = tmp_path / "m"
        assert cli.main(["diagnose", "--fit", str(fit), "--data", str(small_csv), "--out-prefix", str(prefix)]) == 0
        params = cli.params_from_report({"estimates": est})
        with open(f"{prefix}_fitted.csv") as fh:
            for r in csv.DictReader(fh):
                x = np.array([1.0, float(r["group"])])
                assert float(r["surv"]) == population_survival(float(r["time"]), params, x, x)

    def test_missing_covariate(self, tmp_path, small_csv):
        fit = tmp_path / "f.json"
        fit.write_text(json.dumps({"estimates": {}, "columns": {"x": ["intercept", "x_age"], "z": []}}))
        assert cli.main(["diagnose", "--fit", str(fit), "--data", str(small_csv),
                         "--out-prefix", str(tmp_path / "q")]) == 2

    def test_breast_residuals(self, tmp_path, breast_csv):
        fit = tmp_path / "sem.json"
        fit.write_text(json.dumps({"estimates": SEM_ESTIMATES}))
        prefix = tmp_path / "b"
        assert cli.main(["diagnose", "--fit", str(fit), "--data", str(breast_csv), "--out-prefix", str(prefix)]) == 0
        ks = json.loads(open(f"{prefix}_ks.json").read())
        assert ks["p"] > 0.2
        assert min(ks["band_coverage"].values()) >= 0.9
        assert math.isfinite(ks["D"])
