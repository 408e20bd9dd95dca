import csv
import subprocess
import sys
from pathlib import Path

import pytest

from flashback import cli
from flashback import metrics as mt
from flashback.cli import ConfigError, parse_config

ROOT = Path(__file__).resolve().parents[1]

SMALL = """
benchmark.T=3
benchmark.K=2
benchmark.n=6
benchmark.train_per_class=15
benchmark.test_per_class=15
host.epochs=4
fl.E1=1
fl.E2=3
seeds=0-1
"""


def write_cfg(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults_and_overrides(self):
        cfg = parse_config("hosts=reg,dyn\nhost.lr=0.01\nhost.reg.alpha_s=3\nseeds=1,3-4\nfl.alpha_p=0.5\n")
        assert [h.category for h in cfg.hosts] == ["reg", "dyn"]
        assert all(h.lr == 0.01 for h in cfg.hosts)
        assert cfg.hosts[0].alpha_s == 3.0 and cfg.hosts[1].alpha_s == 5.0
        assert cfg.seeds == [1, 3, 4]
        assert cfg.fl.alpha_p == 0.5

    def test_set_overrides_file(self):
        cfg = parse_config("host.epochs=10\n", overrides=["host.epochs=12", "fl.E1=2", "fl.E2=10"])
        assert cfg.hosts[0].epochs == 12 and cfg.fl.E1 == 2

    def test_comments_and_blank_lines(self):
        cfg = parse_config("# comment\n\nmodes=CL  # trailing\n")
        assert cfg.modes == ["CL"]

    def test_shipped_default(self):
        cfg = cli.load_config(ROOT / "configs" / "default.cfg")
        assert len(cfg.hosts) == 4 and cfg.seeds == list(range(10))
        assert cfg.fl.E1 + cfg.fl.E2 == cfg.hosts[0].epochs

    @pytest.mark.parametrize(
        "text,where",
        [
            ("nonsense\n", "exp.cfg:1"),
            ("hosts=bogus\n", "hosts"),
            ("modes=XL\n", "modes"),
            ("seeds=a-b\n", "seeds"),
            ("\nhost.epochs=many\n", "exp.cfg:2"),
            ("benchmark.colour=red\n", "benchmark.colour"),
            ("host.reg.nope=1\n", "host.reg.nope"),
            ("fl.E2=0\n", "E2"),
            ("benchmark.T=0\n", "T"),
            ("benchmark.csv=x.csv\n", "partition"),
            ("regimes=ZZ\n", "regimes"),
        ],
    )
    def test_errors_name_the_key(self, text, where):
        with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
            parse_config(text, origin="exp.cfg")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            cli.load_config(tmp_path / "absent.cfg")


class TestRun:
    def test_single_host_single_seed(self, tmp_path):
        cfg = write_cfg(tmp_path, SMALL + "hosts=distill\nmodes=CL\nseeds=0\n")
        assert cli.main(["run", str(cfg), "--output", str(tmp_path / "out")]) == 0
        out = tmp_path / "out"
        assert sorted(p.name for p in out.glob("*_matrix.csv")) == ["distill_CL_seed0_matrix.csv"]
        res = rows(out / "results.csv")
        assert [(r["host"], r["mode"], r["regime"]) for r in res] == [("distill", "CL", "CI"), ("distill", "CL", "TI")]
        assert list(res[0]) == list(cli.RESULT_COLUMNS)

    def test_outputs_are_byte_deterministic(self, tmp_path):
        cfg = write_cfg(tmp_path, SMALL + "hosts=replay,dyn\n")
        for d in ("a", "b"):
            assert cli.main(["run", str(cfg), "--output", str(tmp_path / d), "--emit-plot-data"]) == 0
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        assert "plot_data.csv" in names and "ttest.csv" in names
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()

    def test_rows_sorted_and_recomputable(self, tmp_path):
        cfg = write_cfg(tmp_path, SMALL + "hosts=reg,distill\n")
        assert cli.main(["run", str(cfg), "--output", str(tmp_path / "o")]) == 0
        res = cli.read_results_csv(tmp_path / "o" / "results.csv")
        keys = [(r["host"], r["mode"], r["regime"], r["seed"]) for r in res]
        assert keys == sorted(keys)
        for r in res:
            mats = mt.read_matrix_csv(tmp_path / "o" / f"{r['host']}_{r['mode']}_seed{r['seed']}_matrix.csv")
            assert mt.report(mats[r["regime"]]).values() == {m: r[m] for m in mt.METRIC_NAMES}

    def test_ttest_and_budget_files(self, tmp_path):
        cfg = write_cfg(tmp_path, SMALL + "hosts=distill\nseeds=0-2\n")
        assert cli.main(["run", str(cfg), "--output", str(tmp_path / "o")]) == 0
        tt = rows(tmp_path / "o" / "ttest.csv")
        assert [(r["host"], r["regime"], r["n"]) for r in tt] == [("distill", "CI", "3"), ("distill", "TI", "3")]
        budget = rows(tmp_path / "o" / "budget.csv")
        assert len(budget) == 6 and all(r["budget"] == "pass" for r in budget)

    def test_env_var_overrides_output(self, tmp_path, monkeypatch):
        cfg = write_cfg(tmp_path, SMALL + "hosts=distill\nmodes=CL\nseeds=0\noutput=ignored\n")
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env_out"))
        assert cli.main(["run", str(cfg), "--output", str(tmp_path / "flag_out")]) == 0
        assert (tmp_path / "env_out" / "results.csv").exists()
        assert not (tmp_path / "flag_out").exists()

    def test_config_error_exit_code(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "hosts=nobody\n")
        assert cli.main(["run", str(cfg)]) == 2
        assert "hosts" in capsys.readouterr().err

    def test_numeric_failure_marks_run(self, tmp_path, capsys):
        # a huge step on the regularized host diverges; the other host still completes
        cfg = write_cfg(tmp_path, SMALL + "hosts=distill,reg\nmodes=CL\nseeds=0\nhost.reg.lr=1e6\n")
        assert cli.main(["run", str(cfg), "--output", str(tmp_path / "o")]) == 1
        res = rows(tmp_path / "o" / "results.csv")
        status = {r["host"]: r["AA"] for r in res}
        assert status["reg"] == cli.FAILED and status["distill"] != cli.FAILED
        assert "run failed" in capsys.readouterr().err

    def test_csv_benchmark(self, tmp_path):
        from flashback.tasks import SyntheticSpec, generate_synthetic, write_csv

        s = generate_synthetic(SyntheticSpec(T=2, K=2, n=4, train_per_class=10, test_per_class=10))
        write_csv(s, tmp_path / "train.csv", "train")
        write_csv(s, tmp_path / "test.csv", "test")
        text = (f"benchmark.csv={tmp_path / 'train.csv'}\nbenchmark.test_csv={tmp_path / 'test.csv'}\n"
                "benchmark.partition=0,1;2,3\nhosts=distill\nmodes=CL\nseeds=0\nhost.epochs=2\n")
        cfg = write_cfg(tmp_path, text)
        assert cli.main(["run", str(cfg), "--output", str(tmp_path / "o")]) == 0
        assert len(rows(tmp_path / "o" / "results.csv")) == 2


class TestSweep:
    def test_alpha_p_rows_and_baseline(self, tmp_path):
        cfg = write_cfg(tmp_path, SMALL + "hosts=distill,replay\nseeds=0\n")
        out = tmp_path / "sw"
        assert cli.main(["sweep", str(cfg), "--param", "alpha_p", "--values", "0,0.01,1",
                         "--output", str(out)]) == 0
        sweep = rows(out / "sweep.csv")
        ci = [r for r in sweep if r["regime"] == "CI"]
        for host in ("distill", "replay"):
            assert len([r for r in ci if r["host"] == host]) == 3
        # the alpha_p = 0 point is the plain run
        assert cli.main(["run", str(cfg), "--set", "modes=CL", "--output", str(tmp_path / "cl")]) == 0
        cl = {(r["host"], r["regime"]): r for r in rows(tmp_path / "cl" / "results.csv")}
        for r in sweep:
            if r["sweep_value"] == "0.0":
                ref = cl[(r["host"], r["regime"])]
                assert all(r[m] == ref[m] for m in mt.METRIC_NAMES)

    def test_e1_sweep_passes_budget(self, tmp_path):
        cfg = write_cfg(tmp_path, SMALL + "hosts=reg\nseeds=0\n")
        out = tmp_path / "sw"
        assert cli.main(["sweep", str(cfg), "--param", "E1", "--values", "0,1,3", "--output", str(out)]) == 0
        for v in (0, 1, 3):
            budget = rows(out / f"E1={v}" / "budget.csv")
            assert budget and all(r["budget"] == "pass" for r in budget)
        assert len(rows(out / "sweep.csv")) == 6

    def test_bad_values(self, tmp_path):
        cfg = write_cfg(tmp_path, SMALL)
        assert cli.main(["sweep", str(cfg), "--param", "E1", "--values", "4"]) == 2
        assert cli.main(["sweep", str(cfg), "--param", "alpha_p", "--values", "x"]) == 2


class TestTheory:
    def test_default_passes(self, capsys):
        assert cli.main(["theory", "--cases", "10"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "checks passed" in out

    def test_tight_tolerance_fails_cleanly(self, tmp_path, capsys):
        report = tmp_path / "theory.txt"
        assert cli.main(["theory", "--cases", "5", "--tolerance", "1e-15", "--output", str(report)]) == 1
        assert "FAIL" in capsys.readouterr().out
        assert all(line.endswith(("PASS", "FAIL")) for line in report.read_text().splitlines())

    def test_category_filter(self, capsys):
        assert cli.main(["theory", "--category", "reg", "--cases", "5"]) == 0
        names = [line.split()[0] for line in capsys.readouterr().out.splitlines() if line.endswith(("PASS", "FAIL"))]
        assert names and all(n.startswith(("decomposition.reg", "recursion.", "fixedpoint.")) for n in names)

    def test_unknown_tolerance_key(self):
        assert cli.main(["theory", "--tol", "nope=1"]) == 2


class TestMetrics:
    def test_toy_matrix(self, tmp_path, capsys):
        A = mt.AccuracyMatrix.from_rows([[0.9], [0.7, 0.8]])
        mt.write_matrix_csv(tmp_path / "m.csv", {"CI": A})
        assert cli.main(["metrics", str(tmp_path / "m.csv")]) == 0
        machine = [line for line in capsys.readouterr().out.splitlines() if line.startswith("regime=")]
        regime, vals = cli.parse_machine_line(machine[0])
        assert regime == "CI"
        assert vals == mt.report(A).values()
        assert vals["AIA"] == pytest.approx(0.825, abs=1e-15) and vals["F"] == pytest.approx(0.2, abs=1e-15)

    def test_single_task_marks_na(self, tmp_path, capsys):
        mt.write_matrix_csv(tmp_path / "m.csv", {"TI": mt.AccuracyMatrix.from_rows([[0.7]])})
        assert cli.main(["metrics", str(tmp_path / "m.csv")]) == 0
        _, vals = cli.parse_machine_line(capsys.readouterr().out.splitlines()[-1])
        assert vals["F"] is None and vals["BWT"] is None and vals["AA"] == 0.7

    def test_malformed(self, tmp_path):
        (tmp_path / "bad.csv").write_text("nope\n")
        assert cli.main(["metrics", str(tmp_path / "bad.csv")]) == 2
        assert cli.main(["metrics", str(tmp_path / "missing.csv")]) == 2


def test_module_entry_point(tmp_path):
    mt.write_matrix_csv(tmp_path / "m.csv", {"CI": mt.AccuracyMatrix.from_rows([[0.5]])})
    proc = subprocess.run([sys.executable, "-m", "flashback.cli", "metrics", str(tmp_path / "m.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "regime=CI" in proc.stdout
