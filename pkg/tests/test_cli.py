import json

import numpy as np
import pytest

from whitefem.cli import ConfigError, build_config, config_hash, main, parse_config_text

CONVERGE_CONFIG = """\
# small convergence study
domain = rectangle
lx = 3.141592653589793
ly = 3.141592653589793
bc = neumann
lambda = 1.0
r = 1.1
levels = 4, 8, 16
basis_count = 256
seed = 7
"""

COVARIANCE_CONFIG = """\
domain = rectangle
lx = 3.141592653589793
ly = 3.141592653589793
bc = neumann
lambda = 1.0
levels = 8
samples = 4000
seed = 11
points = 1.0,1.0; 1.5707963267948966,1.5707963267948966
"""

TRUNCATE_CONFIG = """\
domain = interval
a = 0
b = 3.141592653589793
bc = dirichlet
lambda = 1.0
r = 0.6
modes = 2000
truncations = 10, 40, 160
"""


def run_cli(tmp_path, experiment, config_text, extra=()):
    cfg = tmp_path / "config.txt"
    cfg.write_text(config_text)
    outdir = tmp_path / "out"
    code = main([experiment, "--config", str(cfg), "--outdir", str(outdir), *extra])
    return code, outdir


class TestConfigParsing:
    def test_parses_key_values_and_comments(self):
        raw = parse_config_text("a = 1 # trailing\n# full comment\nb = two words\n")
        assert raw == {"a": "1", "b": "two words"}

    def test_rejects_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_config_text("not a pair\n")

    def test_rejects_duplicate_key(self):
        with pytest.raises(ConfigError):
            parse_config_text("a = 1\na = 2\n")

    def test_robin_without_beta_names_field(self):
        raw = parse_config_text("domain = interval\nb = 1\nbc = robin\nlambda = 1\n")
        with pytest.raises(ConfigError) as err:
            build_config("solve", raw)
        assert err.value.field == "beta"

    def test_negative_lambda_rejected(self):
        raw = parse_config_text("domain = interval\nb = 1\nbc = neumann\nlambda = -2\n")
        with pytest.raises(ConfigError) as err:
            build_config("solve", raw)
        assert err.value.field == "lambda"

    def test_inadmissible_r_rejected(self):
        raw = parse_config_text(
            "domain = rectangle\nlx = 1\nly = 1\nbc = neumann\nlambda = 1\nr = -0.2\n"
        )
        with pytest.raises(ConfigError) as err:
            build_config("converge", raw)
        assert err.value.field == "r"

    def test_seed_override_changes_hash(self):
        raw = parse_config_text("domain = interval\nb = 1\nbc = neumann\nlambda = 1\nseed = 1\n")
        c1 = build_config("solve", raw)
        c2 = build_config("solve", raw, seed_override=99)
        assert c2.seed == 99
        assert config_hash(c1) != config_hash(c2)


class TestCliRuns:
    def test_converge_end_to_end(self, tmp_path):
        code, outdir = run_cli(tmp_path, "converge", CONVERGE_CONFIG)
        assert code == 0
        (report_path,) = outdir.glob("converge/*/report.json")
        report = json.loads(report_path.read_text())
        assert "fitted_rate" in report
        assert np.isfinite(report["fitted_rate"])
        assert len(report["levels"]) == 3
        csv_lines = (report_path.parent / "levels.csv").read_text().splitlines()
        assert any(line.startswith("# config_hash") for line in csv_lines)
        assert "h,error_sq,tail_bound" in csv_lines

    def test_malformed_config_exits_2(self, tmp_path, capsys):
        bad = CONVERGE_CONFIG.replace("bc = neumann", "bc = robin")
        code, _ = run_cli(tmp_path, "converge", bad)
        assert code == 2
        assert "beta" in capsys.readouterr().err

    def test_rerun_is_byte_identical(self, tmp_path):
        code1, outdir = run_cli(tmp_path, "covariance", COVARIANCE_CONFIG)
        files = sorted(outdir.glob("covariance/*/*"))
        first = {f.name: f.read_bytes() for f in files}
        code2, _ = run_cli(tmp_path, "covariance", COVARIANCE_CONFIG)
        second = {f.name: f.read_bytes() for f in sorted(outdir.glob("covariance/*/*"))}
        assert code1 == code2 == 0
        assert first == second

    def test_worker_flag_does_not_change_output(self, tmp_path):
        _, outdir = run_cli(tmp_path, "covariance", COVARIANCE_CONFIG, extra=["--workers", "1"])
        one = {f.name: f.read_bytes() for f in sorted(outdir.glob("covariance/*/*"))}
        _, outdir2 = run_cli(tmp_path, "covariance", COVARIANCE_CONFIG, extra=["--workers", "4"])
        four = {f.name: f.read_bytes() for f in sorted(outdir2.glob("covariance/*/*"))}
        assert one == four

    def test_seed_override_separates_output_dirs(self, tmp_path):
        _, outdir = run_cli(tmp_path, "truncate", TRUNCATE_CONFIG, extra=["--seed", "1"])
        _, outdir = run_cli(tmp_path, "truncate", TRUNCATE_CONFIG, extra=["--seed", "2"])
        assert len(list(outdir.glob("truncate/*"))) == 2

    def test_truncate_reports_decreasing_values(self, tmp_path):
        code, outdir = run_cli(tmp_path, "truncate", TRUNCATE_CONFIG)
        assert code == 0
        (report_path,) = outdir.glob("truncate/*/report.json")
        report = json.loads(report_path.read_text())
        assert report["strictly_decreasing"] is True

    def test_solve_constant_load(self, tmp_path):
        config = (
            "domain = rectangle\nlx = 1\nly = 1\nbc = neumann\nlambda = 2.0\n"
            "levels = 4\nload_constant = 1.0\n"
        )
        code, outdir = run_cli(tmp_path, "solve", config)
        assert code == 0
        (report_path,) = outdir.glob("solve/*/report.json")
        report = json.loads(report_path.read_text())
        assert report["max_abs"] == pytest.approx(0.5, rel=1e-10)

    def test_l2diag_reports_finite_tail(self, tmp_path):
        config = (
            "domain = rectangle\nlx = 3.14159\nly = 3.14159\nbc = neumann\n"
            "lambda = 1.0\nmodes = 5000\n"
        )
        code, outdir = run_cli(tmp_path, "l2diag", config)
        assert code == 0
        (report_path,) = outdir.glob("l2diag/*/report.json")
        report = json.loads(report_path.read_text())
        assert report["finite"] is True

    def test_holder_experiment(self, tmp_path):
        x0 = np.array([np.pi / 2, np.pi / 2])
        seps = np.geomspace(0.05, 0.8, 5)
        pts = []
        for s in seps:
            pts.append(f"{x0[0]},{x0[1]}")
            pts.append(f"{x0[0] + s},{x0[1]}")
        config = (
            "domain = rectangle\nlx = 3.141592653589793\nly = 3.141592653589793\n"
            "bc = neumann\nlambda = 1.0\nlevels = 12\npoints = " + "; ".join(pts) + "\n"
        )
        code, outdir = run_cli(tmp_path, "holder", config)
        assert code == 0
        (report_path,) = outdir.glob("holder/*/report.json")
        report = json.loads(report_path.read_text())
        assert 0.3 < report["alpha"] < 1.2

    def test_sample_experiment_records_paths(self, tmp_path):
        config = (
            "domain = interval\na = 0\nb = 1\nbc = dirichlet\nlambda = 1.0\n"
            "levels = 16\nsamples = 50\npoints = 0.5\nseed = 3\n"
        )
        code, outdir = run_cli(tmp_path, "sample", config)
        assert code == 0
        (csv_path,) = outdir.glob("sample/*/levels.csv")
        rows = [l for l in csv_path.read_text().splitlines() if not l.startswith("#")]
        assert rows[0] == "path,p0"
        assert len(rows) == 51

    def test_mesh_file_input(self, tmp_path):
        from whitefem.mesh import build_rectangle_mesh, write_mesh

        mesh_path = tmp_path / "mesh.txt"
        write_mesh(build_rectangle_mesh(1.0, 1.0, 4, 4), mesh_path)
        config = (
            f"mesh_file = {mesh_path}\nbc = neumann\nlambda = 1.0\nlevels = 1\n"
            "samples = 20\npoints = 0.5,0.5\nseed = 1\n"
        )
        code, outdir = run_cli(tmp_path, "sample", config)
        assert code == 0


def test_numerical_failure_exits_3(tmp_path, capsys):
    # clockwise triangle in an imported mesh trips validation at run time
    bad_mesh = tmp_path / "bad_mesh.txt"
    bad_mesh.write_text(
        "2 3 1 3\n0 0\n1 0\n0 1\n0 2 1\n0 1 0\n1 2 1\n2 0 2\n"
    )
    config = f"mesh_file = {bad_mesh}\nbc = neumann\nlambda = 1.0\nlevels = 1\nsamples = 10\n"
    cfg = tmp_path / "config.txt"
    cfg.write_text(config)
    code = main(["sample", "--config", str(cfg), "--outdir", str(tmp_path / "out")])
    assert code == 3
    assert "numerical failure" in capsys.readouterr().err
