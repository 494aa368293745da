import json
import math
from pathlib import Path

import numpy as np
import pytest

from parahom.experiments import (
    ConfigError,
    default_config,
    fit_rate,
    load_config,
    run_corrector_decay,
    run_effective_f,
    run_estimate_mu,
    run_homog_rate,
    run_moment_decay,
    run_validate,
)
from parahom.experiments.cli import main as cli_main
from parahom.experiments.config import TWO_PHASE_D1, ExperimentConfig
from parahom.experiments.pipelines import fbar_csv_rows, load_fbar_csv
from parahom.experiments.report import canonical_json, config_hash, write_csv
from parahom.experiments.svg import loglog_plot
from parahom.environment import EnvironmentSpec


def small_validate_config(**over):
    base = dict(kind="validate", seeds=8, abp_samples=6, bounds_samples=6,
                subadd_samples=4, lipschitz_samples=10, vardecay_samples=12,
                equality_fields=3, audit_trials=300, levels=(0, 1))
    base.update(over)
    return default_config(**base)


class TestRateFit:
    def test_exact_power_law(self):
        xs = [1.0, 2.0, 4.0, 8.0]
        fit = fit_rate([(x, 5.0 * x * x) for x in xs])
        assert fit.exponent == pytest.approx(2.0, abs=1e-12)
        assert fit.r2 == pytest.approx(1.0)
        assert fit.ci[0] == pytest.approx(2.0, abs=1e-9)

    def test_constant_y(self):
        fit = fit_rate([(x, 3.0) for x in (1.0, 2.0, 4.0)])
        assert fit.exponent == pytest.approx(0.0, abs=1e-12)
        assert fit.r2 == 1.0

    def test_noisy_half_power(self):
        gen = np.random.default_rng(0)
        xs = np.geomspace(1, 100, 12)
        ys = xs ** 0.5 * (1 + gen.uniform(-0.05, 0.05, size=12))
        fit = fit_rate(list(zip(xs, ys)))
        assert 0.4 <= fit.exponent <= 0.6

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            fit_rate([(1.0, 1.0), (2.0, 2.0)])
        with pytest.raises(ValueError):
            fit_rate([(1.0, 1.0), (2.0, -2.0), (3.0, 1.0)])


class TestConfig:
    def test_defaults_valid(self):
        for kind in ("validate", "estimate-mu", "effective-f", "corrector-decay",
                     "homog-rate", "moment-decay"):
            cfg = default_config(kind)
            assert cfg.kind == kind

    def test_toml_roundtrip(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("\n".join([
            'kind = "estimate-mu"',
            "seeds = 12",
            "levels = [0, 1]",
            "ell_grid = [-0.5, 0.5]",
            "[environment]",
            "dimension = 1",
            'lambda = 1.0',
            'Lambda = 2.0',
            'family = "linear"',
            "controls = [[1.0], [2.0]]",
            "offset_range = [-0.5, 0.5]",
            "seed = 7",
        ]))
        cfg = load_config(p)
        assert cfg.seeds == 12
        assert cfg.environment.Lam == 2.0
        assert cfg.levels == (0, 1)

    def test_json_roundtrip(self, tmp_path):
        cfg = default_config("validate", seeds=5)
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg.to_dict()))
        back = load_config(p)
        assert back == cfg

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"kind": "validate", "bogus": 1,
                                 "environment": TWO_PHASE_D1.to_dict()}))
        with pytest.raises(ConfigError):
            load_config(p)

    def test_missing_file_and_bad_suffix(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.toml")
        p = tmp_path / "c.yaml"
        p.write_text("kind: validate")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_bad_environment_table(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"kind": "validate",
                                 "environment": {"dimension": 1}}))
        with pytest.raises(ConfigError):
            load_config(p)

    def test_config_hash_stable(self):
        cfg = default_config("validate")
        assert config_hash(cfg.to_dict()) == config_hash(cfg.to_dict())


class TestReportWriters:
    def test_csv_deterministic(self, tmp_path):
        rows = [{"a": 1, "b": 0.1}, {"a": 2, "b": float(np.float64(1) / 3)}]
        p1 = write_csv(tmp_path / "x.csv", ["a", "b"], rows)
        p2 = write_csv(tmp_path / "y.csv", ["a", "b"], rows)
        assert p1.read_bytes() == p2.read_bytes()
        assert "0.3333333333333333" in p1.read_text()

    def test_canonical_json_sorted(self):
        s = canonical_json({"b": 1, "a": np.float64(0.5)})
        assert s.index('"a"') < s.index('"b"')

    def test_svg_deterministic(self, tmp_path):
        xs = [0.1, 0.01, 0.001]
        ys = [0.2, 0.05, 0.01]
        a = loglog_plot(tmp_path / "a.svg", xs, ys, exponent=0.6, intercept=0.1)
        b = loglog_plot(tmp_path / "b.svg", xs, ys, exponent=0.6, intercept=0.1)
        assert a.read_bytes() == b.read_bytes()
        assert a.read_text().startswith("<svg")


class TestPipelines:
    def test_estimate_mu_outputs(self, tmp_path):
        cfg = default_config("estimate-mu", seeds=6, levels=(0,),
                             ell_grid=(-0.5, 0.5))
        rep = run_estimate_mu(cfg, out_dir=tmp_path)
        assert rep["ok"]
        samples = (tmp_path / "samples.csv").read_text().splitlines()
        assert samples[0] == "level,anchor,ell,M,seed,starred,method,refinement,value"
        assert len(samples) == 1 + 6 * 2 * 2  # paired rows per seed per ell
        stats = (tmp_path / "stats.csv").read_text().splitlines()
        assert len(stats) == 1 + 2
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config_hash"] == config_hash(cfg.to_dict())
        assert len(manifest["seeds"]) == 6

    def test_estimate_mu_rerun_byte_identical(self, tmp_path):
        cfg = default_config("estimate-mu", seeds=4, levels=(0,), ell_grid=(0.0,))
        run_estimate_mu(cfg, out_dir=tmp_path / "a")
        run_estimate_mu(cfg, out_dir=tmp_path / "b")
        for name in ("samples.csv", "stats.csv", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_effective_f_csv_roundtrip(self, tmp_path):
        cfg = default_config("effective-f", m_grid=(-1.0, 0.0, 1.0),
                             fbar_level=1, fbar_seeds=8, fbar_tol=1e-2)
        rep = run_effective_f(cfg, out_dir=tmp_path)
        assert rep["ok"]
        table = load_fbar_csv(tmp_path / "fbar.csv")
        assert np.all(np.diff(table.values) <= 0)
        header, rows = fbar_csv_rows(table)
        assert header[:2] == ["m", "fbar"]
        assert len(rows) == 3

    def test_corrector_pipeline(self, tmp_path):
        cfg = default_config("corrector-decay", seeds=4, levels=(1, 2),
                             fbar_level=1, fbar_seeds=8, fbar_tol=1e-2)
        rep = run_corrector_decay(cfg, out_dir=tmp_path)
        assert (tmp_path / "rates.csv").exists()
        assert (tmp_path / "report.json").exists()
        assert len(rep["mean_norms"]) == 2

    def test_moment_decay_degenerate_env(self):
        det = EnvironmentSpec(dimension=1, lam=1.0, Lam=1.0, family="linear",
                              controls=((1.0,),), offset_range=(0.3, 0.3), seed=1)
        cfg = default_config("moment-decay", environment=det, seeds=4,
                            levels=(0, 1), fbar_level=1, fbar_seeds=2,
                            fbar_tol=1e-3)
        rep = run_moment_decay(cfg)
        assert rep["degenerate"]
        assert rep["ok"]

    def test_homog_rate_small(self, tmp_path):
        cfg = default_config("homog-rate", seeds=3, epsilons=(1, 2),
                             fbar_level=1, fbar_seeds=12, fbar_tol=1e-2,
                             dx_audit=False,
                             m_grid=(-0.5, 0.0, 0.5, 1.0, 1.5, 2.0))
        rep = run_homog_rate(cfg, out_dir=tmp_path)
        assert not rep["zero_variance"]
        assert len(rep["errors"]) == 2
        assert rep["errors"][1] < rep["errors"][0]  # smaller eps, smaller error
        assert (tmp_path / "rates.csv").exists()

    def test_homog_rate_zero_variance_flag(self):
        det = EnvironmentSpec(dimension=1, lam=1.0, Lam=1.0, family="linear",
                              controls=((1.0,),), offset_range=(0.0, 0.0), seed=1)
        cfg = default_config("homog-rate", environment=det, seeds=2,
                             epsilons=(1, 2), fbar_level=1, fbar_seeds=2,
                             fbar_tol=1e-3, dx_audit=False,
                             m_grid=(-0.5, 0.0, 0.5, 1.0, 1.5, 2.0))
        rep = run_homog_rate(cfg)
        assert rep["zero_variance"]
        assert rep["beta"] is None

    def test_validate_small_passes(self, tmp_path):
        cfg = small_validate_config()
        rep = run_validate(cfg, out_dir=tmp_path)
        assert rep["ok"], {k: v["ok"] for k, v in rep["checks"].items()}
        data = json.loads((tmp_path / "report.json").read_text())
        assert data["ok"]

    def test_validate_detects_corrupt_environment(self):
        # a control below lambda breaks the Pucci sandwich (detected by the
        # audit) while staying CFL-stable, so the run completes with exit 1
        bad_env = EnvironmentSpec(dimension=1, lam=1.0, Lam=1.5, family="linear",
                                  controls=((0.5,), (1.5,)),
                                  offset_range=(-0.5, 0.5), seed=3)
        cfg = small_validate_config(environment=bad_env)
        rep = run_validate(cfg)
        assert not rep["ok"]
        assert not rep["checks"]["audits"]["ok"]


class TestCLI:
    def test_validate_exit_codes(self, tmp_path, capsys):
        cfg = small_validate_config()
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg.to_dict()))
        code = cli_main(["validate", "--config", str(p), "--out",
                         str(tmp_path / "out")])
        assert code == 0
        assert (tmp_path / "out" / "report.json").exists()

    def test_cli_config_error_is_2(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"kind": "validate", "nope": 1,
                                 "environment": TWO_PHASE_D1.to_dict()}))
        assert cli_main(["validate", "--config", str(p)]) == 2

    def test_cli_check_failure_is_1(self, tmp_path):
        bad_env = EnvironmentSpec(dimension=1, lam=1.0, Lam=1.5, family="linear",
                                  controls=((0.5,), (1.5,)),
                                  offset_range=(-0.5, 0.5), seed=3)
        cfg = small_validate_config(environment=bad_env)
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg.to_dict()))
        assert cli_main(["validate", "--config", str(p), "--out",
                         str(tmp_path / "out")]) == 1

    def test_cli_threads_env_override(self, tmp_path, monkeypatch):
        cfg = default_config("estimate-mu", seeds=4, levels=(0,), ell_grid=(0.0,))
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg.to_dict()))
        monkeypatch.setenv("PARAHOM_THREADS", "2")
        code = cli_main(["estimate-mu", "--config", str(p), "--out",
                         str(tmp_path / "out")])
        assert code == 0

    def test_cli_numerical_failure_is_3(self, tmp_path):
        # Lambda understates the actual diffusion, so the CFL-admissible step
        # is unstable and the solve blows up
        unstable = EnvironmentSpec(dimension=1, lam=1.0, Lam=1.0, family="linear",
                                   controls=((3.0,),), offset_range=(0.5, 0.5),
                                   seed=1)
        cfg = default_config("corrector-decay", environment=unstable, seeds=2,
                             levels=(1, 2), fbar_level=1, fbar_seeds=2,
                             fbar_tol=1e-2)
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg.to_dict()))
        code = cli_main(["corrector-decay", "--config", str(p), "--out",
                         str(tmp_path / "out")])
        assert code == 3


def test_validate_rerun_byte_identical(tmp_path):
    cfg = small_validate_config()
    run_validate(cfg, out_dir=tmp_path / "a")
    run_validate(cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == \
        (tmp_path / "b" / "report.json").read_bytes()
