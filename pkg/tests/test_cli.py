"""Command-line surface: config round trips, run-directory persistence,
subcommand exit discipline, and the frozen on-disk column orders."""

import json
import math
import os

import numpy as np
import pytest

from annkin.cli import (
    THREADS_ENV,
    _format_value,
    _parse_value,
    load_run,
    main,
    parse_overrides,
    read_config_file,
    svg_plot,
    sweep_seeds,
    write_run,
)
from annkin.core import ConfigError, SimConfig

# Column orders are a compatibility contract: external tooling indexes these
# files positionally, so any reordering must show up as a test failure here.
FROZEN_HEADERS = {
    "moments.csv": "t,tau,n,u_1,u_2,u_3,T,m1,m3,sigma_n,sigma_T,sigma_m1,"
                   "sigma_E,count",
    "coefficients.csv": "tau,a,b,A,B,Bv_1,Bv_2,Bv_3,stderr_a,stderr_b",
    "snapshots.csv": "snapshot,t,tau,count,n,T,entropy,sigma_entropy,"
                     "exp_weight,exp_moment,sigma_exp_moment,m_0.0,m_0.5,"
                     "m_1.0,m_1.5,m_2.0,m_2.5,m_3.0,m_3.5,m_4.0,m_4.5,m_5.0,"
                     "m_5.5,m_6.0",
    "histograms.csv": "snapshot,t,tau,bin,r_mid,density,stderr",
    "batch_moments.csv": "snapshot,batch,m_0.0,m_0.5,m_1.0,m_1.5,m_2.0,"
                         "m_2.5,m_3.0,m_3.5,m_4.0,m_4.5,m_5.0,m_5.5,m_6.0",
    "profile.csv": "r_mid,density,stderr",
}

ROUND_TRIP_FILES = ["config.txt", "moments.csv", "coefficients.csv",
                    "snapshots.csv", "histograms.csv", "batch_moments.csv",
                    "profile.csv", "meta.json"]


@pytest.fixture(scope="module")
def tiny_run_dir(tmp_path_factory):
    """A fast full-featured run: annihilating, past the profile burn-in, with
    checkpoint and SVGs, so every persisted file exists."""
    out = tmp_path_factory.mktemp("tinyrun")
    rc = main(["simulate", "--out-dir", str(out), "--svg",
               "particles=3000", "tau_end=7.0", "snapshot_tau_interval=0.5",
               "pair_samples=20000", "min_particles=100", "batches=8",
               "seed=555"])
    assert rc == 0
    return str(out)


# ---------------------------------------------------------------------------
# config value parsing and formatting
# ---------------------------------------------------------------------------

class TestConfigValues:
    def test_every_field_round_trips(self):
        cfg = SimConfig()
        for name, value in cfg.as_dict().items():
            if name == "u0":
                value = tuple(value)  # as_dict stores it as a list
            text = _format_value(name, value)
            back = _parse_value(name, text)
            assert back == value, name
            assert type(back) is type(value), name

    def test_floats_round_trip_bitwise(self):
        for value in (1.0 / 3.0, 0.1 + 0.2, math.inf, 5e-324, 1e308):
            back = _parse_value("tau_end", _format_value("tau_end", value))
            assert back == value

    def test_u0_tuple(self):
        assert _parse_value("u0", _format_value("u0", (0.5, -1.25, 3.0))) \
            == (0.5, -1.25, 3.0)
        assert _parse_value("u0", "") == ()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            _parse_value("bogus", "3")

    def test_bad_int_rejected(self):
        with pytest.raises(ConfigError):
            _parse_value("particles", "many")

    def test_bad_float_rejected(self):
        with pytest.raises(ConfigError):
            _parse_value("alpha", "one half")

    def test_parse_overrides(self):
        out = parse_overrides(["alpha=0.1", "seed = 9"])
        assert out == {"alpha": 0.1, "seed": 9}

    def test_override_without_equals_rejected(self):
        with pytest.raises(ConfigError):
            parse_overrides(["alpha"])


class TestReadConfigFile:
    def test_comments_blanks_and_spacing(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# a comment\n"
                     "\n"
                     "alpha = 0.02   # trailing comment\n"
                     "  particles=500\n"
                     "ic = bimodal\n")
        assert read_config_file(str(p)) == {"alpha": 0.02, "particles": 500,
                                            "ic": "bimodal"}

    def test_line_without_equals_reports_lineno(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("alpha = 0.02\n\nnot a pair\n")
        with pytest.raises(ConfigError, match=":3:"):
            read_config_file(str(p))

    def test_unknown_key_in_file_rejected(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("granularity = 3\n")
        with pytest.raises(ConfigError, match="granularity"):
            read_config_file(str(p))


# ---------------------------------------------------------------------------
# seed splitting
# ---------------------------------------------------------------------------

class TestSweepSeeds:
    def test_deterministic_and_distinct(self):
        a = sweep_seeds(909, 4)
        b = sweep_seeds(909, 4)
        assert a == b
        assert len(set(a)) == 4
        assert sweep_seeds(910, 4) != a

    def test_matches_spawn_contract(self):
        # documented scheme: spawn k children, one 64-bit word each, so a
        # sweep is reproducible from (master seed, alpha order) alone
        children = np.random.SeedSequence(777).spawn(2)
        want = [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]
        assert sweep_seeds(777, 2) == want

    def test_prefix_stability(self):
        # extending a sweep keeps the earlier runs' seeds
        assert sweep_seeds(909, 5)[:3] == sweep_seeds(909, 3)


# ---------------------------------------------------------------------------
# svg writer
# ---------------------------------------------------------------------------

class TestSvgPlot:
    def test_linear_axes(self, tmp_path):
        p = tmp_path / "plot.svg"
        x = np.linspace(0.0, 5.0, 40)
        svg_plot(str(p), [("first", x, np.sin(x) + 2.0),
                          ("second", x, np.cos(x) + 2.0)],
                 "two curves", "time", "value")
        text = p.read_text()
        assert text.startswith("<svg") or "<svg" in text
        assert text.rstrip().endswith("</svg>")
        assert text.count("<polyline") >= 2
        assert "two curves" in text and "time" in text and "value" in text

    def test_log_axes(self, tmp_path):
        p = tmp_path / "plot.svg"
        x = np.geomspace(1.0, 1e3, 30)
        svg_plot(str(p), [("decay", x, x**-1.5)], "decay", "t", "n",
                 logx=True, logy=True)
        text = p.read_text()
        assert "<polyline" in text and "decay" in text


# ---------------------------------------------------------------------------
# top-level dispatch and exit codes
# ---------------------------------------------------------------------------

class TestMainDispatch:
    def test_no_command_exits_2(self, capsys):
        assert main([]) == 2

    def test_help_config(self, capsys):
        assert main(["--help-config"]) == 0
        assert "configuration keys" in capsys.readouterr().out

    def test_subcommand_help_config(self, capsys):
        assert main(["simulate", "--help-config"]) == 0
        assert "configuration keys" in capsys.readouterr().out

    def test_verify_constants(self, capsys):
        assert main(["verify-constants"]) == 0
        out = capsys.readouterr().out
        assert "constants: all ok" in out
        assert "MISMATCH" not in out

    def test_unknown_override_key_exits_2(self, capsys):
        assert main(["simulate", "tau_end=1.0", "bogus=3"]) == 2

    def test_invalid_config_value_exits_2(self, capsys):
        assert main(["simulate", "dim=1"]) == 2

    def test_missing_run_dir_exits_3(self, tmp_path, capsys):
        assert main(["rates", "--out-dir", str(tmp_path / "absent")]) == 3


# ---------------------------------------------------------------------------
# simulate: run directory contents
# ---------------------------------------------------------------------------

class TestSimulateRunDir:
    def test_all_files_written(self, tiny_run_dir):
        names = set(os.listdir(tiny_run_dir))
        expected = set(ROUND_TRIP_FILES) | {"checkpoint.bin", "moments.svg",
                                            "profile.svg"}
        assert expected <= names

    def test_frozen_headers(self, tiny_run_dir):
        for fname, header in FROZEN_HEADERS.items():
            with open(os.path.join(tiny_run_dir, fname)) as f:
                assert f.readline().rstrip("\r\n") == header, fname

    def test_config_txt_is_complete_and_typed(self, tiny_run_dir):
        data = read_config_file(os.path.join(tiny_run_dir, "config.txt"))
        assert set(data) == set(SimConfig().as_dict())
        assert data["particles"] == 3000
        assert data["tau_end"] == 7.0
        assert data["seed"] == 555
        assert data["alpha"] == 0.05  # untouched default persisted explicitly

    def test_meta_fields(self, tiny_run_dir):
        with open(os.path.join(tiny_run_dir, "meta.json")) as f:
            meta = json.load(f)
        assert set(meta) == {"termination", "steps", "collisions",
                             "annihilations", "have_numba"}
        assert meta["termination"] == "tau-end"
        assert meta["annihilations"] > 0

    def test_load_then_write_is_byte_identical(self, tiny_run_dir, tmp_path):
        loaded = load_run(tiny_run_dir)
        copy = tmp_path / "copy"
        write_run(str(copy), loaded)
        for fname in ROUND_TRIP_FILES:
            a = open(os.path.join(tiny_run_dir, fname), "rb").read()
            b = (copy / fname).read_bytes()
            assert a == b, fname

    def test_loaded_trajectory_matches_disk_counts(self, tiny_run_dir):
        loaded = load_run(tiny_run_dir)
        with open(os.path.join(tiny_run_dir, "moments.csv")) as f:
            nrows = sum(1 for _ in f) - 1
        assert len(loaded.records) == nrows
        assert len(loaded.record_sigmas) == nrows
        assert loaded.snapshots and loaded.steps > 0


# ---------------------------------------------------------------------------
# analysis subcommands on stored runs
# ---------------------------------------------------------------------------

class TestAnalysisCommands:
    def test_rates_on_reference_run(self, ref_run_dir, capsys):
        assert main(["rates", "--out-dir", ref_run_dir]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out
        assert "fit window" in out

    def test_profile_on_reference_run(self, ref_run_dir, capsys):
        assert main(["profile", "--out-dir", ref_run_dir, "--svg"]) == 0
        out = capsys.readouterr().out
        assert "L1 distance to gaussian" in out
        assert "predicted decay" in out  # annihilating run reports rates
        assert os.path.exists(os.path.join(ref_run_dir, "profile.svg"))

    def test_diagnose_on_relaxation_run(self, relax_run_dir, capsys):
        assert main(["diagnose", "--out-dir", relax_run_dir]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["ok"] is True
        by_name = {c["name"]: c for c in report["checks"]}
        assert set(by_name) == {
            "product-envelope", "m1-envelope", "cauchy-schwarz",
            "tau-consistency", "reconstruction", "entropy-floor",
            "entropy-production", "profile-positivity", "exp-moment",
            "moment-inequality", "jensen-ratio",
        }
        # no checkpoint was stored, so the convexity scan reports a skip
        assert by_name["jensen-ratio"]["status"] == "skip"
        for name, check in by_name.items():
            if name != "jensen-ratio":
                assert check["status"] == "pass", name


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

class TestSweep:
    def test_sweep_writes_tables_and_passes(self, tmp_path, monkeypatch,
                                            capsys):
        monkeypatch.setenv(THREADS_ENV, "1")
        out = tmp_path / "sweep"
        rc = main(["sweep", "--alphas", "0.02,0.05", "--rate-factor", "50",
                   "--out-dir", str(out), "particles=3000", "tau_end=4.0",
                   "snapshot_tau_interval=0.25", "pair_samples=20000",
                   "min_particles=100", "batches=8", "ic=bimodal",
                   "seed=777"])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "rate ratio" in printed and "ok" in printed

        with open(out / "sweep.csv") as f:
            assert f.readline().rstrip("\r\n") == "alpha,snapshot,tau,distance"
        with open(out / "sweep_rates.csv") as f:
            assert f.readline().rstrip("\r\n") == \
                "alpha,seed,rate,stderr,knee_tau,floored,npoints"
            rows = [line.rstrip("\n").split(",") for line in f]
        assert [r[0] for r in rows] == ["0.02", "0.05"]
        # per-alpha seeds follow the documented splitting of the master seed
        assert [int(r[1]) for r in rows] == sweep_seeds(777, 2)
        assert all(float(r[2]) > 0.0 for r in rows)

    def test_single_alpha_rejected(self, capsys):
        assert main(["sweep", "--alphas", "0.05"]) == 2
        assert main(["sweep", "--alphas", "0.05,0.05"]) == 2


# ---------------------------------------------------------------------------
# checkpoint resume
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def segments(tmp_path_factory):
    base = tmp_path_factory.mktemp("segments")
    seg0 = base / "seg0"
    rc = main(["simulate", "--out-dir", str(seg0), "particles=2000",
               "max_steps=50", "seed=212",
               "snapshot_tau_interval=1000000.0"])
    assert rc == 0
    return base, seg0


class TestResume:
    def test_resume_continues_run(self, segments, capsys):
        base, seg0 = segments
        seg1 = base / "seg1"
        rc = main(["resume", "--checkpoint", str(seg0 / "checkpoint.bin"),
                   "--out-dir", str(seg1), "max_steps=100"])
        assert rc == 0
        first = load_run(str(seg0))
        cont = load_run(str(seg1))
        assert cont.steps > first.steps
        assert cont.records[0].t > first.records[-1].t > 0.0
        assert cont.config.as_dict()["seed"] == 212

    def test_non_resumable_key_rejected(self, segments, capsys):
        base, seg0 = segments
        rc = main(["resume", "--checkpoint", str(seg0 / "checkpoint.bin"),
                   "alpha=0.0"])
        assert rc == 2
        assert "cannot change alpha" in capsys.readouterr().err
