"""Experiment configs, result records, runners, report, and the CLI."""

import json

import numpy as np
import pytest

import horolab.experiments as ex
from horolab.cli import build_parser, config_from_args, main
from horolab.errors import ConfigError, ToleranceFailure


def quick_average_config(**overrides) -> ex.ExperimentConfig:
    base = dict(kind="average", point="preset:generic1",
                timeset="progression", step_k=1.0, t_span=1.0e3)
    base.update(overrides)
    return ex.ExperimentConfig(**base)


@pytest.fixture(scope="module")
def average_grid_dir(tmp_path_factory):
    """Four sparse-average records over a T grid, persisted together."""
    out = tmp_path_factory.mktemp("avg_grid")
    for t_span in (1.0e2, 1.0e3, 1.0e4, 1.0e5):
        ex.run(quick_average_config(t_span=t_span, out_dir=str(out)))
    return out


@pytest.fixture(scope="module")
def mixing_record_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("mixing")
    rec = ex.run(ex.ExperimentConfig(kind="mixing", point="preset:generic1",
                                     t_grid=(1.0, 2.0, 4.0, 8.0),
                                     out_dir=str(out)))
    return rec, out


class TestConfig:
    def test_text_round_trip_bit_identical(self):
        cfg = quick_average_config(workers=3, seed=11, epsilon=0.003)
        text = cfg.to_text()
        again = ex.ExperimentConfig.from_text(text)
        assert again == cfg
        assert again.to_text() == text

    def test_json_round_trip(self):
        cfg = quick_average_config(t_grid=(0.5, 1.5))
        assert ex.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_from_file_both_formats(self, tmp_path):
        cfg = quick_average_config(level=7)
        txt = tmp_path / "c.cfg"
        txt.write_text(cfg.to_text())
        js = tmp_path / "c.json"
        js.write_text(json.dumps(cfg.to_dict()))
        assert ex.ExperimentConfig.from_file(txt) == cfg
        assert ex.ExperimentConfig.from_file(js) == cfg

    def test_comments_and_blanks_ignored(self):
        cfg = ex.ExperimentConfig.from_text(
            "# a comment\n\nkind = \"reduce\"\nt_span = 12.5  # trailing\n")
        assert cfg.kind == "reduce"
        assert cfg.t_span == 12.5

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError):
            ex.ExperimentConfig.from_dict({"kind": "average", "bogus": 1})
        with pytest.raises(ConfigError):
            ex.ExperimentConfig.from_text("volume = 11\n")

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            ex.ExperimentConfig(kind="lasso")
        with pytest.raises(ConfigError):
            ex.ExperimentConfig(workers=0)

    def test_hash_tracks_content(self):
        a = quick_average_config()
        b = quick_average_config(t_span=2.0e3)
        assert a.config_hash() == quick_average_config().config_hash()
        assert a.config_hash() != b.config_hash()

    def test_env_overrides(self):
        cfg = ex.apply_env_overrides(quick_average_config(), {
            "HOROLAB_T_SPAN": "55.5",
            "HOROLAB_WORKERS": "4",
            "HOROLAB_POINT": "preset:cusp",
            "UNRELATED": "ignored",
        })
        assert cfg.t_span == 55.5
        assert cfg.workers == 4
        assert cfg.point == "preset:cusp"

    def test_precedence_file_env_token(self, tmp_path, monkeypatch):
        cfgfile = tmp_path / "c.cfg"
        cfgfile.write_text("t_span = 777.0\nstep_k = 2.0\n")
        parser = build_parser()
        monkeypatch.setenv("HOROLAB_T_SPAN", "888.0")

        args = parser.parse_args(["average", "--config", str(cfgfile)])
        cfg = config_from_args(args)
        assert cfg.t_span == 888.0     # env beats the file
        assert cfg.step_k == 2.0       # file beats the default

        args = parser.parse_args(["average", "--config", str(cfgfile), "T=999"])
        assert config_from_args(args).t_span == 999.0  # token beats env


class TestRecords:
    def test_record_hash_matches_embedded_config(self):
        cfg = quick_average_config()
        rec = ex.make_record(cfg, {"value": 1.0})
        assert rec.schema_version == ex.SCHEMA_VERSION
        assert rec.config_hash == ex.ExperimentConfig.from_dict(rec.config).config_hash()

    def test_append_load_round_trip(self, tmp_path):
        cfg = quick_average_config()
        rec = ex.make_record(cfg, {"value": 0.25})
        path = ex.append_record(rec, tmp_path)
        loaded = ex.load_records(path)
        assert len(loaded) == 1
        assert loaded[0] == rec

    def test_records_are_append_only(self, tmp_path):
        cfg = quick_average_config()
        ex.append_record(ex.make_record(cfg, {"value": 1.0}), tmp_path)
        first = (tmp_path / "records.jsonl").read_text()
        ex.append_record(ex.make_record(cfg, {"value": 2.0}), tmp_path)
        both = (tmp_path / "records.jsonl").read_text()
        assert both.startswith(first)
        assert len(both.splitlines()) == 2

    def test_previous_schema_version_readable(self, tmp_path):
        rec = ex.make_record(quick_average_config(), {"value": 1.0})
        old = json.loads(rec.to_json())
        old["schema_version"] = 0
        # fields added since version 0 may be absent entirely
        for key in ("exponents", "environment", "elapsed_s"):
            old.pop(key)
        path = tmp_path / "records.jsonl"
        path.write_text(json.dumps(old) + "\n")
        loaded = ex.load_records(path)
        assert loaded[0].payload == {"value": 1.0}

    def test_future_schema_version_rejected(self, tmp_path):
        rec = ex.make_record(quick_average_config(), {"value": 1.0})
        new = json.loads(rec.to_json())
        new["schema_version"] = ex.SCHEMA_VERSION + 1
        path = tmp_path / "records.jsonl"
        path.write_text(json.dumps(new) + "\n")
        with pytest.raises(ConfigError):
            ex.load_records(path)

    def test_payload_bit_identical_on_rerun(self):
        cfg = quick_average_config()
        pay1 = ex.run(cfg).payload
        pay2 = ex.run(cfg).payload
        assert json.dumps(pay1, sort_keys=True) == json.dumps(pay2, sort_keys=True)

    def test_payload_stable_across_worker_counts(self):
        v1 = ex.run(quick_average_config(workers=1)).payload["value"]
        v8 = ex.run(quick_average_config(workers=8)).payload["value"]
        assert abs(v1 - v8) <= 1e-12


class TestRunners:
    def test_reduce_payload(self):
        rec = ex.run(ex.ExperimentConfig(kind="reduce", point="preset:generic1"))
        assert rec.payload["converged"]
        assert rec.payload["injectivity_radius"] > 0.0
        assert len(rec.payload["coords"]) == 1

    def test_average_record_fields(self):
        rec = ex.run(quick_average_config(t_span=1.0e4))
        for key in ("value", "reference", "deviation"):
            assert key in rec.payload
        assert rec.payload["deviation"] >= 0.0
        # volatile data stays off the payload so reruns hash identically
        assert "runtime_s" not in rec.payload
        assert rec.elapsed_s > 0.0

    def test_average_writes_artifacts(self, tmp_path):
        ex.run(quick_average_config(out_dir=str(tmp_path)))
        names = {p.name for p in tmp_path.iterdir()}
        assert {"records.jsonl", "average.csv", "average.dat"} <= names
        header = (tmp_path / "average.csv").read_text().splitlines()[0]
        assert header == "samples,value,reference,deviation"
        assert (tmp_path / "average.dat").read_text().startswith("# ")

    def test_orbit_run(self, tmp_path):
        rec = ex.run(ex.ExperimentConfig(kind="orbit", point="preset:generic1",
                                         timeset="progression", step_k=1.0,
                                         t_span=2000.0, out_dir=str(tmp_path)))
        assert rec.payload["samples"] == 2000
        assert rec.payload["height_min"] > 0.0
        rows = (tmp_path / "orbit.csv").read_text().splitlines()
        assert rows[0] == "t,x1,y1,theta1"
        assert len(rows) == 1 + 2000

    def test_mixing_run(self, mixing_record_dir):
        rec, _ = mixing_record_dir
        assert len(rec.payload["series"]) == 4
        assert rec.exponents["mixing_slope"] < 0.0

    def test_blocks_run(self):
        rec = ex.run(ex.ExperimentConfig(kind="blocks", point="preset:generic1",
                                         m_base=400_000, gamma_exp=0.1))
        assert rec.payload["gap"] > 0.0
        assert rec.payload["gap_within_bound"]

    def test_sieve_unit_weights(self):
        rec = ex.run(ex.ExperimentConfig(kind="sieve", n_max=10**6,
                                         alpha_exp=0.1111, s_target=9.0))
        assert rec.payload["brackets_hold"]
        assert rec.payload["lower"] <= rec.payload["s_exact"] <= rec.payload["upper"]

    def test_torus_hilbert_identity(self):
        rec = ex.run(ex.ExperimentConfig(kind="torus", lattice="hilbert",
                                         disc=2, point="identity"))
        assert rec.payload["found"]
        assert rec.payload["torus_dim"] == 2
        assert len(rec.payload["generators"]) == 2

    def test_tolerance_gate(self):
        with pytest.raises(ToleranceFailure) as err:
            ex.run(quick_average_config(deviation_tolerance=1e-30))
        # the gated payload rides along for diagnostics
        assert err.value.payload["deviation"] > 1e-30


class TestDichotomy:
    def test_identity_coset_torus_confirmed(self):
        rec = ex.run(ex.ExperimentConfig(kind="dichotomy", point="preset:cusp",
                                         mode="almost", n_max=10**5))
        pay = rec.payload
        assert pay["verdict"] == "torus-confirmed"
        assert pay["torus"]["found"]
        assert pay["sparse_orbit"]["bounded"]
        assert pay["sparse_orbit"]["single_point_exact"]

    def test_hilbert_identity_poly_torus_confirmed(self):
        rec = ex.run(ex.ExperimentConfig(kind="dichotomy", lattice="hilbert",
                                         disc=2, point="identity", mode="poly",
                                         gamma_exp=0.1))
        assert rec.payload["verdict"] == "torus-confirmed"
        assert rec.payload["torus"]["torus_dim"] == 2

    def test_generic_point_dense_evidence(self):
        rec = ex.run(ex.ExperimentConfig(kind="dichotomy", point="preset:generic1",
                                         mode="almost", n_max=50_000))
        pay = rec.payload
        assert not pay["divergence"]["diverges"]
        assert pay["verdict"] == "dense-evidence"
        assert all(row["omega_sum"] > 0.0 for row in pay["cover"])
        assert len(pay["cover"]) == 10
        assert "evidence" in pay["caveat"] and "not a proof" in pay["caveat"]

    def test_generic_point_poly_block_sweep(self):
        rec = ex.run(ex.ExperimentConfig(kind="dichotomy", point="preset:generic1",
                                         mode="poly", gamma_exp=0.1,
                                         m_base=400_000))
        pay = rec.payload
        assert pay["verdict"] == "dense-evidence"
        assert len(pay["block_sweep"]) == 4
        assert pay["block_sweep"][-1]["gap"] <= pay["block_sweep"][0]["gap"]

    def test_bad_mode_rejected(self):
        with pytest.raises(ConfigError):
            ex.run(ex.ExperimentConfig(kind="dichotomy", mode="sideways"))


class TestReport:
    def test_single_record_single_row(self, tmp_path):
        ex.run(ex.ExperimentConfig(kind="reduce", point="preset:generic1",
                                   out_dir=str(tmp_path)))
        rec = ex.run(ex.ExperimentConfig(
            kind="report", records_path=str(tmp_path / "records.jsonl")))
        assert rec.payload["records"] == 1
        assert len(rec.payload["rows"]) == 1

    def test_average_grid_slope_populated(self, average_grid_dir):
        rec = ex.run(ex.ExperimentConfig(
            kind="report", records_path=str(average_grid_dir / "records.jsonl")))
        rows = rec.payload["rows"]
        assert len(rows) == 4
        slopes = {row["slope"] for row in rows}
        assert len(slopes) == 1
        assert np.isfinite(slopes.pop())
        assert rec.exponents

    def test_mixing_records_fit_negative(self, mixing_record_dir):
        _, out = mixing_record_dir
        rec = ex.run(ex.ExperimentConfig(
            kind="report", records_path=str(out / "records.jsonl")))
        rows = rec.payload["rows"]
        assert rows and all(row["slope"] < 0.0 for row in rows)
        assert all(row["pass"] == "pass" for row in rows)

    def test_duplicate_scale_refused(self, tmp_path):
        for _ in range(2):
            ex.run(quick_average_config(out_dir=str(tmp_path)))
        with pytest.raises(ConfigError):
            ex.run(ex.ExperimentConfig(
                kind="report", records_path=str(tmp_path / "records.jsonl")))

    def test_missing_records_path(self):
        with pytest.raises(ConfigError):
            ex.run(ex.ExperimentConfig(kind="report"))


class TestCli:
    def test_describe(self, capsys):
        assert main(["describe"]) == 0
        out = capsys.readouterr().out
        assert "t_span" in out
        assert "N->n_max" in out

    def test_average_example(self, tmp_path, capsys):
        code = main(["average", "--lattice", "modular", "--point", "preset:generic1",
                     "--timeset", "progression", "K=1", "T=1e4",
                     "--out", str(tmp_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "[average]" in out
        assert "deviation" in out
        assert (tmp_path / "records.jsonl").exists()

    def test_sieve_example(self, capsys):
        code = main(["sieve", "--toy-unit-weights", "N=1e6",
                     "z-exp", "0.1111", "s", "9"])
        assert code == 0
        assert "brackets_hold = True" in capsys.readouterr().out

    def test_torus_example(self, capsys):
        code = main(["torus", "--lattice", "hilbert", "D=2", "--point", "identity"])
        assert code == 0
        assert "torus_dim = 2" in capsys.readouterr().out

    def test_dichotomy_prints_caveat(self, capsys):
        code = main(["dichotomy", "--point", "preset:generic1",
                     "mode=almost", "N=20000"])
        assert code == 0
        assert "not a proof" in capsys.readouterr().out

    def test_exit_code_config_error(self, capsys):
        assert main(["average", "bogus=3"]) == 1
        assert "config error" in capsys.readouterr().err
        assert main(["average", "T"]) == 1          # dangling token
        assert main(["average", "--nonsense"]) == 1  # unknown flag

    def test_exit_code_tolerance(self, capsys):
        assert main(["average", "K=1", "T=1e3", "--tolerance", "1e-30"]) == 2
        assert "tolerance failure" in capsys.readouterr().err

    def test_exit_code_budget(self, capsys):
        # z = sqrt(N) with a huge level makes the divisor enumeration blow
        # through its cap long before any bound is assembled
        assert main(["sieve", "N=20000", "z-exp", "0.5", "s", "101"]) == 3
        assert "budget exhausted" in capsys.readouterr().err

    def test_set_flag_reaches_config(self):
        parser = build_parser()
        args = parser.parse_args(["blocks", "--set", "m_base=12345",
                                  "--set", "gamma_exp=0.2"])
        cfg = config_from_args(args)
        assert cfg.m_base == 12345
        assert cfg.gamma_exp == 0.2
