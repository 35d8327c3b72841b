import json
import math

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from dualist import cli
from dualist.config import (EnsembleSettings, SimConfig, config_to_dict, dump_config, parse_config)
from dualist.dynamics import IntegratorConfig
from dualist.ste import RateModel
from dualist.ensemble import EnsembleSpec, run_ensemble
from dualist.errors import ConfigError

from conftest import box

MINIMAL = """
seed: 3
model:
  kind: box
  levels:
    - {level: 1}
"""


def _errors(text):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    return info.value.errors


def test_minimal_config_fills_defaults():
    cfg = parse_config(MINIMAL)
    assert isinstance(cfg, SimConfig)
    assert cfg.seed == 3 and cfg.units == "natural" and cfg.output == "out"
    assert cfg.integrator == IntegratorConfig()
    assert cfg.rate == RateModel()
    assert cfg.ensemble == EnsembleSettings()
    assert cfg.overrides.significance == 0.01
    sys = cfg.build_system()
    assert sys.K == 0 and sys.dim == 1


def test_missing_seed_names_field():
    errs = _errors(MINIMAL.replace("seed: 3", ""))
    assert any(e.startswith("seed") for e in errs)


@pytest.mark.parametrize("seed", ["-1", str(2**64), "1.5", "true"])
def test_seed_must_be_u64(seed):
    assert any(e.startswith("seed") for e in _errors(MINIMAL.replace("3", seed, 1)))


def test_negative_rate_rejected():
    errs = _errors(MINIMAL + "rate: {lam: -0.5}\n")
    assert any(e.startswith("rate") for e in errs)


def test_unknown_keys_rejected_at_every_level():
    text = MINIMAL + "colour: red\nrate: {lam: 1, speed: 2}\n"
    text = text.replace("kind: box", "kind: box\n  flavour: up")
    errs = _errors(text)
    assert "colour: unknown key" in errs
    assert "rate.speed: unknown key" in errs
    assert "model.flavour: unknown key" in errs


def test_errors_listed_exhaustively():
    text = MINIMAL.replace("seed: 3", "") + "rate: {lam: -1}\nensemble: {members: many}\nintegrator: {dt: -1}\n"
    errs = _errors(text)
    for section in ("seed", "rate", "ensemble.members", "integrator"):
        assert any(e.startswith(section) for e in errs), (section, errs)


def test_unknown_key_does_not_hide_semantic_error():
    errs = _errors(MINIMAL + "rate: {lam: -1, bogus: 0}\n")
    assert "rate.bogus: unknown key" in errs
    assert any(e.startswith("rate:") for e in errs)


def test_parse_error_reports_position():
    errs = _errors("seed: 3\nmodel: {kind: box\n  levels: [\n")
    assert len(errs) == 1
    assert "line" in errs[0] and "column" in errs[0]


def test_empty_level_selection_rejected():
    errs = _errors("seed: 1\nmodel: {kind: box, levels: []}\n")
    assert any("level" in e for e in errs)


def test_complex_coefficient_forms():
    text = MINIMAL.replace("{level: 1}", "{level: 1, coefficients: ['1+2j']}\n    - {level: 2, coefficients: [[0.5, -1]]}")
    cfg = parse_config(text)
    assert cfg.model.levels[0].coefficients == (1 + 2j,)
    assert cfg.model.levels[1].coefficients == (0.5 - 1j,)


def test_physical_units_default_hbar():
    from scipy import constants
    cfg = parse_config(MINIMAL + "units: physical\n")
    assert cfg.model.hbar == constants.hbar


def test_shipped_configs_validate():
    from pathlib import Path
    for path in sorted((Path(__file__).parents[1] / "configs").glob("*.yaml")):
        assert cli.main(["validate", "--config", str(path)]) == 0


polar = st.tuples(st.floats(0.01, 10), st.floats(-math.pi, math.pi))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), lam=st.floats(0, 5), dt=st.floats(1e-5, 0.1),
       levels=st.lists(st.integers(1, 6), min_size=1, max_size=3, unique=True),
       coeffs=st.lists(polar, min_size=3, max_size=3),
       members=st.integers(0, 5000), boundary=st.sampled_from(["reflect", "clamp"]))
def test_config_round_trip(seed, lam, dt, levels, coeffs, members, boundary):
    coeffs = [[r * math.cos(a), r * math.sin(a)] for r, a in coeffs]
    doc = {"seed": seed,
           "model": {"kind": "box", "length": 2.0,
                     "levels": [{"level": n, "coefficients": [c]} for n, c in zip(levels, coeffs)]},
           "integrator": {"dt": dt, "boundary": boundary}, "rate": {"lam": lam},
           "ensemble": {"members": members}}
    cfg = parse_config(yaml.safe_dump(doc))
    again = parse_config(dump_config(cfg))
    assert again == cfg
    assert config_to_dict(again) == config_to_dict(cfg)


# ---------------------------------------------------------------------------
# output emission
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_result():
    spec = EnsembleSpec(box(1, 2), 40, 0.05, IntegratorConfig(dt=1e-3), RateModel(lam=20.0), stride=10, seed=4)
    return run_ensemble(spec)


def test_empty_ensemble_headers_only(tmp_path):
    result = run_ensemble(EnsembleSpec(box(1, 2), 0, 0.1))
    manifest = cli.emit_outputs(result, tmp_path)
    for rel in ("trajectories.csv", "events.csv", "plotdata/density.csv", "plotdata/phase_hist.csv"):
        assert rel in manifest
        lines = (tmp_path / rel).read_text().splitlines()
        assert len(lines) == 1 and "," in lines[0]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["members"] == 0 and summary["n_events"] == 0


def test_reemission_identical_hashes(small_result, tmp_path):
    a = cli.emit_outputs(small_result, tmp_path / "a")
    b = cli.emit_outputs(small_result, tmp_path / "b")
    assert a == b
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["files"] == a


def test_summary_round_trip(small_result, tmp_path):
    cli.emit_outputs(small_result, tmp_path)
    parsed = json.loads((tmp_path / "summary.json").read_text())
    assert parsed == cli.summarize(small_result)
    assert parsed["n_events"] == small_result.n_events > 0
    assert parsed["mean"]["n"] == small_result.spec.members


def test_csv_reparse_value_exact(small_result, tmp_path):
    cli.emit_outputs(small_result, tmp_path)
    header, rows = cli.read_csv(tmp_path / "events.csv")
    ev = small_result.events
    assert rows.shape[0] == small_result.n_events
    np.testing.assert_array_equal(rows[:, header.index("t")], ev["t"])
    np.testing.assert_array_equal(rows[:, header.index("theta_after1")], ev["theta_after"].reshape(-1))
    header, rows = cli.read_csv(tmp_path / "trajectories.csv")
    np.testing.assert_array_equal(rows[:, header.index("q0")], small_result.q.reshape(-1))


@settings(max_examples=100, deadline=None)
@given(values=st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_csv_17_digits_exact(values, tmp_path_factory):
    path = tmp_path_factory.mktemp("csv") / "v.csv"
    path.write_text(cli.csv_text(["v"], np.array(values)[:, None]))
    _, rows = cli.read_csv(path)
    assert [float(v) for v in rows[:, 0]] == [float(v) for v in values]


def test_write_error_carries_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        cli.write_bundle(blocker / "sub", {"a.csv": "x\n"})


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def _write(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


RUN_CFG = MINIMAL.replace("- {level: 1}", "- {level: 1}\n    - {level: 2}") + """
rate: {lam: 5.0}
ensemble: {members: 30, horizon: 0.02, stride: 5}
"""


def test_cli_validate_exit_codes(tmp_path, capsys):
    assert cli.main(["validate", "--config", _write(tmp_path, MINIMAL)]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 3
    assert cli.main(["validate", "--config", _write(tmp_path, "model: {kind: box}\n", "bad.yaml")]) == 1
    err = capsys.readouterr().err
    assert "seed" in err
    assert cli.main(["validate", "--config", str(tmp_path / "missing.yaml")]) == 1
    assert cli.main(["validate", "--config", _write(tmp_path, MINIMAL), "--threads", "0"]) == 1


def test_cli_run_bundle_and_seed_override(tmp_path):
    cfg = _write(tmp_path, RUN_CFG)
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "99"]) == 0
    for sub in ("a", "b"):
        for rel in ("trajectories.csv", "events.csv", "summary.json", "manifest.json", "config.yaml",
                    "plotdata/density.csv", "plotdata/phase_hist.csv", "plotdata/drift_scan.csv"):
            assert (tmp_path / sub / rel).exists(), rel
    assert json.loads((tmp_path / "b" / "summary.json").read_text())["seed"] == 99
    assert (tmp_path / "a" / "trajectories.csv").read_bytes() != (tmp_path / "b" / "trajectories.csv").read_bytes()
    assert parse_config((tmp_path / "b" / "config.yaml").read_text()).seed == 99


def test_cli_config_echo_round_trip(tmp_path):
    cfg = _write(tmp_path, RUN_CFG)
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert parse_config((tmp_path / "o" / "config.yaml").read_text()) == parse_config(RUN_CFG)


def test_cli_runtime_failure_exit_2(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("x")
    cfg = _write(tmp_path, RUN_CFG)
    assert cli.main(["run", "--config", cfg, "--out", str(blocker / "out")]) == 2


def test_cli_ste_test_single_level_is_runtime_error(tmp_path):
    assert cli.main(["ste-test", "--config", _write(tmp_path, MINIMAL), "--out", str(tmp_path / "o")]) == 2


def test_cli_statistical_failure_exit_3(tmp_path):
    # at significance 0.99 a calibrated test rejects almost surely
    base = MINIMAL.replace("- {level: 1}", "- {level: 1}\n    - {level: 2}") + "dqe: {members: 1000}\n"
    ok = cli.main(["dqe", "--config", _write(tmp_path, base, "ok.yaml"), "--out", str(tmp_path / "ok")])
    strict = base + "overrides: {significance: 0.99}\n"
    bad = cli.main(["dqe", "--config", _write(tmp_path, strict, "bad.yaml"), "--out", str(tmp_path / "bad")])
    assert (ok, bad) == (0, 3)
    assert json.loads((tmp_path / "bad" / "summary.json").read_text())["passed"] is False


def test_cli_threads_do_not_change_bundle(tmp_path):
    cfg = _write(tmp_path, RUN_CFG.replace("members: 30", "members: 600"))
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "t1"), "--threads", "1"]) == 0
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "t2"), "--threads", "2"]) == 0
    assert (tmp_path / "t1" / "manifest.json").read_bytes() == (tmp_path / "t2" / "manifest.json").read_bytes()


def test_isfinite_guard():
    errs = _errors(MINIMAL + "integrator: {dt: .nan}\n")
    assert any(e.startswith("integrator.dt") for e in errs)
    assert not math.isnan(parse_config(MINIMAL).integrator.dt)
