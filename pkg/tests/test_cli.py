import json
import os

import numpy as np
import pytest

from gbmei import cli
from gbmei.model import BUILTIN_PROBLEMS
from gbmei.schemes import KINDS


def run_cli(args):
    return cli.main(args)


def test_list_prints_schemes_and_problems(capsys):
    assert run_cli(["list"]) == 0
    out = capsys.readouterr().out
    for kind in KINDS:
        assert kind in out
    assert len(KINDS) == 11
    for name in ("ginzburg_landau", "diag_noise", "noncomm_noise", "stiff2d"):
        assert name in out
    assert len(BUILTIN_PROBLEMS) >= 4


def test_minimal_config_runs(tmp_path, capsys):
    cfg = tmp_path / "gl.json"
    cfg.write_text(json.dumps({"problem": "ginzburg_landau"}))
    out = tmp_path / "gl.csv"
    # the protocol defaults are desk scale; shrink samples via the override
    code = run_cli(
        ["convergence", "--config", str(cfg), "--out", str(out), "--samples", "10", "--workers", "1"]
    )
    assert code == 0
    text = out.read_text()
    assert text.startswith("problem,scheme,dt,rms_error,stderr,wall_seconds\n")
    rows, fits = cli.parse_csv(out)
    assert {f[0] for f in fits} == {"EI0", "EI1", "EI2", "SETD1"}
    assert len(rows) == 4 * 6  # four schemes, six dt levels
    assert os.path.exists(str(out) + ".meta.json")
    meta = json.loads((tmp_path / "gl.csv.meta.json").read_text())
    assert meta["config"]["samples"] == 10
    assert meta["config_sha256"]


def test_malformed_json_names_byte_offset(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"problem": "ginzburg_landau",,}')
    assert run_cli(["convergence", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "byte offset 30" in err


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"problem": "ginzburg_landau", "smaples": 5}))
    assert run_cli(["convergence", "--config", str(cfg)]) == 1
    assert "'smaples'" in capsys.readouterr().err


def test_unknown_problem_and_scheme(tmp_path, capsys):
    cfg = tmp_path / "p.json"
    cfg.write_text(json.dumps({"problem": "lorenz"}))
    assert run_cli(["convergence", "--config", str(cfg)]) == 1
    assert "lorenz" in capsys.readouterr().err
    cfg.write_text(json.dumps({"problem": "ginzburg_landau", "schemes": ["EI9"]}))
    assert run_cli(["convergence", "--config", str(cfg)]) == 1
    assert "EI9" in capsys.readouterr().err


def test_csv_round_trip_bitwise(tmp_path):
    cfg = tmp_path / "gl.json"
    cfg.write_text(
        json.dumps({"problem": "ginzburg_landau", "samples": 8, "levels": [8, 16]})
    )
    out = tmp_path / "gl.csv"
    assert run_cli(["convergence", "--config", str(cfg), "--out", str(out), "--workers", "1"]) == 0
    rows, fits = cli.parse_csv(out)

    from gbmei.harness import ExperimentConfig, strong_error

    res = strong_error(
        ExperimentConfig(problem="ginzburg_landau", samples=8, ladder=(8, 16), workers=1)
    )
    k = 0
    for kind, table in res.tables.items():
        for row in table.rows:
            problem, scheme, dt, rms, se, wall = rows[k]
            assert (problem, scheme) == ("ginzburg_landau", kind)
            assert dt == row.dt and rms == row.rms and se == row.stderr and wall == 0.0
            k += 1
    fit_by_kind = {f[0]: f for f in fits}
    for kind, table in res.tables.items():
        assert fit_by_kind[kind][1] == table.slope


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "gl.json"
    cfg.write_text(json.dumps({"problem": "ginzburg_landau", "samples": 6, "levels": [8]}))
    out1, out2, out3, out4 = (tmp_path / f"o{i}.csv" for i in range(4))

    monkeypatch.setenv("GBMEI_SEED", "777")
    run_cli(["convergence", "--config", str(cfg), "--out", str(out1), "--workers", "1"])
    monkeypatch.delenv("GBMEI_SEED")
    run_cli(["convergence", "--config", str(cfg), "--out", str(out2), "--workers", "1", "--seed", "777"])
    assert out1.read_bytes() == out2.read_bytes()

    run_cli(["convergence", "--config", str(cfg), "--out", str(out3), "--workers", "1", "--seed", "778"])
    assert out1.read_bytes() != out3.read_bytes()

    # config seed beats the environment
    cfg.write_text(
        json.dumps({"problem": "ginzburg_landau", "samples": 6, "levels": [8], "seed": 779})
    )
    monkeypatch.setenv("GBMEI_SEED", "777")
    run_cli(["convergence", "--config", str(cfg), "--out", str(out4), "--workers", "1"])
    assert out4.read_bytes() != out1.read_bytes()


def test_invalid_env_seed(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "gl.json"
    cfg.write_text(json.dumps({"problem": "ginzburg_landau", "samples": 6, "levels": [8]}))
    monkeypatch.setenv("GBMEI_SEED", "not-a-number")
    assert run_cli(["convergence", "--config", str(cfg)]) == 1
    assert "GBMEI_SEED" in capsys.readouterr().err


def test_atomic_write_replaces_existing(tmp_path):
    out = tmp_path / "gl.csv"
    out.write_text("old content")
    cfg = tmp_path / "gl.json"
    cfg.write_text(json.dumps({"problem": "ginzburg_landau", "samples": 6, "levels": [8]}))
    assert run_cli(["convergence", "--config", str(cfg), "--out", str(out), "--workers", "1"]) == 0
    assert out.read_text().startswith("problem,scheme")
    leftovers = [p for p in os.listdir(tmp_path) if p.startswith(".gbmei-")]
    assert leftovers == []


def test_exclusion_exit_code(tmp_path, capsys):
    import gbmei.model as model

    def explosive():
        return model.make_problem(
            A=np.zeros((1, 1)),
            Bs=np.zeros((1, 1, 1)),
            F=_explode,
            u0=np.ones(1),
            name="explosive",
        )

    model.register_problem("explosive_cli", explosive)
    try:
        cfg = tmp_path / "x.json"
        cfg.write_text(
            json.dumps(
                {
                    "problem": "explosive_cli",
                    "schemes": ["EM"],
                    "levels": [4],
                    "T": 1.0,
                    "samples": 4,
                    "reference": {"type": "scheme", "scheme": "SETD0", "level": 64},
                    "ref_selftest": False,
                }
            )
        )
        assert run_cli(["convergence", "--config", str(cfg), "--workers", "1"]) == 2
        assert "numerical failure" in capsys.readouterr().err
    finally:
        del model.BUILTIN_PROBLEMS["explosive_cli"]


def _explode(u):
    return 1e8 * (u + 1.0)


def test_efficiency_column_filled(tmp_path):
    cfg = tmp_path / "gl.json"
    cfg.write_text(json.dumps({"problem": "ginzburg_landau", "samples": 16, "levels": [16, 32]}))
    out = tmp_path / "eff.csv"
    assert run_cli(["efficiency", "--config", str(cfg), "--out", str(out), "--workers", "1"]) == 0
    rows, _ = cli.parse_csv(out)
    assert all(r[5] > 0 for r in rows)


def test_stiff_subcommand(tmp_path, capsys):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"T": 2.0, "dt": 0.1, "samples": 6, "schemes": ["EI0"]}))
    out = tmp_path / "stiff.csv"
    assert run_cli(["stiff", "--config", str(cfg), "--out", str(out), "--workers", "1"]) == 0
    text = out.read_text().splitlines()
    assert text[0] == "problem,scheme,t,mean_norm,mean_0,mean_1"
    assert len(text) == 1 + 21  # N + 1 time points
    meta = json.loads((tmp_path / "stiff.csv.meta.json").read_text())
    assert "blowup_fractions" in meta
    assert "EI0" in capsys.readouterr().out


def test_stiff_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"reference": {"type": "exact"}}))
    assert run_cli(["stiff", "--config", str(cfg)]) == 1
    assert "'reference'" in capsys.readouterr().err


def test_scheme_entry_with_p(tmp_path):
    cfg = tmp_path / "d.json"
    cfg.write_text(
        json.dumps(
            {
                "problem": "diag_noise",
                "schemes": [{"kind": "HomEI0", "p": 0.25}, "SETD0"],
                "samples": 4,
                "levels": [8],
                "reference": {"type": "scheme", "scheme": "ExpMilstein", "level": 64},
                "ref_selftest": False,
            }
        )
    )
    out = tmp_path / "d.csv"
    assert run_cli(["convergence", "--config", str(cfg), "--out", str(out), "--workers", "1"]) == 0
    meta = json.loads((tmp_path / "d.csv.meta.json").read_text())
    assert meta["config"]["schemes"][0] == {"kind": "HomEI0", "p": 0.25}


def test_homotopy_p_required_without_params(tmp_path, capsys):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"problem": "ginzburg_landau", "schemes": ["HomEI0"]}))
    assert run_cli(["convergence", "--config", str(cfg)]) == 1
    assert "homotopy parameter" in capsys.readouterr().err
