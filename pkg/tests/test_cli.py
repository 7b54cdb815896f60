"""Command-line interface: config validation, exit codes, artifact determinism."""
import os

import pytest

from kickflow.cli import main, parse_config
from kickflow.errors import ConfigError

MINIMAL = {
    "seed": 5,
    "solver": {"dt": 0.05},
    "chain": {"n_steps": 3, "n_features": 4},
}


def write_yaml(path, doc):
    import yaml

    path.write_text(yaml.safe_dump(doc))
    return str(path)


# ---------------------------------------------------------------------------
# config parsing


def test_parse_minimal_config():
    cfg = parse_config(dict(MINIMAL))
    assert cfg.seed == 5
    assert cfg.solver["dt"] == 0.05
    assert cfg.solver["cfl_safety"] == 0.5  # default filled
    assert cfg.chain["n_steps"] == 3
    assert cfg.output == "reports"


def test_parse_rejects_unknown_keys():
    with pytest.raises(ConfigError) as e:
        parse_config({"seed": 1, "chain": {"n_stepz": 7}})
    assert e.value.key_path == "chain.n_stepz"
    with pytest.raises(ConfigError) as e:
        parse_config({"seed": 1, "chian": {}})
    assert e.value.key_path == "chian"


def test_parse_rejects_bad_types():
    with pytest.raises(ConfigError) as e:
        parse_config({"seed": 1, "solver": {"dt": "fast"}})
    assert e.value.key_path == "solver.dt"
    with pytest.raises(ConfigError) as e:
        parse_config({"seed": 1, "chain": {"n_steps": 2.5}})
    assert e.value.key_path == "chain.n_steps"
    with pytest.raises(ConfigError) as e:
        parse_config({"seed": 1, "coupling": {"d_list": [0.1, "x"]}})
    assert e.value.key_path == "coupling.d_list[1]"
    with pytest.raises(ConfigError) as e:
        parse_config({"seed": True})
    assert e.value.key_path == "seed"


def test_parse_requires_seed_and_mapping():
    with pytest.raises(ConfigError) as e:
        parse_config({"output": "x"})
    assert e.value.key_path == "seed"
    with pytest.raises(ConfigError):
        parse_config([1, 2, 3])
    with pytest.raises(ConfigError):
        parse_config({"seed": 1, "solver": 5})


# ---------------------------------------------------------------------------
# exit codes


def test_exit_code_on_config_error(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "bad.yaml", {"seed": 1, "chain": {"n_stepz": 7}})
    rc = main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "config error at chain.n_stepz" in capsys.readouterr().err


def test_exit_code_on_missing_config(tmp_path, capsys):
    rc = main(["simulate", "--config", str(tmp_path / "nope.yaml")])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_exit_code_on_runtime_failure(tmp_path, capsys):
    # a config that parses but names a garbage oracle file fails at run time
    chain_file = tmp_path / "chain.txt"
    chain_file.write_text("not a chain\n")
    doc = {"seed": 2,
           "ldp": {"backend": "oracle", "method": "direct", "n_steps": 4,
                   "n_particles": 50, "potential_kind": "constant",
                   "potential_value": 0.1},
           "oracle": {"file": str(chain_file)}}
    cfg = write_yaml(tmp_path / "r.yaml", doc)
    rc = main(["estimate-q", "--config", cfg, "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "ChainFormatError" in capsys.readouterr().err


def test_bad_thread_cap(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", dict(MINIMAL))
    rc = main(["simulate", "--config", cfg, "--threads", "0",
               "--out", str(tmp_path / "o")])
    assert rc == 2


def test_unknown_subcommand_exits_two(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate", "--config", "x"])
    assert e.value.code == 2


# ---------------------------------------------------------------------------
# oracle-backed growth-rate run: artifacts and determinism


def oracle_q_doc(tmp_path):
    return {"seed": 9,
            "output": str(tmp_path / "default_out"),
            "ldp": {"backend": "oracle", "method": "cloning", "n_steps": 16,
                    "n_particles": 64, "potential_kind": "constant",
                    "potential_value": 0.25}}


def test_oracle_growth_run_writes_artifacts(tmp_path):
    cfg = write_yaml(tmp_path / "q.yaml", oracle_q_doc(tmp_path))
    out = tmp_path / "out"
    rc = main(["estimate-q", "--config", cfg, "--out", str(out)])
    assert rc == 0
    for name in ("q_series.dat", "summary.txt", "manifest.txt"):
        assert (out / name).exists(), name
    text = (out / "summary.txt").read_text()
    # constant potential: the growth rate is that constant, exactly
    assert "q_hat: 0.25\n" in text
    assert "stderr: 0\n" in text
    manifest = (out / "manifest.txt").read_text()
    assert "subcommand: estimate-q" in manifest
    assert "artifact: q_series.dat" in manifest


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_yaml(tmp_path / "q.yaml", oracle_q_doc(tmp_path))
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["estimate-q", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["estimate-q", "--config", cfg, "--out", str(out2)]) == 0
    for name in ("q_series.dat", "summary.txt", "manifest.txt"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name


def test_seed_override_changes_results(tmp_path):
    doc = oracle_q_doc(tmp_path)
    doc["ldp"]["potential_kind"] = "affine"
    doc["ldp"]["potential_coeffs"] = [0.8]
    cfg = write_yaml(tmp_path / "q.yaml", doc)
    out1, out2, out3 = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["estimate-q", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["estimate-q", "--config", cfg, "--out", str(out2),
                 "--seed", "999"]) == 0
    assert main(["estimate-q", "--config", cfg, "--out", str(out3),
                 "--seed", "9"]) == 0
    a = (out1 / "q_series.dat").read_bytes()
    assert a != (out2 / "q_series.dat").read_bytes()
    assert a == (out3 / "q_series.dat").read_bytes()  # explicit seed == config seed
    assert "seed: 999" in (out2 / "manifest.txt").read_text()


def test_output_directory_precedence(tmp_path, monkeypatch):
    doc = oracle_q_doc(tmp_path)
    cfg = write_yaml(tmp_path / "q.yaml", doc)
    # config output used when nothing overrides
    monkeypatch.delenv("KICKFLOW_OUT", raising=False)
    assert main(["estimate-q", "--config", cfg]) == 0
    assert (tmp_path / "default_out" / "manifest.txt").exists()
    # environment beats the config
    env_dir = tmp_path / "env_out"
    monkeypatch.setenv("KICKFLOW_OUT", str(env_dir))
    assert main(["estimate-q", "--config", cfg]) == 0
    assert (env_dir / "manifest.txt").exists()
    # the flag beats the environment
    flag_dir = tmp_path / "flag_out"
    assert main(["estimate-q", "--config", cfg, "--out", str(flag_dir)]) == 0
    assert (flag_dir / "manifest.txt").exists()


def test_chain_file_round_trip_through_cli(tmp_path):
    from kickflow.oracle import bundled_five_state, save_chain

    chain_file = tmp_path / "five.txt"
    save_chain(bundled_five_state(), chain_file)
    doc = oracle_q_doc(tmp_path)
    doc["oracle"] = {"file": str(chain_file)}
    doc["ldp"]["potential_kind"] = "affine"
    doc["ldp"]["potential_coeffs"] = [0.5]
    cfg = write_yaml(tmp_path / "q.yaml", doc)
    out = tmp_path / "out"
    assert main(["estimate-q", "--config", cfg, "--out", str(out)]) == 0
    assert "backend: oracle" in (out / "summary.txt").read_text()


# ---------------------------------------------------------------------------
# flow-backed simulate: artifact shape (small but real run)


def test_simulate_writes_expected_artifacts(tmp_path):
    doc = dict(MINIMAL)
    doc["output"] = str(tmp_path / "unused")
    cfg = write_yaml(tmp_path / "s.yaml", doc)
    out = tmp_path / "out"
    rc = main(["simulate", "--config", cfg, "--out", str(out), "--threads", "1"])
    assert rc == 0
    for name in ("trajectory.tsv", "state_final.kfld", "occupation.tsv",
                 "energy_series.dat", "summary.txt", "manifest.txt"):
        assert (out / name).exists(), name
    summary = (out / "summary.txt").read_text()
    assert "n_steps: 3" in summary
    hashes = {line.split()[-1] for line in (out / "occupation.tsv").read_text().splitlines()
              if line.startswith("# config")}
    from kickflow.report import config_hash
    assert hashes == {config_hash(cfg)}
