import json
import re
import shutil

import numpy as np
import pytest

from racegp.harness import io
from racegp.harness.cli import main
from racegp.harness.config import (ConfigError, builtin_config_path, derive_int_seed, derive_seed,
                                   load_config, resolve_config)
from racegp.harness.manifest import Manifest
from racegp.harness.pipeline import Workspace
from racegp.track import Track


def _fast_config(tmp_path):
    text = builtin_config_path("scale143").read_text()
    for key, value in (("n_restarts", "1"), ("n_sweeps", "1"), ("n_max", "100"), ("laps", "1"),
                       ("nu_grid", '["2.5"]'), ("n_validation_tracks", "1")):
        text, n = re.subn(rf"^{key} = .*$", f"{key} = {value}", text, flags=re.M)
        assert n == 1, key
    path = tmp_path / "fast.toml"
    path.write_text(text)
    return path


def _edit(path, key, value):
    p = path.parent / f"bad_{key}.toml"
    p.write_text(re.sub(rf"^{key} = .*$", f"{key} = {value}", path.read_text(), flags=re.M))
    return p


@pytest.fixture(scope="module")
def fast(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("fast")
    cfg = _fast_config(tmp)
    out = tmp / "run"
    args = ["--config", str(cfg), "--out", str(out)]
    codes = [main([cmd, *args]) for cmd in ("gen-track", "collect", "train")]
    return cfg, out, args, codes


def test_builtin_configs_parse():
    for name in ("scale143", "f1tenth"):
        cfg = resolve_config(name)
        assert cfg.Ts == 0.02 and cfg.seed == 0


@pytest.mark.parametrize("key,value,fragment", [
    ("m", "-1.0", "vehicle.m"),
    ("N", "1", "mpc.N"),
    ("nu_grid", '["3.5"]', "gp.nu_grid[0]"),
    ("Q", "[1.0]", "mpc.Q"),
    ("d_min", "2.0", "limits.d_min"),
])
def test_config_errors_name_the_key(tmp_path, key, value, fragment):
    bad = _edit(_fast_config(tmp_path), key, value)
    with pytest.raises(ConfigError) as info:
        load_config(bad)
    assert info.value.key == fragment
    assert main(["gen-track", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_unknown_key_and_missing_file(tmp_path):
    p = tmp_path / "x.toml"
    p.write_text(builtin_config_path("scale143").read_text().replace("[tires]", "[tires]\nBz = 1.0"))
    with pytest.raises(ConfigError, match="tires.Bz"):
        load_config(p)
    assert main(["gen-track", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 2
    assert main(["race", "--laps", "0", "--out", str(tmp_path)]) == 2


def test_seed_derivation_is_stable():
    assert derive_int_seed(0, "track/train") == derive_int_seed(0, "track/train")
    assert derive_int_seed(0, "track/train") != derive_int_seed(0, "track/val1")
    assert derive_int_seed(0, "track/train") != derive_int_seed(1, "track/train")
    a = np.random.default_rng(derive_seed(3, "purepursuit")).random(4)
    b = np.random.default_rng(derive_seed(3, "purepursuit")).random(4)
    np.testing.assert_array_equal(a, b)


def test_missing_artifact_exit_code(tmp_path, capsys):
    cfg = _fast_config(tmp_path)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 4
    assert "missing artifact" in capsys.readouterr().err
    assert main(["race", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 4


def test_stages_succeed(fast):
    assert fast[3] == [0, 0, 0]


def test_track_files_deterministic(fast, tmp_path):
    cfg, out, _, _ = fast
    assert main(["gen-track", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    for name in ("train", "val1"):
        for kind in ("track", "raceline"):
            f = f"tracks/{kind}_{name}.csv"
            assert (tmp_path / f).read_bytes() == (out / f).read_bytes()
        Track.from_csv((out / f"tracks/track_{name}.csv").read_text())


def test_collect_log(fast):
    cfg, out, _, _ = fast
    header, rows = io.read_csv(out / "logs" / "collect.csv")
    _, laps = io.read_csv(out / "logs" / "collect_laps.csv")
    lap_time = float(laps[0][1])
    assert abs((len(rows) - 1) - lap_time / 0.02) <= 1
    lim = load_config(cfg).vehicle.limits
    U = np.array([[float(c) for c in r[8:10]] for r in rows[:-1]])
    assert np.all(U >= lim.u_min) and np.all(U <= lim.u_max)


def test_training_report(fast):
    _, out, _, _ = fast
    report = io.read_json(out / "models" / "initial" / "training_report.json")
    assert [g["target"] for g in report["gps"]] == ["vx", "vy", "omega"]
    assert all(g["nu"] == 2.5 for g in report["gps"])
    assert report["n_samples"] <= 100


def test_manifest_records_hashes(fast):
    _, out, _, _ = fast
    data = io.read_json(out / "manifest.json")
    assert set(data["stages"]) >= {"gen-track", "collect", "train"}
    for entry in data["stages"].values():
        for rec in entry["outputs"].values():
            assert io.sha256_file(out / rec["path"]) == rec["sha256"]
    assert set(data["track_seeds"]) == {"train", "val1"}


def test_race_validate_update(fast, tmp_path):
    cfg, out, args, _ = fast
    assert main(["race", "--scenario", "best", *args]) == 0
    stages = io.read_json(out / "manifest.json")["stages"]
    summary = io.read_json(out / stages["race:best"]["outputs"]["summary"]["path"])
    assert len(summary["lap_times"]) == 1
    assert main(["validate", "--log", "race:best", *args]) == 0
    rec = io.read_json(out / "manifest.json")["stages"]["validate:initial_race_best"]["outputs"]["metrics"]
    metrics = io.read_json(out / rec["path"])
    assert metrics["n"] > 0
    for comp in ("vx", "vy", "omega"):
        assert metrics["rms_raw"][comp] > 0 and 0 <= metrics["coverage95"][comp] <= 1
    assert main(["update", "--log", "race:best", *args]) == 0
    assert main(["validate", "--model", "updated", "--log", "race:best", *args]) == 0


def test_tampered_artifact_is_rejected(fast, tmp_path):
    cfg, out, args, _ = fast
    work = tmp_path / "copy"
    shutil.copytree(out, work)
    p = work / "models" / "initial" / "gp_vx.gp"
    p.write_text(p.read_text() + " ")
    wargs = ["--config", str(cfg), "--out", str(work)]
    assert main(["race", "--scenario", "bayes", *wargs]) == 4
    ws = Workspace(work, load_config(cfg))
    assert "train:gp_vx.gp" in ws.manifest.verify()


def test_empty_log_update_fails(fast, tmp_path):
    cfg, out, _, _ = fast
    work = tmp_path / "copy"
    shutil.copytree(out, work)
    ws = Workspace(work, load_config(cfg))
    empty = io.write_transitions(work / "logs" / "empty.csv", np.zeros((1, 7)), np.zeros((0, 2)), 0.02)
    ws.manifest.record("race:bayes", {"log": empty})
    assert main(["update", "--config", str(cfg), "--out", str(work)]) == 3


def test_different_seed_resets_manifest(fast, tmp_path):
    cfg, _, _, _ = fast
    c = load_config(cfg)
    Workspace(tmp_path, c).manifest.record("x", {})
    assert "x" in Manifest.open(tmp_path, c.path, Workspace(tmp_path, c).manifest.data["config"]["sha256"],
                                0).data["stages"]
    assert Workspace(tmp_path, c.with_seed(5)).manifest.data["stages"] == {}


def test_json_and_csv_io(tmp_path):
    io.write_json(tmp_path / "a.json", {"b": np.float64(1.5), "a": [1, 2]})
    assert json.loads((tmp_path / "a.json").read_text()) == {"a": [1, 2], "b": 1.5}
    io.write_csv(tmp_path / "a.csv", ["x", "y"], [[0.1, 2]])
    assert io.read_csv(tmp_path / "a.csv") == (["x", "y"], [["0.1", "2"]])
    with pytest.raises(io.ArtifactError):
        io.require(tmp_path / "missing")
