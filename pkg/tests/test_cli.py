import json
import subprocess
import sys

import numpy as np
import pytest
from conftest import TINY

from synergy3d import textconfig
from synergy3d.cli import main
from synergy3d.morphable import N_PARAMS, load_basis, read_obj
from synergy3d.synthdata import load_dataset


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth-basis", "--seed", "2", "--vertices", "300", "--out", str(d / "basis.bin")]) == 0
    (d / "synth.cfg").write_text("version = 1\nn_samples = 60\n")
    assert main(["synth-data", "--basis", str(d / "basis.bin"), "--config", str(d / "synth.cfg"),
                 "--seed", "4", "--out", str(d / "data.bin")]) == 0
    (d / "net.cfg").write_text(textconfig.dump(TINY))
    (d / "train.cfg").write_text("version = 1\nepochs = 2\nbatch_size = 32\n")
    return d


def test_synth_basis_and_echo(files):
    basis = load_basis(files / "basis.bin")
    assert basis.n_vertices == 300
    echo = json.loads((files / "basis.bin.echo.json").read_text())
    assert echo["command"] == "synth-basis" and echo["args"]["seed"] == 2


def test_synth_data_is_byte_identical(files, capsys):
    for name in ("a.bin", "b.bin"):
        code, _, _ = run(capsys, "synth-data", "--basis", files / "basis.bin", "--config", files / "synth.cfg",
                         "--seed", 4, "--out", files / name)
        assert code == 0
    assert (files / "a.bin").read_bytes() == (files / "b.bin").read_bytes() == (files / "data.bin").read_bytes()
    assert (files / "a.bin.echo.json").read_text().replace("a.bin", "b.bin") == \
        (files / "b.bin.echo.json").read_text()


def test_seed_env_fallback(files, capsys, monkeypatch):
    monkeypatch.setenv("SYNERGY3D_SEED", "4")
    code, _, _ = run(capsys, "synth-data", "--basis", files / "basis.bin", "--config", files / "synth.cfg",
                     "--out", files / "env.bin")
    assert code == 0
    assert (files / "env.bin").read_bytes() == (files / "data.bin").read_bytes()
    monkeypatch.setenv("SYNERGY3D_SEED", "5")
    run(capsys, "synth-data", "--basis", files / "basis.bin", "--config", files / "synth.cfg", "--out", files / "e5.bin")
    assert (files / "e5.bin").read_bytes() != (files / "data.bin").read_bytes()
    monkeypatch.setenv("SYNERGY3D_SEED", "abc")
    code, _, err = run(capsys, "synth-basis", "--out", files / "x.bin")
    assert code == 1 and err.strip().splitlines()[-1].startswith("E:usage:")


def test_export_mesh_round_trip(files, capsys):
    (files / "zero.json").write_text(json.dumps([0.0] * N_PARAMS))
    code, _, _ = run(capsys, "export-mesh", "--params", files / "zero.json", "--basis", files / "basis.bin",
                     "--out", files / "mean.obj")
    assert code == 0
    basis = load_basis(files / "basis.bin")
    verts, tris = read_obj(files / "mean.obj")
    np.testing.assert_array_equal(verts, basis.mean.reshape(3, -1, order="F"))
    np.testing.assert_array_equal(tris, basis.triangles)


def test_eval_align_on_groundtruth(files, capsys):
    ds = load_dataset(files / "data.bin")
    pred = {"landmarks": [[[float(v) for v in row] for row in lmk.T] for lmk in ds.landmarks]}
    (files / "gt.json").write_text(json.dumps(pred))
    code, _, _ = run(capsys, "eval", "--predictions", files / "gt.json", "--data", files / "data.bin",
                     "--protocol", "align", "--report", files / "align.json")
    assert code == 0
    rep = json.loads((files / "align.json").read_text())
    assert rep["overall"] == 0.0
    assert all(v == 0.0 for v in rep["per_bin"].values() if v is not None)
    assert {"protocol", "per_bin", "overall", "n_samples", "n_excluded", "config_echo"} <= set(rep)


@pytest.mark.parametrize("protocol", ["orient", "p1", "p2", "florence", "align"])
def test_eval_param_protocols_on_groundtruth(files, capsys, protocol):
    ds = load_dataset(files / "data.bin").subset(slice(0, 4))
    from synergy3d.synthdata import save_dataset

    save_dataset(ds, files / "small.bin")
    (files / "gtp.json").write_text(json.dumps({"params": ds.params.astype(float).tolist()}))
    code, out, err = run(capsys, "eval", "--predictions", files / "gtp.json", "--data", files / "small.bin",
                         "--basis", files / "basis.bin", "--protocol", protocol)
    assert code == 0, err
    rep = json.loads(out)
    assert rep["protocol"] == protocol
    assert rep["overall"] <= 1e-5


def test_train_infer_eval(files, capsys):
    out = files / "run"
    code, stdout, err = run(capsys, "train", "--data", files / "data.bin", "--basis", files / "basis.bin",
                            "--net-config", files / "net.cfg", "--train-config", files / "train.cfg",
                            "--seed", 1, "--out-dir", out)
    assert code == 0, err
    assert "best epoch" in stdout
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 2
    ds = load_dataset(files / "data.bin")
    (files / "obs.json").write_text(json.dumps(ds.observations[0].reshape(-1, 3).astype(float).tolist()))
    code, _, err = run(capsys, "infer", "--checkpoint", out / "model.ckpt", "--basis", files / "basis.bin",
                       "--observation", files / "obs.json", "--out-landmarks", files / "lmk.json",
                       "--out-params", files / "params.json")
    assert code == 0, err
    lmk = json.loads((files / "lmk.json").read_text())
    assert len(lmk) == 68 and all(len(r) == 3 for r in lmk)
    assert len(json.loads((files / "params.json").read_text())) == N_PARAMS
    code, stdout, err = run(capsys, "eval", "--checkpoint", out / "model.ckpt", "--basis", files / "basis.bin",
                            "--data", files / "data.bin", "--protocol", "align")
    assert code == 0, err
    assert json.loads(stdout)["n_samples"] == 60


def test_ablate(files, capsys):
    (files / "grid.cfg").write_text(
        "version = 1\ndata = data.bin\nbasis = basis.bin\nnet_config = net.cfg\ntrain_config = train.cfg\n"
        "seeds = 0, 1\nout_dir = grid_out\n")
    code, stdout, err = run(capsys, "ablate", "--grid", files / "grid.cfg")
    assert code == 0, err
    rep = json.loads((files / "grid_out" / "grid_report.json").read_text())
    assert [(r["seed"], r["config"]) for r in rep["rows"]] == [
        (s, m) for s in (0, 1) for m in ("baseline", "mafa", "l2m", "full")]
    assert (files / "grid_out" / "config_echo.json").exists()


def test_usage_errors_exit_1(capsys, files):
    for argv in (["bogus"], ["synth-basis"], ["synth-basis", "--out", "x", "--nope"],
                 ["eval", "--data", "d", "--protocol", "align"], ["--jobs", "0", "synth-basis", "--out", "x"]):
        code, _, err = run(capsys, *argv)
        assert code == 1, argv
        assert err.strip().splitlines()[-1].startswith("E:usage:")


def test_data_errors_exit_2(capsys, files, tmp_path):
    code, _, err = run(capsys, "synth-data", "--basis", tmp_path / "missing.bin", "--out", tmp_path / "o.bin")
    assert code == 2 and err.startswith("E:io:") and len(err.strip().splitlines()) == 1
    (tmp_path / "junk.bin").write_bytes(b"junkjunkjunk")
    code, _, err = run(capsys, "synth-data", "--basis", tmp_path / "junk.bin", "--out", tmp_path / "o.bin")
    assert code == 2 and err.startswith("E:data:")
    (tmp_path / "p.json").write_text("{not json")
    code, _, err = run(capsys, "export-mesh", "--params", tmp_path / "p.json", "--basis", files / "basis.bin",
                       "--out", tmp_path / "m.obj")
    assert code == 2 and err.startswith("E:")
    (tmp_path / "bad.cfg").write_text("version = 1\nno_such = 1\n")
    code, _, err = run(capsys, "synth-data", "--basis", files / "basis.bin", "--config", tmp_path / "bad.cfg",
                       "--out", tmp_path / "o.bin")
    assert code == 2 and err.startswith("E:format:")


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "synergy3d.cli", "synth-basis", "--vertices", "10",
                          "--out", str(tmp_path / "b.bin")], capture_output=True, text=True)
    assert res.returncode == 2
    assert res.stderr.startswith("E:data:")
