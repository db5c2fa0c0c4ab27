import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from vrpcc.cli import EXIT_CODES, main, parse_int_list, parse_synth
from vrpcc.codec import Model
from vrpcc.metrics import chamfer
from vrpcc.pointset import load, save, synth_dataset

CONFIG = "n = 64\nlatent = 16\nwidth = 16\nk = 8\nbatch = 4\nsteps = 4\nlr = 1e-3\n"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "train.cfg").write_text(CONFIG)
    assert main(["train", "--config", str(d / "train.cfg"), "--data", "synth:n=64,count=6,pose=1",
                 "--out", str(d / "m.ckpt"), "--log", str(d / "log.csv")]) == 0
    cloud = synth_dataset("torus", 64, 9, 1, random_pose=True)[0]
    save(cloud, str(d / "in.ply"))
    data = d / "data"
    data.mkdir()
    for i, c in enumerate(synth_dataset("all", 64, 3, 2)):
        save(c, str(data / f"c{i}.xyz"))
    return d


def run(*args):
    return main([str(a) for a in args])


def test_train_outputs(workdir):
    assert Model.load(str(workdir / "m.ckpt")).latent == 16
    rows = list(csv.reader(open(workdir / "log.csv")))
    assert rows[0][0] == "step" and len(rows) == 5


def test_compress_decompress_round_trip(workdir, capsys):
    assert run("compress", "--model", workdir / "m.ckpt", "--in", workdir / "in.ply", "--keep", 16,
               "--out", workdir / "a.vrpc") == 0
    assert "k=16" in capsys.readouterr().out
    assert run("decompress", "--model", workdir / "m.ckpt", "--in", workdir / "a.vrpc",
               "--out", workdir / "out.ply") == 0
    out = load(str(workdir / "out.ply"))
    assert out.shape == (64, 3)
    # same path as the eval k = l row
    assert run("eval", "--model", workdir / "m.ckpt", "--data", workdir / "in.ply", "--truncations", 16,
               "--out", workdir / "one.csv") == 0
    row = list(csv.DictReader(open(workdir / "one.csv")))[0]
    assert float(row["cd"]) == chamfer(load(str(workdir / "in.ply")), out)


def test_compress_deterministic(workdir):
    for name in ("x1", "x2"):
        run("compress", "--model", workdir / "m.ckpt", "--in", workdir / "in.ply", "--keep", 7,
            "--out", workdir / f"{name}.vrpc")
    assert (workdir / "x1.vrpc").read_bytes() == (workdir / "x2.vrpc").read_bytes()


def test_compress_bpp_target(workdir, capsys):
    assert run("compress", "--model", workdir / "m.ckpt", "--in", workdir / "in.ply", "--keep", "0.3bpp",
               "--out", workdir / "b.vrpc") == 0
    assert "payload_bpp" in capsys.readouterr().out


def test_eval_csv(workdir):
    assert run("eval", "--model", workdir / "m.ckpt", "--data", workdir / "data", "--truncations", "4,8,16",
               "--baseline-octree", "2-4", "--out", workdir / "rd.csv", "--per-cloud", workdir / "per.csv") == 0
    rows = list(csv.DictReader(open(workdir / "rd.csv")))
    assert [r["k"] or r["depth"] for r in rows] == ["4", "8", "16", "2", "3", "4"]
    assert set(rows[0]) == {"codec", "k", "depth", "bpp", "cd", "emd", "fscore", "p2p", "p2plane"}
    assert len(list(csv.DictReader(open(workdir / "per.csv")))) == 12


def test_error_exit_codes(workdir, tmp_path, capsys):
    ck = workdir / "m.ckpt"
    assert run("compress", "--model", ck, "--in", workdir / "in.ply", "--keep", 99, "--out", tmp_path / "x") == EXIT_CODES["range"]
    err = capsys.readouterr().err.strip()
    assert err.startswith(f"error {EXIT_CODES['range']} range:") and "\n" not in err

    (tmp_path / "bad.xyz").write_text("1 2\n")
    assert run("compress", "--model", ck, "--in", tmp_path / "bad.xyz", "--keep", 4, "--out", tmp_path / "x") == EXIT_CODES["parse"]

    (tmp_path / "bad.vrpc").write_bytes(b"VRPC" + b"\0" * 70)
    assert run("decompress", "--model", ck, "--in", tmp_path / "bad.vrpc", "--out", tmp_path / "o.xyz") == EXIT_CODES["parse"]

    other = tmp_path / "other.cfg"
    other.write_text(CONFIG + "seed = 5\n")
    run("train", "--config", other, "--data", "synth:n=64,count=4", "--out", tmp_path / "o.ckpt")
    run("compress", "--model", ck, "--in", workdir / "in.ply", "--keep", 4, "--out", tmp_path / "c.vrpc")
    assert run("decompress", "--model", tmp_path / "o.ckpt", "--in", tmp_path / "c.vrpc",
               "--out", tmp_path / "o.xyz") == EXIT_CODES["model-mismatch"]

    (tmp_path / "bad.cfg").write_text("lambda = x\n")
    assert run("train", "--config", tmp_path / "bad.cfg", "--data", "synth:n=64,count=2",
               "--out", tmp_path / "z") == EXIT_CODES["config"]
    assert run("compress", "--model", tmp_path / "missing", "--in", workdir / "in.ply", "--keep", 4,
               "--out", tmp_path / "x") == EXIT_CODES["io"]
    assert run("eval", "--model", ck, "--data", workdir / "data", "--truncations", "0",
               "--out", tmp_path / "e.csv") == EXIT_CODES["range"]
    codes = [EXIT_CODES[k] for k in EXIT_CODES]
    assert len(set(codes)) == len(codes) and 0 not in codes and 1 not in codes


def test_usage_errors(workdir, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["compress"])
    assert exc.value.code == EXIT_CODES["usage"]
    assert run("eval", "--model", workdir / "m.ckpt", "--data", "synth:n=64,colour=red",
               "--out", tmp_path / "x") == EXIT_CODES["usage"]
    assert run("compress", "--model", workdir / "m.ckpt", "--in", workdir / "in.ply", "--keep", "lots",
               "--out", tmp_path / "x") == EXIT_CODES["usage"]


def test_parsers():
    assert parse_int_list("1,2,5-7", "x") == [1, 2, 5, 6, 7]
    clouds = parse_synth("synth:shape=sphere+torus,n=32,count=3,seed=1")
    assert len(clouds) == 3 and clouds[0].shape == (32, 3)
    np.testing.assert_allclose(np.linalg.norm(clouds[0], axis=1), 1, atol=1e-9)


def test_console_entry_point_and_thread_env(workdir):
    env = dict(os.environ, VRPCC_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "vrpcc.cli", "decompress", "--model", str(workdir / "m.ckpt"),
                           "--in", str(workdir / "missing.vrpc"), "--out", "x.xyz"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == EXIT_CODES["io"]
    assert proc.stderr.startswith(f"error {EXIT_CODES['io']} io:")
