import csv
import json

import numpy as np
import pytest

from tsdf_dse import accuracy
from tsdf_dse.cli import main
from tsdf_dse.dse import read_sweep_json


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture(scope="module")
def small_seq(tmp_path_factory):
    d = tmp_path_factory.mktemp("seq")
    assert main(["gen", "--out", str(d), "--frames", "8", "--seed", "3"]) == 0
    return d


def test_gen_zero_frames_is_usage_error(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path), "--frames", "0"]) == 1


def test_gen_bad_scene(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps({"room": {"min": [0, 0, 0]}}))
    assert main(["gen", "--scene", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")]) == 1
    assert main(["gen", "--scene", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2


def test_gen_manifest_and_determinism(tmp_path, small_seq):
    assert len((small_seq / "frames.jsonl").read_text().splitlines()) == 8
    assert main(["gen", "--out", str(tmp_path), "--frames", "8", "--seed", "3"]) == 0
    for rel in ["frames.jsonl", "intrinsics.json", "gt.xyz", "depth/000007.d16"]:
        assert (tmp_path / rel).read_bytes() == (small_seq / rel).read_bytes()


def test_unknown_flag_is_usage_error(capsys):
    assert main(["fuse", "--bogus"]) == 1
    assert main([]) == 1


def test_fuse_defaults(tmp_path, small_seq, capsys):
    code, doc = run(capsys, "fuse", "--seq", small_seq, "--out", tmp_path, "--gt", small_seq / "gt.xyz")
    assert code == 0
    assert doc["design_id"] == "E(100)+D(30)" and doc["config"]["threads"] == 8
    assert doc["frames_processed"] == 8 and 0 < doc["fscore"] <= 1
    stats = json.loads((tmp_path / "stats.json").read_text())
    cats = ["fused", "behind_camera_plane", "out_of_trunc_band", "out_of_image_scope", "invalid_depth"]
    assert sum(stats[c] for c in cats) == stats["classified"]
    assert set(stats["work_units"]) == {"serial", "parallel"}
    assert json.loads((tmp_path / "design.json").read_text()) == doc
    assert len(accuracy.read_xyz(tmp_path / "recon.xyz")) == doc["points"]


def test_fuse_intermediate_design(tmp_path, small_seq, capsys):
    code, doc = run(capsys, "fuse", "--seq", small_seq, "--algo", "A", "--freq", "80", "--fps", "3.75",
                    "--out", tmp_path)
    assert code == 0 and doc["design_id"] == "A+E(80)+D(3.75)"
    assert doc["frames_processed"] == 1 and doc["config"]["threads"] == 4


def test_fuse_bad_config_and_io(tmp_path, small_seq, capsys):
    assert main(["fuse", "--seq", str(small_seq), "--freq", "75", "--out", str(tmp_path)]) == 1
    assert main(["fuse", "--seq", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2


def test_eval_parity(tmp_path, capsys, rng):
    a, b = rng.random((300, 3)), rng.random((200, 3))
    accuracy.write_xyz(tmp_path / "a.xyz", a)
    accuracy.write_xyz(tmp_path / "b.xyz", b)
    code, doc = run(capsys, "eval", "--recon", tmp_path / "a.xyz", "--gt", tmp_path / "b.xyz", "--tau", "0.1")
    lib = accuracy.fscore(accuracy.read_xyz(tmp_path / "a.xyz"), accuracy.read_xyz(tmp_path / "b.xyz"), 0.1)
    assert code == 0 and doc == lib.to_dict()
    _, same = run(capsys, "eval", "--recon", tmp_path / "a.xyz", "--gt", tmp_path / "a.xyz")
    assert same["fscore"] == 1.0
    accuracy.write_xyz(tmp_path / "far.xyz", a + 100)
    _, far = run(capsys, "eval", "--recon", tmp_path / "far.xyz", "--gt", tmp_path / "a.xyz")
    assert far["fscore"] == 0.0
    (tmp_path / "empty.xyz").write_text("")
    assert main(["eval", "--recon", str(tmp_path / "a.xyz"), "--gt", str(tmp_path / "empty.xyz")]) == 2
    (tmp_path / "junk.xyz").write_text("1 2\nx y z\n")
    assert main(["eval", "--recon", str(tmp_path / "junk.xyz"), "--gt", str(tmp_path / "a.xyz")]) == 2


# --- sweep and select on the shared 90-frame sweep ---------------------------

def test_sweep_rows(sweep_dir):
    rows = list(csv.DictReader(open(sweep_dir / "out" / "sweep.csv")))
    assert len(rows) == 72
    assert sum(float(r["energy_reduction"]) == 1.0 for r in rows) == 1


def test_select_scan_share(sweep_dir, capsys):
    code, doc = run(capsys, "select", "--sweep", sweep_dir / "out" / "sweep.json", "--usecase", "scan_share")
    assert code == 0
    assert doc["accuracy_loss"] <= 0.0 and doc["latency"] <= 0.033
    points, _ = read_sweep_json(sweep_dir / "out" / "sweep.json")
    zero_loss_fps = {p.config.fps for p in points if p.accuracy_loss <= 0 and p.latency <= 0.033}
    assert doc["config"]["fps"] in zero_loss_fps and doc["config"]["fps"] >= min(zero_loss_fps)


def test_select_infeasible(sweep_dir, capsys):
    code, doc = run(capsys, "select", "--sweep", sweep_dir / "out" / "sweep.json", "--latency-max", "0")
    assert code == 3 and doc["selected"] is None


def test_select_relaxing_accuracy(sweep_dir, capsys):
    path = sweep_dir / "out" / "sweep.json"
    energies = []
    for acc in ("0", "0.01", "0.03"):
        code, doc = run(capsys, "select", "--sweep", path, "--latency-max", "33", "--accuracy-loss-max", acc)
        assert code == 0
        energies.append(doc["energy"])
    assert energies == sorted(energies, reverse=True)


def test_select_usage_errors(sweep_dir, tmp_path, capsys):
    path = str(sweep_dir / "out" / "sweep.json")
    assert main(["select", "--sweep", path, "--usecase", "nope"]) == 1
    assert main(["select", "--sweep", path, "--usecase", "scan_share", "--latency-max", "5"]) == 1
    (tmp_path / "x.json").write_text("{}")
    assert main(["select", "--sweep", str(tmp_path / "x.json")]) == 2


def test_fuse_measured_mode(tmp_path, small_seq, capsys):
    code, doc = run(capsys, "fuse", "--seq", small_seq, "--mode", "measured", "--freq", "50", "--out", tmp_path)
    assert code == 0 and doc["latency"] > 0


def test_fuse_with_perfmodel(tmp_path, small_seq, capsys):
    from tsdf_dse.perfmodel import LatencyModel, PowerModel, save_perfmodel
    save_perfmodel(tmp_path / "pm.json", PowerModel(p_static=3.0), LatencyModel(throughput_max=1e6))
    _, slow = run(capsys, "fuse", "--seq", small_seq, "--out", tmp_path / "a", "--perfmodel", tmp_path / "pm.json")
    _, fast = run(capsys, "fuse", "--seq", small_seq, "--out", tmp_path / "b")
    assert slow["latency"] == pytest.approx(10 * fast["latency"])
