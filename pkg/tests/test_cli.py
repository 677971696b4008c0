import json
import shutil

import pytest

from anchorscene.cli import main
from anchorscene.config import Config, SceneSpec, dump_kv

SPEC = SceneSpec(object_count=(2, 2), l_shape_prob=0.0, room_width=(4.5, 4.5), room_depth=(4.5, 4.5))
TINY = Config(min_scan_points=64, sa1_centroids=128, sa2_centroids=32, sa1_hidden=16, feature_dim=64,
              obj_candidates=64, wall_candidates=8, batch=1, lr=3e-3, plateau_patience=10_000, epochs=300,
              shape_dim=32, shape_hidden=32, occ_queries=512, prior_points=128, shape_batch=4, shape_lr=1e-3,
              shape_epochs=3, pretrain_epochs=1, mesh_resolution=16, cd_samples=256)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.txt").write_text(dump_kv(SPEC))
    (root / "cfg.txt").write_text(dump_kv(TINY))
    assert main(["gen", "--spec", str(root / "spec.txt"), "--count", "1", "--out", str(root / "corpus")]) == 0
    assert main(["train-det", "--corpus", str(root / "corpus"), "--config", str(root / "cfg.txt"),
                 "--out", str(root / "det.bin")]) == 0
    assert main(["train-shape", "--corpus", str(root / "corpus"), "--det", str(root / "det.bin"),
                 "--config", str(root / "cfg.txt"), "--out", str(root / "shape.bin")]) == 0
    return root


def test_training_writes_logs_and_plots(workdir):
    for name in ("det.bin", "det.csv", "det_loss.png", "det_fusion.json", "det_fusion.png",
                 "shape.bin", "shape.csv", "shape_loss.png"):
        assert (workdir / name).is_file(), name
    assert len((workdir / "det.csv").read_text().splitlines()) == TINY.epochs + 1


def test_reconstruct_scan(workdir):
    out = workdir / "single"
    scan = workdir / "corpus/scenes/00000/scan.ply"
    assert main(["reconstruct", "--scan", str(scan), "--det", str(workdir / "det.bin"),
                 "--shape", str(workdir / "shape.bin"), "--out", str(out)]) == 0
    doc = json.loads((out / "scene.json").read_text())
    assert len(doc["objects"]) >= 1
    assert all((out / o["mesh"]).is_file() for o in doc["objects"])
    assert (out / "anchors.ply").is_file()


def test_reconstruct_and_evaluate_corpus(workdir):
    pred = workdir / "pred"
    assert main(["reconstruct", "--corpus", str(workdir / "corpus"), "--det", str(workdir / "det.bin"),
                 "--shape", str(workdir / "shape.bin"), "--out", str(pred)]) == 0
    (pred / "corpus.json").write_text("{}")
    rep = workdir / "rep.json"
    assert main(["evaluate", "--pred", str(pred), "--gt", str(workdir / "corpus"), "--report", str(rep),
                 "--config", str(workdir / "cfg.txt")]) == 0
    r = json.loads(rep.read_text())
    assert 0.0 <= r["detection"]["map"] <= 1.0
    assert (workdir / "rep.csv").is_file()
    assert (workdir / "rep_ap.png").is_file() and (workdir / "rep_pr_box.png").is_file()


def test_evaluate_identical_dirs(workdir, tmp_path):
    gt = workdir / "corpus"
    other = tmp_path / "copy"
    shutil.copytree(gt, other)
    rep = tmp_path / "rep.json"
    assert main(["evaluate", "--pred", str(other), "--gt", str(gt), "--report", str(rep), "--no-plots",
                 "--config", str(workdir / "cfg.txt")]) == 0
    r = json.loads(rep.read_text())
    assert r["detection"]["map"] == 1.0 and r["layout"]["f1"] == 1.0
    assert not list(tmp_path.glob("*.png"))


def test_missing_checkpoint_exit_code(workdir, tmp_path, capsys):
    missing = tmp_path / "nope.bin"
    code = main(["reconstruct", "--scan", str(workdir / "corpus/scenes/00000/scan.ply"), "--det", str(missing),
                 "--shape", str(workdir / "shape.bin"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert str(missing) in capsys.readouterr().err
    code = main(["train-shape", "--corpus", str(workdir / "corpus"), "--det", str(missing),
                 "--out", str(tmp_path / "s.bin")])
    assert code == 2


def test_bad_arguments(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert main(["gen", "--spec", str(tmp_path / "missing.txt"), "--count", "1", "--out", str(tmp_path)]) == 2


def test_gen_seed_flag(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--count", "1", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a/scenes/00000/scan.ply").read_bytes()
    assert a == (tmp_path / "b/scenes/00000/scan.ply").read_bytes()
    assert main(["gen", "--count", "1", "--seed", "8", "--out", str(tmp_path / "c")]) == 0
    assert a != (tmp_path / "c/scenes/00000/scan.ply").read_bytes()
