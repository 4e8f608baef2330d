import csv

import numpy as np
import pytest

from polarbev import dataset
from polarbev.cli import main
from polarbev.synthdata import SceneSpec, generate_samples
from polarbev.model import ModelConfig
from polarbev.train import IoUAccumulator, iou

SPEC_TEXT = """\
image_height = 32
image_width = 32
fx = 32.0
fy = 32.0
cx = 16.0
cy = 8.0
bev_z = 8
bev_x = 12
cell_size = 1.0
z_range = 2.0, 8.0
pedestrian_z_range = 2.0, 6.0
cars = 1, 1
pedestrians = 0, 2
supersample = 1
"""

CONFIG_TEXT = """\
image_height = 32
image_width = 32
channels = 8
heads = 2
ffn_mult = 1
radial_bins = 4, 4
bev_z = 8
bev_x = 12
cell_size = 1.0
attention.mode = soft
train.epochs = 2
train.batch_size = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.txt").write_text(SPEC_TEXT)
    (root / "model.txt").write_text(CONFIG_TEXT)
    assert main(["gen", "--spec", str(root / "spec.txt"), "--config", str(root / "model.txt"),
                 "--out", str(root / "data"), "--count", "4", "--seed", "5"]) == 0
    assert main(["train", "--config", str(root / "model.txt"), "--data", str(root / "data"),
                 "--out", str(root / "run"), "--seed", "1"]) == 0
    return root


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- iou --------------------------------------------------------------------------------

def test_iou_examples():
    a = np.zeros((4, 4), bool)
    a[0, :] = True
    assert iou(a, a) == 1.0
    b = np.zeros((4, 4), bool)
    b[3, :] = True
    assert iou(a, b) == 0.0
    c = np.zeros((4, 4), bool)
    c[0, 2:] = True
    c[1, :2] = True
    assert iou(a, c) == pytest.approx(2 / 6)


def test_iou_mask_and_empty_union():
    a = np.ones((2, 2), bool)
    assert iou(a, ~a, np.zeros((2, 2))) == 1.0
    assert iou(a, a, np.eye(2)) == 1.0


def test_iou_shape_mismatch():
    with pytest.raises(ValueError):
        iou(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        iou(np.ones((2, 2)), np.ones((2, 2)), np.ones((3, 2)))


def test_accumulator_matches_pooled_iou():
    rng = np.random.default_rng(0)
    pred = rng.uniform(size=(3, 2, 5, 5)) > 0.5
    gt = rng.uniform(size=(3, 2, 5, 5)) > 0.5
    mask = rng.uniform(size=(3, 5, 5)) > 0.3
    acc = IoUAccumulator(2)
    acc.update(pred, gt, mask)
    for k in range(2):
        m = np.broadcast_to(mask, pred[:, k].shape)
        assert acc.per_class()[k] == pytest.approx(iou(pred[:, k], gt[:, k], m))


# -- files ----------------------------------------------------------------------------------

def test_pgm_roundtrip(tmp_path):
    a = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    dataset.write_pgm(tmp_path / "a.pgm", a)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    np.testing.assert_array_equal(dataset.read_pgm(tmp_path / "a.pgm"), a)


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 5, 7)) / 255.0
    dataset.write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_allclose(dataset.read_ppm(tmp_path / "a.ppm"), img, atol=1e-12)


def test_bad_pgm_rejected(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(Exception):
        dataset.read_pgm(tmp_path / "bad.pgm")


def test_dataset_roundtrip(tmp_path):
    spec = SceneSpec(frames=2)
    samples = generate_samples(1, 2, spec, ModelConfig().polar_grids(spec.camera))
    dataset.write_dataset(tmp_path, samples, spec)
    ids, values = dataset.read_manifest(tmp_path)
    assert ids == ["sample_000000", "sample_000001"]
    assert values["frames"] == "2"
    back = dataset.read_dataset(tmp_path)
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.gt, b.gt)
        np.testing.assert_array_equal(a.visibility, b.visibility)
        assert a.intrinsics == b.intrinsics


# -- commands -------------------------------------------------------------------------------

def test_gen_writes_manifest(workspace):
    ids, values = dataset.read_manifest(workspace / "data")
    assert len(ids) == 4 and values["bev_x"] == "12"


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "checkpoint.bevt").exists()
    loss = read_csv(run / "loss.csv")
    assert loss[0] == ["epoch", "loss"] and len(loss) == 3
    rows = read_csv(run / "metrics.csv")
    assert rows[0] == ["class", "iou"]
    assert [r[0] for r in rows[1:]] == ["ground", "car", "pedestrian", "mean"]
    vals = [float(r[1]) for r in rows[1:]]
    assert all(0 <= v <= 1 for v in vals)
    assert vals[-1] == pytest.approx(np.mean(vals[:-1]), abs=1e-6)


def test_train_is_deterministic(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "model.txt"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path), "--seed", "1"]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (workspace / "run" / "metrics.csv").read_bytes()
    assert (tmp_path / "loss.csv").read_bytes() == (workspace / "run" / "loss.csv").read_bytes()


def test_eval_reproduces_train_metrics(workspace, tmp_path):
    assert main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.bevt"),
                 "--data", str(workspace / "data"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_text() == (workspace / "run" / "metrics.csv").read_text()


def test_infer_writes_x_by_z_pgms(workspace, tmp_path):
    assert main(["infer", "--checkpoint", str(workspace / "run" / "checkpoint.bevt"),
                 "--sample", str(workspace / "data" / "sample_000000"), "--out", str(tmp_path)]) == 0
    for name in ("ground", "car", "pedestrian", "mask"):
        raw = (tmp_path / f"{name}.pgm").read_bytes()
        assert raw.startswith(b"P5\n12 8\n255\n")
    mask = dataset.read_pgm(tmp_path / "mask.pgm")
    assert set(np.unique(mask)) <= {0, 255}


def test_bad_config_key_fails(workspace, tmp_path, capsys):
    (tmp_path / "bad.txt").write_text("no_such_key = 3\n")
    code = main(["train", "--config", str(tmp_path / "bad.txt"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "o")])
    assert code != 0
    assert "no_such_key" in capsys.readouterr().err


def test_bad_mode_fails(workspace, tmp_path, capsys):
    (tmp_path / "bad.txt").write_text(CONFIG_TEXT.replace("= soft", "= sideways"))
    code = main(["train", "--config", str(tmp_path / "bad.txt"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "o")])
    assert code != 0 and capsys.readouterr().err


def test_mismatched_data_fails(workspace, tmp_path, capsys):
    code = main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "o")])
    assert code != 0 and "shape" in capsys.readouterr().err


def test_missing_inputs_fail(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.bevt"), "--data", str(tmp_path),
                 "--out", str(tmp_path / "o")]) != 0
    assert capsys.readouterr().err
    assert main(["infer", "--checkpoint", str(tmp_path / "none.bevt"), "--sample", str(tmp_path / "s"),
                 "--out", str(tmp_path / "o")]) != 0
    assert capsys.readouterr().err


def test_corrupt_checkpoint_fails(workspace, tmp_path, capsys):
    (tmp_path / "c.bevt").write_bytes(b"JUNK" + bytes(20))
    assert main(["eval", "--checkpoint", str(tmp_path / "c.bevt"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "o")]) != 0
    assert capsys.readouterr().err


def test_gen_f64_precision(tmp_path, workspace):
    assert main(["gen", "--spec", str(workspace / "spec.txt"), "--out", str(tmp_path / "d"),
                 "--count", "1", "--precision", "f64"]) == 0
    s = dataset.read_dataset(tmp_path / "d")[0]
    assert s.image.dtype == np.float64
