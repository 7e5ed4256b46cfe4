import numpy as np
import pytest

from scanpath.cli import main
from scanpath.core import GazePoint, GridSpec, gaussian_map
from scanpath.data_io import load_scanpath_dataset, read_pgm, write_pgm
from scanpath.metrics import METRIC_ORDER


def write_cfg(path, **over):
    base = dict(
        grid_width=16, grid_height=16, sigma=1.0, layers=1, hidden_channels=3,
        kernel_size=3, feature_channels=2, feature_source="trainable",
        th=0.7, n_fixations=4, gamma=0.3, lambda_base=0.01, lambda_slope=0.01,
        lr=1e-3, max_steps=4, checkpoint_every=0, seed=1,
        image_width=16, image_height=16,
    )
    base.update(over)
    path.write_text("".join(f"{k}={v}\n" for k, v in base.items()))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic data, a run config and a briefly trained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--config", str(write_cfg(root / "synth.cfg")), "--out", str(data),
                 "--images", "2", "--observers", "3", "--rois", "1", "--seed", "3"]) == 0
    cfg = write_cfg(root / "run.cfg", dataset_csv=str(data / "dataset.csv"), images_dir=str(data))
    run = root / "train"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    return dict(root=root, data=data, cfg=cfg, ckpt=run / "checkpoint_final.spck", train_out=run)


def test_synth_outputs_and_reproducibility(tmp_path, workspace):
    cfg = write_cfg(tmp_path / "s.cfg")
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["synth", "--config", str(cfg), "--out", str(out),
                     "--images", "2", "--observers", "2", "--rois", "1", "--seed", "9"]) == 0
    assert (a / "dataset.csv").read_bytes() == (b / "dataset.csv").read_bytes()
    assert (a / "synth000.pgm").read_bytes() == (b / "synth000.pgm").read_bytes()
    ds = load_scanpath_dataset(a / "dataset.csv", images_dir=a)
    assert len(ds.scanpaths) == 4
    assert all(s.n == 8 for s in ds.scanpaths)


def test_train_outputs(workspace):
    run = workspace["train_out"]
    assert (run / "loss_log.csv").exists()
    assert (run / "checkpoint_final.spck").exists()
    assert (run / "config.txt").exists()
    manifest = (run / "manifest.txt").read_text()
    assert "command=train" in manifest
    assert "package_version=" in manifest
    lines = (run / "loss_log.csv").read_text().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 5  # 4 steps


def test_config_echo_contains_every_key(workspace):
    echoed = (workspace["train_out"] / "config.txt").read_text()
    for key in ("grid_width", "lambda_slope", "tde_k", "dataset_csv", "teacher_forcing"):
        assert f"{key}=" in echoed


def test_predict_deterministic_and_closes_format_loop(workspace, tmp_path):
    cfg, ckpt = workspace["cfg"], workspace["ckpt"]
    outs = []
    for name in ("p1", "p2"):
        out = tmp_path / name
        assert main(["predict", "--config", str(cfg), "--out", str(out),
                     "--checkpoint", str(ckpt), "--count", "3", "--seed", "11"]) == 0
        outs.append(out / "predicted.csv")
    assert outs[0].read_bytes() == outs[1].read_bytes()

    ds = load_scanpath_dataset(outs[0])
    assert len(ds.scanpaths) == 2 * 3  # images x count, zero row loss
    assert all(s.n == 4 for s in ds.scanpaths)

    ev = tmp_path / "ev"
    truth = workspace["data"] / "dataset.csv"
    assert main(["evaluate", "--config", str(cfg), "--out", str(ev),
                 "--predicted", str(outs[0]), "--truth", str(truth)]) == 0
    lines = (ev / "report.csv").read_text().splitlines()
    assert lines[0] == "metric,mean,std,direction"
    assert [ln.split(",")[0] for ln in lines[1:]] == list(METRIC_ORDER)


def test_evaluate_identity_best_rows(tmp_path, workspace):
    # one scanpath per image: predicted == truth pairs each path with itself
    data = workspace["data"]
    full = load_scanpath_dataset(data / "dataset.csv", images_dir=data)
    from scanpath.data_io import save_scanpath_csv

    singles = {}
    for s in full.scanpaths:
        singles.setdefault(s.image_id, s)
    csv = tmp_path / "single.csv"
    save_scanpath_csv(list(singles.values()), csv)

    out = tmp_path / "ev"
    assert main(["evaluate", "--config", str(workspace["cfg"]), "--out", str(out),
                 "--predicted", str(csv), "--truth", str(csv)]) == 0
    rows = {ln.split(",")[0]: ln.split(",") for ln in (out / "report.csv").read_text().splitlines()[1:]}
    assert float(rows["LEV"][1]) == 0.0
    assert float(rows["SCAM"][1]) == pytest.approx(1.0)
    assert float(rows["HAU"][1]) == 0.0
    assert float(rows["FRE"][1]) == 0.0
    assert float(rows["fDTW"][1]) == 0.0
    assert float(rows["TDE"][1]) == 0.0


def test_evaluate_with_baselines(tmp_path, workspace):
    data, cfg = workspace["data"], workspace["cfg"]
    truth = data / "dataset.csv"
    out = tmp_path / "ev"
    assert main(["evaluate", "--config", str(cfg), "--out", str(out),
                 "--predicted", str(truth), "--truth", str(truth), "--baselines"]) == 0
    assert (out / "human_baseline.csv").exists()
    assert (out / "random_baseline.csv").exists()
    lines = (out / "random_baseline.csv").read_text().splitlines()
    assert len(lines) == 11


def test_complete_contract_and_errors(tmp_path, workspace):
    cfg, ckpt, data = workspace["cfg"], workspace["ckpt"], workspace["data"]
    out = tmp_path / "comp"
    assert main(["complete", "--config", str(cfg), "--out", str(out),
                 "--checkpoint", str(ckpt), "--prefix-len", "2", "--repeats", "2", "--seed", "4"]) == 0
    out2 = tmp_path / "comp2"
    assert main(["complete", "--config", str(cfg), "--out", str(out2),
                 "--checkpoint", str(ckpt), "--prefix-len", "2", "--repeats", "2", "--seed", "4"]) == 0
    assert (out / "completions.csv").read_bytes() == (out2 / "completions.csv").read_bytes()
    ds = load_scanpath_dataset(out / "completions.csv")
    assert len(ds.scanpaths) == 6 * 2  # every ground-truth path, twice
    assert all(s.n == 4 for s in ds.scanpaths)
    truth = load_scanpath_dataset(data / "dataset.csv", images_dir=data)
    by_obs = {(s.image_id, s.observer_id.split("_c")[0]): s for s in truth.scanpaths}
    for s in ds.scanpaths:
        src = by_obs[(s.image_id, s.observer_id.split("_c")[0])]
        got = s.coords()[:2]
        want = src.coords()[:2]
        assert np.allclose(got, want, atol=1e-6)

    # prefix length N is a usage error
    assert main(["complete", "--config", str(cfg), "--out", str(tmp_path / "x"),
                 "--checkpoint", str(ckpt), "--prefix-len", "4"]) == 1


def test_saliency_single_fixation_matches_gaussian(tmp_path):
    cfg = write_cfg(tmp_path / "s.cfg", images_dir=str(tmp_path))
    write_pgm(tmp_path / "imgX.pgm", np.zeros((16, 16), dtype=np.uint8))
    csv = tmp_path / "one.csv"
    csv.write_text("image_id,observer_id,fix_index,x,y\nimgX,o,0,5.0,7.0\n")
    out = tmp_path / "sal"
    assert main(["saliency", "--config", str(cfg), "--out", str(out), "--scanpaths", str(csv)]) == 0
    img = read_pgm(out / "imgX.pgm")
    g = gaussian_map(GazePoint(5.0, 7.0), GridSpec(16, 16), 1.0).values
    expected = np.round(g / g.max() * 255.0).astype(np.uint8)
    assert np.array_equal(img, expected)
    assert img[7, 5] == 255


def test_saliency_two_fixations_two_equal_peaks(tmp_path):
    cfg = write_cfg(tmp_path / "s.cfg", images_dir=str(tmp_path))
    write_pgm(tmp_path / "imgY.pgm", np.zeros((16, 16), dtype=np.uint8))
    csv = tmp_path / "two.csv"
    csv.write_text(
        "image_id,observer_id,fix_index,x,y\nimgY,o,0,3.0,3.0\nimgY,o,1,12.0,12.0\n"
    )
    out = tmp_path / "sal"
    assert main(["saliency", "--config", str(cfg), "--out", str(out), "--scanpaths", str(csv)]) == 0
    img = read_pgm(out / "imgY.pgm")
    assert img[3, 3] == 255
    assert img[12, 12] == 255


def test_exit_codes(tmp_path, workspace):
    cfg = workspace["cfg"]
    # usage: missing required flag
    assert main(["predict", "--config", str(cfg)]) == 1
    # data: unknown config key
    bad = tmp_path / "bad.cfg"
    bad.write_text("grid_width=16\nbogus_key=1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    # data: nonexistent checkpoint
    assert main(["predict", "--config", str(cfg), "--out", str(tmp_path / "o2"),
                 "--checkpoint", str(tmp_path / "nope.spck"), "--count", "1"]) == 2
    # data: checkpoint/config mismatch
    other = write_cfg(tmp_path / "other.cfg", hidden_channels=5,
                      dataset_csv=str(workspace["data"] / "dataset.csv"),
                      images_dir=str(workspace["data"]))
    assert main(["predict", "--config", str(other), "--out", str(tmp_path / "o3"),
                 "--checkpoint", str(workspace["ckpt"]), "--count", "1"]) == 2


def test_th_sweep_flag(tmp_path, workspace):
    cfg, ckpt = workspace["cfg"], workspace["ckpt"]
    for th in ("0.7", "0.35"):
        out = tmp_path / f"th{th}"
        assert main(["predict", "--config", str(cfg), "--out", str(out),
                     "--checkpoint", str(ckpt), "--count", "2", "--seed", "5", "--th", th]) == 0
        echoed = (out / "config.txt").read_text()
        assert f"th={float(th)}" in echoed
