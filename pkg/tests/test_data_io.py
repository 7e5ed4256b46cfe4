import struct

import numpy as np
import pytest

from scanpath.core import GazePoint, GridSpec, Scanpath
from scanpath.data_io import (
    Checkpoint,
    Dataset,
    ImageRecord,
    load_scanpath_dataset,
    preprocess,
    read_checkpoint,
    read_feature_tensor,
    read_pgm,
    save_scanpath_csv,
    synth_dataset,
    write_checkpoint,
    write_feature_tensor,
    write_pgm,
)
from scanpath.errors import DataError, FormatError


def test_csv_empty_with_header(tmp_path):
    f = tmp_path / "empty.csv"
    f.write_text("image_id,observer_id,fix_index,x,y\n")
    ds = load_scanpath_dataset(f)
    assert ds.scanpaths == []
    assert ds.images == []


def test_csv_single_row(tmp_path):
    f = tmp_path / "one.csv"
    f.write_text("image_id,observer_id,fix_index,x,y\nimg0,obs0,0,3.5,7.25\n")
    ds = load_scanpath_dataset(f)
    assert len(ds.scanpaths) == 1
    s = ds.scanpaths[0]
    assert s.n == 1
    assert (s.points[0].x, s.points[0].y) == (3.5, 7.25)
    assert ds.images[0].width == 4 and ds.images[0].height == 8


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    paths = []
    for i in range(3):
        for o in range(2):
            pts = tuple(
                GazePoint(float(rng.uniform(0, 64)), float(rng.uniform(0, 48)), k)
                for k in range(int(rng.integers(1, 9)))
            )
            paths.append(Scanpath(pts, f"img{i}", f"obs{o}"))
    f = tmp_path / "ds.csv"
    save_scanpath_csv(paths, f)
    ds = load_scanpath_dataset(f)
    assert len(ds.scanpaths) == len(paths)
    for a, b in zip(paths, ds.scanpaths):
        assert a.image_id == b.image_id and a.observer_id == b.observer_id
        assert np.array_equal(a.coords(), b.coords())
    # writing the parsed dataset again reproduces the same bytes
    f2 = tmp_path / "ds2.csv"
    save_scanpath_csv(ds.scanpaths, f2)
    assert f.read_bytes() == f2.read_bytes()


def test_csv_malformed_rows(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("image_id,observer_id,fix_index,x,y\nimg,obs,0,1.0\n")
    with pytest.raises(FormatError, match=":2:"):
        load_scanpath_dataset(f)

    f.write_text("image_id,observer_id,fix_index,x,y\nimg,obs,0,1.0,2.0\nimg,obs,2,1.0,2.0\n")
    with pytest.raises(FormatError, match=":3:"):
        load_scanpath_dataset(f)

    f.write_text("image_id,observer_id,fix_index,x,y\nimg,obs,1,1.0,2.0\n")
    with pytest.raises(FormatError):
        load_scanpath_dataset(f)

    f.write_text("wrong,header\n")
    with pytest.raises(FormatError):
        load_scanpath_dataset(f)


def test_csv_unknown_image_id(tmp_path):
    f = tmp_path / "ds.csv"
    f.write_text("image_id,observer_id,fix_index,x,y\nmissing,obs,0,1.0,2.0\n")
    with pytest.raises(DataError, match="missing"):
        load_scanpath_dataset(f, images_dir=tmp_path)


def make_dataset(lengths, width=64, height=48):
    paths = []
    rng = np.random.default_rng(1)
    for i, n in enumerate(lengths):
        pts = tuple(
            GazePoint(float(rng.uniform(0, width)), float(rng.uniform(0, height)), k)
            for k in range(n)
        )
        paths.append(Scanpath(pts, "img0", f"obs{i}"))
    return Dataset(images=[ImageRecord("img0", width, height, None)], scanpaths=paths)


def test_preprocess_filters_truncates_pads():
    grid = GridSpec(32, 32)
    ds = make_dataset([3, 12, 5])
    prepared = preprocess(ds, grid, n_fix=8, sigma=2.0)
    assert len(prepared) == 1
    ex = prepared[0]
    # the length-3 scanpath is discarded
    assert len(ex.scanpaths) == 2
    for s in ex.scanpaths:
        assert s.n == 8
        for p in s.points:
            assert 0 <= p.x < 32 and 0 <= p.y < 32
    # the length-5 path got its last fixation repeated 3 times
    padded = ex.scanpaths[1]
    assert padded.points[4].x == padded.points[5].x == padded.points[7].x
    assert [p.index for p in padded.points] == list(range(8))
    # the length-12 path keeps its first 8 fixations (rescaled)
    src = ds.scanpaths[1]
    kept = ex.scanpaths[0]
    assert np.allclose(kept.coords(), src.coords()[:8] * np.array([32 / 64, 32 / 48]), atol=1e-9)
    assert len(ex.spatialized) == 2
    assert ex.spatialized[0].n == 8


def test_preprocess_excludes_empty_images():
    grid = GridSpec(32, 32)
    ds = make_dataset([2, 3])
    with pytest.warns(UserWarning):
        prepared = preprocess(ds, grid, n_fix=8, sigma=2.0)
    assert prepared == []


def test_synth_single_roi_zero_noise():
    grid = GridSpec(32, 32)
    ds = synth_dataset(1, 3, 1, grid, np.random.default_rng(2), noise_frac=0.0)
    assert len(ds.scanpaths) == 3
    for s in ds.scanpaths:
        assert s.n == 8
        first = s.points[0]
        assert (first.x, first.y) == grid.center
        tail = {(p.x, p.y) for p in s.points[1:]}
        assert len(tail) == 1  # every later fixation sits exactly on the ROI center


def test_synth_reproducible():
    grid = GridSpec(32, 32)
    a = synth_dataset(2, 3, 2, grid, np.random.default_rng(7))
    b = synth_dataset(2, 3, 2, grid, np.random.default_rng(7))
    assert len(a.scanpaths) == len(b.scanpaths)
    for s, t in zip(a.scanpaths, b.scanpaths):
        assert np.array_equal(s.coords(), t.coords())
    for ia, ib in zip(a.images, b.images):
        assert np.array_equal(ia.pixels, ib.pixels)


def test_synth_center_start_and_spread_trend():
    grid = GridSpec(32, 32)
    ds = synth_dataset(10, 15, 2, grid, np.random.default_rng(5))
    assert len(ds.scanpaths) == 150
    by_img = ds.paths_by_image()
    step0 = np.array([s.coords()[0] for paths in by_img.values() for s in paths])
    cx, cy = grid.center
    assert abs(step0[:, 0].mean() - cx) < 2.0
    assert abs(step0[:, 1].mean() - cy) < 2.0

    spreads = np.zeros(8)
    for paths in by_img.values():
        arr = np.stack([s.coords() for s in paths])
        spreads += np.sqrt(arr[:, :, 0].var(axis=0) + arr[:, :, 1].var(axis=0))
    spreads /= len(by_img)
    assert all(spreads[0] < spreads[i] for i in range(1, 8))
    assert np.polyfit(np.arange(8), spreads, 1)[0] > 0


def test_feature_tensor_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    arr = rng.standard_normal((16, 32, 32))
    f = tmp_path / "t.ftns"
    write_feature_tensor(f, arr)
    back = read_feature_tensor(f)
    assert back.dtype == np.float64
    assert np.array_equal(back, arr)
    # byte-identical re-serialization
    f2 = tmp_path / "t2.ftns"
    write_feature_tensor(f2, back)
    assert f.read_bytes() == f2.read_bytes()


def test_feature_tensor_format_errors(tmp_path):
    f = tmp_path / "bad.ftns"
    f.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError, match="magic"):
        read_feature_tensor(f)

    f.write_bytes(b"FTNS" + struct.pack("<I", 0))
    with pytest.raises(FormatError, match="zero-dimensional"):
        read_feature_tensor(f)

    f.write_bytes(b"FTNS" + struct.pack("<II", 1, 4) + b"\x00" * 8)  # 4 values promised, 1 given
    with pytest.raises(FormatError, match="payload"):
        read_feature_tensor(f)


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, size=(12, 9), dtype=np.uint8)
    f = tmp_path / "img.pgm"
    write_pgm(f, img)
    assert np.array_equal(read_pgm(f), img)
    f.write_bytes(b"P6 1 1 255 xxx")
    with pytest.raises(FormatError):
        read_pgm(f)


def test_checkpoint_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(5)
    ckpt = Checkpoint(
        tensors={"a.mu": rng.standard_normal((2, 3)), "b": rng.standard_normal(4), "c0": np.asarray(1.5)},
        hyper={"layers": "2", "hidden_channels": "16", "step": "12"},
    )
    f = tmp_path / "m.spck"
    write_checkpoint(f, ckpt)
    back = read_checkpoint(f)
    assert list(back.tensors) == ["a.mu", "b", "c0"]
    for k in ckpt.tensors:
        assert np.array_equal(back.tensors[k], np.asarray(ckpt.tensors[k], dtype=np.float64))
    assert back.hyper == ckpt.hyper
    f2 = tmp_path / "m2.spck"
    write_checkpoint(f2, back)
    assert f.read_bytes() == f2.read_bytes()


def test_checkpoint_format_errors(tmp_path):
    f = tmp_path / "bad.spck"
    f.write_bytes(b"XXXX")
    with pytest.raises(FormatError):
        read_checkpoint(f)

    f.write_bytes(b"SPCK" + struct.pack("<I", 99) + struct.pack("<I", 0) + struct.pack("<I", 0))
    with pytest.raises(FormatError, match="version"):
        read_checkpoint(f)

    ckpt = Checkpoint(tensors={"x": np.ones(3)}, hyper={"k": "v"})
    good = tmp_path / "good.spck"
    write_checkpoint(good, ckpt)
    data = good.read_bytes()
    f.write_bytes(data[: len(data) // 2])
    with pytest.raises(FormatError, match="truncated"):
        read_checkpoint(f)
