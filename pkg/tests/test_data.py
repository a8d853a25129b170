import numpy as np
import pytest
from PIL import Image

from oeshift import data as dd
from oeshift.data import DataError, LabelSchema


# --- synthetic generators ---------------------------------------------------------------


@pytest.mark.parametrize("point, label", [((0, 0), 1), ((2, 0), 1), ((1.5, 1.5), 0), ((0, -2.0001), 0)])
def test_disk_label(point, label):
    assert dd.disk_label(np.array([point], dtype=float))[0] == label


def test_disk_square_bounds_and_labels():
    ds = dd.gen_disk_square(500, seed=3)
    x = ds.inputs
    assert x.shape == (500, 2)
    assert np.abs(x).max() <= 1.5
    brute = [1 if a * a + b * b <= 4 else 0 for a, b in x]
    assert ds.labels.tolist() == brute


def test_disk_square_seeded():
    a, b = dd.gen_disk_square(20, seed=1), dd.gen_disk_square(20, seed=1)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert dd.gen_disk_square(20, seed=2).inputs.tobytes() != a.inputs.tobytes()


def test_disk_square_rejects_zero_count():
    with pytest.raises(DataError):
        dd.gen_disk_square(0, seed=0)


def test_mesh_three_per_axis_has_corners():
    pts = dd.gen_mesh_grid((-6, 6), 3).inputs
    assert len(pts) == 9
    corners = {(-6.0, -6.0), (-6.0, 6.0), (6.0, -6.0), (6.0, 6.0)}
    assert corners <= {tuple(p) for p in pts}


def test_mesh_default_spacing():
    grid = dd.gen_mesh_grid((-6, 6), 101)
    pts = grid.inputs
    assert len(pts) == 10201
    axis = np.unique(pts[:, 0])
    np.testing.assert_allclose(np.diff(axis), 0.12, atol=1e-12)
    outside = (pts**2).sum(axis=1) > 4
    assert not grid.labels[outside].any()


@pytest.mark.parametrize("bounds, n", [((1, 1), 5), ((2, -2), 5), ((-1, 1), 1)])
def test_mesh_invalid(bounds, n):
    with pytest.raises(DataError):
        dd.gen_mesh_grid(bounds, n)


def test_zero_variance_gaussian():
    ds = dd.gen_gaussian(10, seed=0, mean=(0, 0), cov=0.0)
    assert np.all(ds.inputs == 0.0)
    assert ds.labels.tolist() == [1] * 10


def test_far_gaussian_all_zero():
    ds = dd.gen_gaussian(50, seed=1, mean=(10, 10), cov=1e-4)
    assert not ds.labels.any()


def test_degenerate_mixture_matches_gaussian():
    single = dd.gen_gaussian(40, seed=7, mean=(1.0, -2.0), cov=[[1.0, 0.3], [0.3, 0.5]])
    mix = dd.gen_gaussian_mixture(
        40, seed=7, means=((1.0, -2.0), (9.0, 9.0)), covs=([[1.0, 0.3], [0.3, 0.5]], 1.0), weights=(1.0, 0.0)
    )
    np.testing.assert_array_equal(mix.inputs, single.inputs)


@pytest.mark.parametrize("cov", [[[1.0, 2.0], [0.0, 1.0]], [[-1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0, 0.0]]])
def test_invalid_covariance(cov):
    with pytest.raises(DataError):
        dd.gen_gaussian(5, seed=0, cov=cov)


def test_mixture_weights_must_sum_to_one():
    with pytest.raises(DataError):
        dd.gen_gaussian_mixture(5, seed=0, weights=(0.5, 0.6))


def test_annulus_rule():
    pts = np.array([[0.0, 0.0], [1.5, 0.0], [2.0, 0.0], [3.0, 0.0]])
    np.testing.assert_array_equal(dd.annulus_label(pts), [0, 1, 1, 0])
    ds = dd.gen_gaussian(200, seed=0, rule="annulus")
    r2 = (ds.inputs**2).sum(axis=1)
    np.testing.assert_array_equal(ds.labels, ((r2 >= 2) & (r2 <= 5)).astype(int))


# --- labels ---------------------------------------------------------------------------


def test_filename_labels():
    name = "25_0_1_20170116.jpg"
    assert LabelSchema("gender").from_filename(name) == 0
    assert LabelSchema("race").from_filename(name) == 1
    assert LabelSchema("race").class_names[1] == "Black"
    assert LabelSchema("age").from_filename(name) == dd.AGE_BINS.index("20-29")


@pytest.mark.parametrize("name", ["badname.jpg", "25_2_1_x.jpg", "25_0_7_x.png", "25_0_1_x.gif"])
def test_filename_rejects(name):
    with pytest.raises(DataError):
        LabelSchema().from_filename(name)


@pytest.mark.parametrize(
    "label, expected",
    [
        ("Middle Eastern", "White"),
        ("East Asian", "Asian"),
        ("Southeast Asian", "Asian"),
        ("Black", "Black"),
        ("White", "White"),
        ("Indian", "Indian"),
        ("Latino_Hispanic", "Other"),
    ],
)
def test_harmonize_race(label, expected):
    assert dd.harmonize_race(label) == expected


def test_harmonize_race_idempotent_on_image():
    for race in dd.RACE_CLASSES:
        assert dd.harmonize_race(dd.harmonize_race(race)) == dd.harmonize_race(race)


def test_harmonize_unknown():
    with pytest.raises(DataError, match="Martian"):
        dd.harmonize_race("Martian")


# --- rasters and preprocessing --------------------------------------------------------


def test_preprocess_extremes():
    black = dd.preprocess(np.zeros((32, 32, 3), np.uint8))
    white = dd.preprocess(np.full((32, 32, 3), 255, np.uint8))
    assert black.shape == (3, 32, 32)
    assert np.all(black == -1.0) and np.all(white == 1.0)


def test_preprocess_no_resample_at_32():
    img = np.random.default_rng(0).integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    out = dd.preprocess(img)
    np.testing.assert_allclose(out, (img.transpose(2, 0, 1) / 255.0 - 0.5) / 0.5, atol=1e-15)


def test_preprocess_resizes_constant_exactly():
    out = dd.preprocess(np.full((50, 70, 3), 51, np.uint8))
    assert out.shape == (3, 32, 32)
    np.testing.assert_allclose(out, (51 / 255 - 0.5) / 0.5, atol=1e-12)


def test_preprocess_downsample_by_two_averages_pairs():
    img = np.zeros((64, 64, 3), np.uint8)
    img[:, 1::2] = 200
    out = dd.preprocess(img)
    np.testing.assert_allclose(out, (100 / 255 - 0.5) / 0.5, atol=1e-12)


@pytest.mark.parametrize("shape", [(32, 32), (32, 32, 4), (0, 5, 3)])
def test_preprocess_rejects_non_rgb(shape):
    with pytest.raises(DataError):
        dd.preprocess(np.zeros(shape, np.uint8))


def test_raw_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    dd.write_raw(tmp_path / "a.raw", img)
    buf = (tmp_path / "a.raw").read_bytes()
    assert buf[:8] == (7).to_bytes(4, "little") + (5).to_bytes(4, "little")
    np.testing.assert_array_equal(dd.read_raster(tmp_path / "a.raw"), img)


def test_raw_truncated(tmp_path):
    dd.write_raw(tmp_path / "a.raw", np.zeros((4, 4, 3), np.uint8))
    p = tmp_path / "a.raw"
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(DataError, match="expected 48"):
        dd.read_raster(p)


def test_png_matches_raw(tmp_path):
    img = np.random.default_rng(2).integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "x.png")
    dd.write_raw(tmp_path / "x.raw", img)
    np.testing.assert_array_equal(dd.read_raster(tmp_path / "x.png"), dd.read_raster(tmp_path / "x.raw"))


# --- directory and CSV ingestion ------------------------------------------------------


def _img(path, value=0):
    Image.fromarray(np.full((8, 8, 3), value, np.uint8)).save(path)


def test_load_image_dir_with_skips(tmp_path):
    _img(tmp_path / "25_0_1_20170116.png")
    _img(tmp_path / "30_1_2_20170117.png", 255)
    _img(tmp_path / "badname.png")
    (tmp_path / "40_1_0_broken.png").write_bytes(b"not an image")
    ds = dd.load_image_dir(tmp_path)
    assert [s.identifier for s in ds] == ["25_0_1_20170116.png", "30_1_2_20170117.png"]
    assert ds.labels.tolist() == [0, 1]
    assert ds.inputs.shape == (2, 3, 32, 32)
    assert {name for name, _ in ds.skipped} == {"badname.png", "40_1_0_broken.png"}
    ds.write_skip_report(tmp_path / "skip.txt")
    lines = (tmp_path / "skip.txt").read_text().splitlines()
    assert all(line.count("\t") == 1 for line in lines) and len(lines) == 2


def test_load_image_dir_raw_race(tmp_path):
    dd.write_raw(tmp_path / "25_0_3_a.raw", np.zeros((32, 32, 3), np.uint8))
    ds = dd.load_image_dir(tmp_path, LabelSchema("race"))
    assert ds.labels.tolist() == [3]


def test_load_image_dir_empty(tmp_path):
    _img(tmp_path / "badname.png")
    with pytest.raises(DataError):
        dd.load_image_dir(tmp_path)


def test_load_image_dir_unlabeled(tmp_path):
    _img(tmp_path / "whatever.png")
    ds = dd.load_image_dir(tmp_path, role="outlier_exposure", labeled=False)
    assert ds[0].label is None and ds[0].role == "outlier_exposure"
    assert not ds.has_labels()


def _csv(path, rows):
    path.write_text("file,age,gender,race\n" + "".join(r + "\n" for r in rows), encoding="utf-8")
    return path


def test_csv_labels(tmp_path):
    _img(tmp_path / "img1.png")
    csv_path = _csv(tmp_path / "labels.csv", ["img1.png,20-29,Female,East Asian", "gone.png,3-9,Male,White"])
    ds = dd.load_csv_labels(tmp_path, csv_path)
    assert ds.labels.tolist() == [1]
    assert ds.skipped == [("gone.png", "missing file")]
    race = dd.load_csv_labels(tmp_path, csv_path, LabelSchema("race"))
    assert race.labels.tolist() == [dd.RACE_CLASSES.index("Asian")]


def test_csv_duplicate_row(tmp_path):
    _img(tmp_path / "a.png")
    csv_path = _csv(tmp_path / "l.csv", ["a.png,20-29,Male,White", "a.png,20-29,Female,White"])
    with pytest.raises(DataError, match="line 3"):
        dd.load_csv_labels(tmp_path, csv_path)


def test_csv_malformed_row(tmp_path):
    _img(tmp_path / "a.png")
    csv_path = _csv(tmp_path / "l.csv", ["a.png,20-29,Male"])
    with pytest.raises(DataError, match="line 2"):
        dd.load_csv_labels(tmp_path, csv_path)


def test_csv_bad_header(tmp_path):
    (tmp_path / "l.csv").write_text("name,gender\n")
    with pytest.raises(DataError, match="line 1"):
        dd.load_csv_labels(tmp_path, tmp_path / "l.csv")


# --- batching ---------------------------------------------------------------------------


def test_batch_sizes():
    sizes = [len(b) for b in dd.batches(range(33), 16, seed=0, epoch=0)]
    assert sizes == [16, 16, 1]


def test_batches_deterministic_and_epoch_keyed():
    a = dd.batches(range(40), 16, seed=5, epoch=2)
    assert a == dd.batches(range(40), 16, seed=5, epoch=2)
    assert a != dd.batches(range(40), 16, seed=5, epoch=3)


@pytest.mark.parametrize("n, size", [(1, 1), (17, 4), (64, 16), (5, 10)])
def test_every_sample_once(n, size):
    flat = [i for b in dd.batches(range(n), size, seed=1, epoch=0) for i in b]
    assert sorted(flat) == list(range(n))


def test_batch_size_zero():
    with pytest.raises(DataError):
        dd.batches(range(3), 0, seed=0, epoch=0)
