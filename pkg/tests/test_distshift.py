import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oeshift import distshift as ds
from oeshift.models import CnnConfig, MlpConfig, build_cnn, build_mlp


# smoothing moves at most 256 * eps of mass off the occupied bins
SMOOTH_TOL = 1e-6


def const_image(value, side=4):
    return np.full((side, side, 3), value, dtype=np.uint8)


# --- histograms ----------------------------------------------------------------------


def test_constant_image_single_bin():
    h = ds.image_pixel_histogram(const_image(128))
    assert h.bins[128] == pytest.approx(1.0, abs=SMOOTH_TOL)
    assert h.bins.sum() == pytest.approx(1.0, abs=1e-12)
    assert h.bins.min() > 0


def test_two_single_pixel_images():
    h = ds.dataset_pixel_histogram([np.array([[[0]]], np.uint8), np.array([[[255]]], np.uint8)])
    assert h.bins[0] == pytest.approx(0.5, abs=SMOOTH_TOL)
    assert h.bins[255] == pytest.approx(0.5, abs=SMOOTH_TOL)
    assert h.count == 2


def test_checkerboard():
    img = np.zeros((8, 8, 3), np.uint8)
    img[::2, ::2] = 255
    img[1::2, 1::2] = 255
    h = ds.image_pixel_histogram(img)
    assert h.bins[0] == pytest.approx(0.5, abs=SMOOTH_TOL) and h.bins[255] == pytest.approx(0.5, abs=SMOOTH_TOL)


def test_rgb_32_pixel_count():
    assert ds.image_pixel_histogram(np.zeros((32, 32, 3), np.uint8)).count == 3072


def test_uniform_dataset_mean_intensity():
    rng = np.random.default_rng(0)
    images = [rng.integers(0, 256, size=(100, 100), dtype=np.uint8) for _ in range(100)]  # 10^6 pixels
    h = ds.dataset_pixel_histogram(images)
    assert h.count == 1_000_000
    assert abs(h.mean_intensity() - 127.5) <= 1.0


def test_empty_dataset_errors():
    with pytest.raises(ds.DistShiftError):
        ds.dataset_pixel_histogram([])


def test_normalized_tensor_maps_back_to_intensities():
    np.testing.assert_array_equal(ds.to_intensities(np.array([-1.0, 0.0, 1.0])), [0, 128, 255])
    with pytest.raises(ds.DistShiftError):
        ds.to_intensities(np.array([3.0]))


# --- KL ------------------------------------------------------------------------------


def test_kl_identity_and_hand_value():
    p = np.array([0.5, 0.5])
    assert ds.kl_divergence(p, p) == 0.0
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert ds.kl_divergence(p, [0.25, 0.75]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.143841, abs=1e-6)


def test_kl_asymmetric():
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    assert ds.kl_divergence(p, q) != ds.kl_divergence(q, p)
    assert ds.kl_divergence(q, p) > 0


def test_kl_zero_mass_bins_ignored():
    assert ds.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))


def test_kl_bin_mismatch():
    with pytest.raises(ds.DistShiftError, match="bin counts"):
        ds.kl_divergence(np.ones(3) / 3, np.ones(4) / 4)


def _hist(values):
    v = np.asarray(values) + 1e-8
    return v / v.sum()


@given(arrays(np.float64, 256, elements=st.floats(0, 1000)), arrays(np.float64, 256, elements=st.floats(0, 1000)))
@settings(max_examples=100, deadline=None)
def test_kl_gibbs(a, b):
    p, q = _hist(a), _hist(b)
    assert ds.kl_divergence(p, p) <= 1e-12
    assert ds.kl_divergence(p, q) >= 0


# --- ranking ---------------------------------------------------------------------------


def test_identical_images_keep_identifier_order():
    images = {f"img{i}": const_image(90) for i in (3, 1, 2)}
    table = ds.rank_outliers(images, ds.dataset_pixel_histogram(images.values()))
    assert table.identifiers == ["img1", "img2", "img3"]
    assert len(set(table.scores)) == 1


def test_dark_image_ranks_first():
    rng = np.random.default_rng(1)
    images = {f"g{i}": rng.integers(110, 146, size=(8, 8, 3), dtype=np.uint8) for i in range(6)}
    images["black"] = const_image(0, 8)
    reference = ds.dataset_pixel_histogram([const_image(128, 8)])
    table = ds.rank_outliers(images, reference)
    assert table.identifiers[0] == "black"
    brute = {k: ds.kl_divergence(ds.image_pixel_histogram(v), reference) for k, v in images.items()}
    assert max(brute, key=brute.get) == "black"


def test_ranking_deterministic():
    rng = np.random.default_rng(2)
    images = {f"x{i}": rng.integers(0, 256, size=(6, 6, 3), dtype=np.uint8) for i in range(20)}
    ref = ds.dataset_pixel_histogram(images.values())
    assert ds.rank_outliers(images, ref).entries == ds.rank_outliers(images, ref).entries


def test_smoothing_halved_keeps_order():
    rng = np.random.default_rng(3)
    images = {
        f"s{i:02d}": np.clip(rng.normal(rng.uniform(40, 200), 25, size=(16, 16, 3)), 0, 255).astype(np.uint8)
        for i in range(40)
    }
    eps = ds.DEFAULT_EPSILON
    t1 = ds.rank_outliers(images, ds.dataset_pixel_histogram(images.values(), eps=eps))
    t2 = ds.rank_outliers(images, ds.dataset_pixel_histogram(images.values(), eps=eps / 2))
    assert t1.identifiers == t2.identifiers


@pytest.mark.parametrize("n, fraction, expected", [(10, 0.2, 2), (7, 0.2, 2), (5, 1.0, 5), (1, 0.01, 1), (50, 0.2, 10)])
def test_select_top_fraction_sizes(n, fraction, expected):
    table = ds.OutlierScoreTable([(f"i{k:02d}", float(n - k)) for k in range(n)])
    chosen = ds.select_top_fraction(table, fraction)
    assert len(chosen) == expected
    assert chosen == table.identifiers[:expected]


@pytest.mark.parametrize("fraction", [0.0, -0.1, 1.01])
def test_select_top_fraction_invalid(fraction):
    with pytest.raises(ds.DistShiftError):
        ds.select_top_fraction(ds.OutlierScoreTable([("a", 1.0)]), fraction)


def test_manifest_round_trip(tmp_path):
    table = ds.OutlierScoreTable([("a.png", 0.123456789012345), ("b.png", 0.01)], "utk:own")
    path = tmp_path / "m.tsv"
    ds.write_manifest(path, table, ["a.png"], 0.2)
    lines = path.read_text().splitlines()
    assert lines[0] == "# reference=utk:own\tfraction=0.2"
    assert lines[1] == "a.png\t0.123456789012"
    assert ds.read_manifest(path) == [("a.png", 0.123456789012)]


# --- activation histograms ---------------------------------------------------------------


def test_activation_range_tanh():
    model = build_cnn(CnnConfig(conv1_out=4, conv2_out=4, fc_hidden=8), seed=0)
    data = np.random.default_rng(0).uniform(-1, 1, size=(5, 3, 32, 32))
    h = ds.activation_histogram(model, data, "act2", bin_count=32)
    assert -1 <= h.value_range[0] <= h.value_range[1] <= 1
    assert h.bins.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(h.edges) > 0)


def test_zero_model_spike():
    model = build_mlp(MlpConfig(hidden_width=4), seed=0)
    for p in model.params.values():
        p.data[...] = 0.0
    h = ds.activation_histogram(model, np.ones((3, 2)), "act1", bin_count=256)
    assert h.bins.max() == pytest.approx(1.0, abs=1e-6)
    centre = np.searchsorted(h.edges, 0.0, side="right") - 1
    assert np.argmax(h.bins) == centre


def test_shared_edges_make_kl_defined():
    model = build_cnn(CnnConfig(conv1_out=4, conv2_out=4, fc_hidden=8), seed=1)
    rng = np.random.default_rng(1)
    a = rng.uniform(-1, 0, size=(3, 3, 32, 32))
    b = rng.uniform(0, 1, size=(3, 3, 32, 32))
    ha, hb = ds.activation_histograms(model, a, b, "act1")
    np.testing.assert_array_equal(ha.edges, hb.edges)
    assert len(ha.bins) == 256
    assert ds.kl_divergence(ha, hb) > 0


def test_activation_unknown_layer():
    model = build_mlp(MlpConfig(), seed=0)
    with pytest.raises(ds.DistShiftError, match="valid layers"):
        ds.activation_histogram(model, np.zeros((1, 2)), "nope")
