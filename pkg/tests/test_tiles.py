import numpy as np
import pytest
from hypothesis import given, strategies as st

from wikisat import synthetic
from wikisat.corpus import GeoCoordinate
from wikisat.tiles import (CoverageMiss, DatasetManifest, ImageTensor, ProviderError, SyntheticProvider,
                           build_dataset, fetch_tile, load_tensor, make_tile_request, resize, save_tensor)


def coords(n, seed=0):
    rng = np.random.default_rng(seed)
    return [synthetic.random_coord(rng) for _ in range(n)]


@pytest.mark.parametrize("gsd, px, side", [(0.3, 1000, 300.0), (0.5, 1000, 500.0)])
def test_footprint(gsd, px, side):
    req = make_tile_request(GeoCoordinate(0, 0), gsd, px)
    assert req.footprint_m == pytest.approx((side, side))


@pytest.mark.parametrize("gsd, px", [(0.3, 0), (0.0, 10), (-1, 10), (11, 10)])
def test_bad_requests(gsd, px):
    with pytest.raises(ValueError):
        make_tile_request(GeoCoordinate(0, 0), gsd, px)


def test_synthetic_is_deterministic():
    p = SyntheticProvider(seed=3, labels=["lake", "town"])
    req = make_tile_request(GeoCoordinate(10.5, 20.25), 0.3, 32, label="lake")
    a, b = fetch_tile(p, req), fetch_tile(SyntheticProvider(seed=3, labels=["lake", "town"]), req)
    assert a.data.tobytes() == b.data.tobytes()
    assert a.data.shape == (32, 32, 3)


def test_cloud_rate_close_to_configured():
    p = SyntheticProvider(seed=1, cloud_rate=0.05)
    frac = np.mean([p.is_cloudy(c) for c in coords(10_000)])
    assert 0.03 <= frac <= 0.08


def test_coverage_gaps_close_to_configured():
    p = SyntheticProvider(seed=1, gap_rate=0.1)
    misses = 0
    for c in coords(10_000, seed=5):
        try:
            p.fetch(make_tile_request(c, 0.3, 1))
        except CoverageMiss:
            misses += 1
    assert abs(misses / 10_000 - 0.1) < 0.015


def test_resize_examples():
    const = ImageTensor(np.full((1000, 1000, 3), 0.5, np.float32))
    out = resize(const, 224, 224)
    assert out.data.shape == (224, 224, 3) and np.allclose(out.data, 0.5)
    img = ImageTensor(np.array([[0, 1], [0, 1]], np.float32)[..., None])
    assert resize(img, 1, 2).data[..., 0].tolist() == [[0.0, 1.0]]
    assert np.array_equal(resize(img, 2, 2).data, img.data)


def test_resize_aligned_corners_midpoint():
    img = ImageTensor(np.array([[0.0, 1.0]], np.float32)[..., None])
    assert resize(img, 1, 3).data[0, :, 0].tolist() == pytest.approx([0.0, 0.5, 1.0])


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_tensor_round_trip(h, w, c_idx, seed):
    c = 1 if c_idx == 1 else 3
    data = np.random.default_rng(seed).random((h, w, c), dtype=np.float32)
    img = ImageTensor(data)
    back = ImageTensor.frombytes(img.tobytes())
    assert back.data.tobytes() == data.tobytes()


def test_tensor_file(tmp_path):
    img = ImageTensor(np.random.default_rng(0).random((4, 5, 3), dtype=np.float32))
    save_tensor(img, tmp_path / "x.wstn")
    raw = (tmp_path / "x.wstn").read_bytes()
    assert raw[:4] == b"WSTN" and len(raw) == 20 + 4 * 60
    assert np.array_equal(load_tensor(tmp_path / "x.wstn").data, img.data)


def test_image_validation():
    with pytest.raises(ValueError):
        ImageTensor(np.full((2, 2, 3), 1.5, np.float32))
    with pytest.raises(ValueError):
        ImageTensor(np.zeros((2, 2, 2), np.float32))
    with pytest.raises(ValueError):
        ImageTensor(np.zeros((2, 2, 3), np.float64))


def test_gray_tiles_promote_to_rgb():
    p = SyntheticProvider(seed=0, gray_rate=1.0)
    img = p.fetch(make_tile_request(GeoCoordinate(1, 1), 0.3, 8))
    assert img.channels == 1 and img.to_rgb().channels == 3


def test_provider_dimension_check():
    class Bad:
        name = "bad"

        def fetch(self, request):
            return ImageTensor(np.zeros((2, 2, 3), np.float32))

    with pytest.raises(ProviderError):
        fetch_tile(Bad(), make_tile_request(GeoCoordinate(0, 0), 0.3, 4))


def articles(n, label="town"):
    return [(f"a{i:03d}", c, label) for i, c in enumerate(coords(n, seed=11))]


def test_build_dataset_full_coverage(tmp_path):
    m = build_dataset(articles(50), SyntheticProvider(labels=["town"]), tmp_path, tile_px=8)
    assert len(m) == 50 and m.misses == []
    assert all(m.image(r).data.shape == (8, 8, 3) for r in m.rows)


def test_build_dataset_misses(tmp_path):
    items = articles(50)
    missing = [c for _, c, _ in items[:5]]
    m = build_dataset(items, SyntheticProvider(missing=missing), tmp_path, tile_px=8)
    assert len(m) == 45 and sorted(m.misses) == [a for a, _, _ in items[:5]]
    assert len(m) + len(m.misses) == len(items)


def test_build_dataset_rerun_identical(tmp_path):
    items = articles(20)
    first = build_dataset(items, SyntheticProvider(), tmp_path, tile_px=8).dumps()
    second = build_dataset(list(reversed(items)), SyntheticProvider(), tmp_path, tile_px=8, jobs=4).dumps()
    assert first == second
    path = tmp_path / "manifest.jsonl"
    path.write_text(first)
    assert DatasetManifest.read(path).dumps() == first


def test_label_consistency_of_synthetic_tiles():
    names = ["airport", "lake", "station", "stadium", "town"]
    p = SyntheticProvider(seed=42, labels=names)
    means = {n: np.array([p.fetch(make_tile_request(c, 0.3, 32, label=n)).data.mean(axis=(0, 1))
                          for c in coords(30, seed=i)]) for i, n in enumerate(names)}
    intra, inter = [], []
    for a in names:
        for b in names:
            d = np.linalg.norm(means[a][:, None] - means[b][None], axis=2)
            (intra if a == b else inter).append(d.mean())
    assert np.mean(intra) < np.mean(inter)
