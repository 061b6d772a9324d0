import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2_contingency

from mccan.data import (
    BACKGROUND_ROI,
    BatchStream,
    DataError,
    ImageRecord,
    PhantomConfig,
    Roi,
    batch_stream,
    extract_noise,
    from_unit,
    load_dataset,
    make_phantom_dataset,
    random_crop,
    save_dataset,
    synthesize_intermediate,
    to_unit,
)
from mccan.imfile import ImageFileError, read_image, read_raw, write_image, write_png16, write_raw


def rec(pixels, domain=0, sid="a"):
    return ImageRecord(np.asarray(pixels, dtype=np.float64), domain, sid)


# synthesize_intermediate / extract_noise

def test_synthesize_plugin_value():
    out = synthesize_intermediate(rec(np.full((4, 4), 100.0)), np.full((4, 4), 2.0), 0.5, domain=1)
    assert np.all(out.pixels == 101.0) and out.domain == 1


def test_synthesize_zero_weight_and_shape_error(rng):
    clean = rec(rng.normal(1000, 50, (8, 8)))
    assert np.array_equal(synthesize_intermediate(clean, rng.normal(size=(8, 8)), 0.0).pixels, clean.pixels)
    with pytest.raises(DataError):
        synthesize_intermediate(clean, np.zeros((4, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_half_weight_is_midpoint(seed):
    r = np.random.default_rng(seed)
    c = r.integers(0, 2048, (6, 6)).astype(float)
    n = r.integers(-200, 200, (6, 6)).astype(float)
    out = synthesize_intermediate(rec(c), n, 0.5).pixels
    assert np.array_equal(out, (c + (c + n)) / 2)


def test_extract_noise_cases(rng):
    noisy = rec(rng.normal(1000, 30, (16, 16)))
    assert np.all(extract_noise(noisy, "residual", noisy) == 0)
    assert np.allclose(extract_noise(rec(np.full((16, 16), 777.0)), "highpass"), 0, atol=1e-9)
    with pytest.raises(DataError):
        extract_noise(noisy, "residual")
    with pytest.raises(DataError):
        extract_noise(noisy, "wavelet")


def test_residual_recovers_known_field(rng):
    clean = np.full((32, 32), 1024.0)
    clean[8:20, 8:20] = 1500
    field = rng.normal(0, 40, clean.shape)
    field -= field.mean()  # the extractor returns zero-mean fields
    got = extract_noise(rec(clean + field), "residual", rec(clean))
    assert np.allclose(got, field, atol=1e-9)
    assert abs(got.mean()) < 1e-6


def test_highpass_is_zero_mean(rng):
    f = extract_noise(rec(rng.normal(1000, 30, (32, 32))), "highpass")
    assert abs(f.mean()) < 1e-6 and f.shape == (32, 32)


# random_crop

def test_crop_shapes_and_offsets():
    img = rec(np.arange(512 * 512, dtype=float).reshape(512, 512))
    r = np.random.default_rng(0)
    for _ in range(50):
        c = random_crop(img, 256, r).pixels
        y, x = divmod(int(c[0, 0]), 512)
        assert c.shape == (256, 256) and 0 <= x <= 256 and 0 <= y <= 256
        assert np.array_equal(c, img.pixels[y : y + 256, x : x + 256])


def test_crop_identity_determinism_and_error():
    img = rec(np.random.default_rng(1).normal(size=(32, 32)))
    assert np.array_equal(random_crop(img, 32, np.random.default_rng(0)).pixels, img.pixels)
    a = random_crop(img, 8, np.random.default_rng(5)).pixels
    b = random_crop(img, 8, np.random.default_rng(5)).pixels
    assert np.array_equal(a, b)
    with pytest.raises(DataError):
        random_crop(img, 33, np.random.default_rng(0))


def test_records_are_immutable():
    src = np.zeros((4, 4))
    r = rec(src)
    src[0, 0] = 5
    assert r.pixels[0, 0] == 0
    with pytest.raises(ValueError):
        r.pixels[0, 0] = 1
    synthesize_intermediate(r, np.ones((4, 4)))
    random_crop(r, 2, np.random.default_rng(0))
    assert np.all(r.pixels == 0)


def test_record_validation():
    with pytest.raises(DataError):
        rec(np.zeros((4, 5)))
    with pytest.raises(DataError):
        rec(np.full((4, 4), np.nan))


# phantoms

def test_phantom_sigmas_measured_in_background():
    ds = make_phantom_dataset(PhantomConfig(n_images=4, side=128, seed=3))
    for d, sigma in enumerate((50, 25, 0)):
        for r in ds.domain_records(d):
            bg = next(x for x in ds.rois[r.source_id] if x.roi_id == BACKGROUND_ROI)
            assert bg.width * bg.height >= 32 * 32
            sd = bg.window(r.pixels).std()
            if sigma == 0:
                assert sd == 0
            else:
                assert abs(sd - sigma) <= 0.1 * sigma


def test_phantom_rois_are_homogeneous_ellipse_interiors():
    ds = make_phantom_dataset(PhantomConfig(n_images=6, side=64, seed=1))
    for r in ds.records:
        ref = ds.references[r.source_id]
        rois = ds.rois[r.source_id]
        assert 4 <= len(rois) <= 9  # background plus 3-8 ellipses
        values = []
        for roi in rois:
            win = roi.window(ref)
            assert win.min() == win.max()
            values.append(win[0, 0])
        assert values[0] == 1024 and len(set(values)) == len(values)
        assert all(700 <= v <= 1900 for v in values[1:])


def test_phantom_empty_and_deterministic():
    assert make_phantom_dataset(PhantomConfig(n_images=0)).records == []
    a = make_phantom_dataset(PhantomConfig(n_images=3, side=32, seed=9))
    b = make_phantom_dataset(PhantomConfig(n_images=3, side=32, seed=9))
    c = make_phantom_dataset(PhantomConfig(n_images=3, side=32, seed=10))
    assert all(np.array_equal(x.pixels, y.pixels) and x.source_id == y.source_id for x, y in zip(a.records, b.records))
    assert a.rois == b.rois
    assert not np.array_equal(a.records[0].pixels, c.records[0].pixels)


def test_phantom_domains_unpaired():
    ds = make_phantom_dataset(PhantomConfig(n_images=2, side=32, seed=4))
    x0, y0 = ds.references["X_00000"], ds.references["Y_00000"]
    assert not np.array_equal(x0, y0)


@pytest.mark.parametrize("sigmas", [(25, 50, 0), (50, 50, 0), (50,), (50, 25, -1)])
def test_phantom_sigma_validation(sigmas):
    with pytest.raises(DataError):
        PhantomConfig(n_images=1, noise_sigmas=sigmas)


def test_injected_intermediate_uses_head_noise():
    cfg = PhantomConfig(n_images=2, side=32, seed=2, intermediate="injected")
    ds = make_phantom_dataset(cfg)
    for i in range(2):
        x, z = ds.record(f"X_{i:05d}"), ds.record(f"Z_{i:05d}")
        noise_x = extract_noise(x, "residual", rec(ds.references[x.source_id]))
        expect = np.clip(np.rint(ds.references[z.source_id] + 0.5 * noise_x), 0, 65535)
        assert np.array_equal(z.pixels, expect)
        assert ds.extractor[z.source_id] == "residual"


def test_intensity_map_roundtrip():
    u = np.arange(0, 2049, dtype=np.float64)
    v = to_unit(u)
    assert v[0] == -1 and v[-1] == 1 and v[1024] == 0
    assert np.array_equal(from_unit(v), u)


# persistence

def test_dataset_roundtrip(tmp_path):
    ds = make_phantom_dataset(PhantomConfig(n_images=2, side=32, seed=5))
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.domain_names == ds.domain_names
    for a, b in zip(ds.records, back.records):
        assert np.array_equal(a.pixels, b.pixels) and (a.domain, a.source_id) == (b.domain, b.source_id)
        assert np.array_equal(ds.references[a.source_id], back.references[a.source_id])
    assert back.rois == ds.rois
    header = (tmp_path / "manifest.tsv").read_text().splitlines()[0].split("\t")
    assert header[:4] == ["path", "domain", "source_id", "extractor"]


def test_load_dataset_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)


@pytest.mark.parametrize("dtype", [np.uint16, np.int16, np.float32, np.float64])
def test_raw_roundtrip(tmp_path, dtype):
    arr = (np.arange(24).reshape(2, 3, 4) - 5).astype(dtype)
    write_raw(tmp_path / "a.mcrt", arr)
    back = read_raw(tmp_path / "a.mcrt")
    assert back.dtype == np.dtype(dtype) and np.array_equal(back, arr)


def test_raw_header_layout(tmp_path):
    write_raw(tmp_path / "a.mcrt", np.zeros((3, 5), np.float32))
    data = (tmp_path / "a.mcrt").read_bytes()
    assert data[:8] == b"MCRT\x01\x03\x02\x00"
    assert data[8:16] == (3).to_bytes(4, "little") + (5).to_bytes(4, "little")
    assert len(data) == 16 + 15 * 4


def test_raw_rejects_garbage(tmp_path):
    (tmp_path / "bad.mcrt").write_bytes(b"NOPE1234")
    with pytest.raises(ImageFileError):
        read_raw(tmp_path / "bad.mcrt")
    write_raw(tmp_path / "t.mcrt", np.zeros(4, np.float32))
    (tmp_path / "t.mcrt").write_bytes((tmp_path / "t.mcrt").read_bytes()[:-1])
    with pytest.raises(ImageFileError):
        read_raw(tmp_path / "t.mcrt")


def test_png16_roundtrip_and_limits(tmp_path):
    arr = np.array([[0, 1], [40000, 65535]], dtype=np.float64)
    write_png16(tmp_path / "a.png", arr)
    assert np.array_equal(read_image(tmp_path / "a.png"), arr)
    with pytest.raises(ImageFileError):
        write_png16(tmp_path / "b.png", arr + 0.5)
    with pytest.raises(ImageFileError):
        write_png16(tmp_path / "c.png", arr - 1)
    p = write_image(tmp_path / "d.mcrt", arr + 0.5)
    assert np.array_equal(read_image(p), arr + 0.5)


# batch streams

def _records(n, domain=0, side=8):
    return [rec(np.full((side, side), float(i)), domain, f"{domain}_{i}") for i in range(n)]


def test_every_item_once_per_epoch():
    s = BatchStream(_records(10), 3, 4, seed=0)
    for _ in range(3):
        seen = []
        for _ in range(4):  # 3 + 3 + 3 + 1
            seen += [int(b[0, 0]) for b in next(s)]
        assert sorted(seen) == list(range(10))


def test_batch_larger_than_dataset_is_error():
    with pytest.raises(DataError):
        BatchStream(_records(3), 4, 4, seed=0)


def test_unknown_domain_is_error():
    ds = make_phantom_dataset(PhantomConfig(n_images=2, side=32, noise_sigmas=(10, 0)))
    with pytest.raises(DataError):
        batch_stream(ds, 2, 1, 16, seed=0)


def test_streams_with_equal_seed_are_independent():
    ds = make_phantom_dataset(PhantomConfig(n_images=0, side=32))
    ds.records = _records(10, 0) + _records(10, 1)
    a = batch_stream(ds, 0, 1, 8, seed=42)
    b = batch_stream(ds, 1, 1, 8, seed=42)
    table = np.zeros((10, 10))
    for _ in range(1000):
        table[int(next(a)[0, 0, 0]), int(next(b)[0, 0, 0])] += 1
    assert chi2_contingency(table)[1] > 1e-3
    assert abs(np.trace(table) - 100) < 4 * np.sqrt(1000 * 0.1 * 0.9)


def test_stream_state_roundtrip():
    s = BatchStream(_records(5, side=16), 2, 8, seed=1)
    next(s)
    st_ = s.state_dict()
    a = [next(s) for _ in range(4)]
    s2 = BatchStream(_records(5, side=16), 2, 8, seed=99)
    s2.load_state_dict(st_)
    assert all(np.array_equal(x, y) for x, y in zip(a, [next(s2) for _ in range(4)]))


def test_roi_checks():
    img = np.zeros((8, 8))
    with pytest.raises(DataError):
        Roi("i", "r", 6, 6, 4, 4).window(img)
    with pytest.raises(DataError):
        Roi("i", "r", 0, 0, 1, 3).window(img)
    assert Roi("i", "r", 6, 6, 2, 2).window(img).shape == (2, 2)
