import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from hermes.data import (
    DatasetIndex,
    Geometry,
    IngestError,
    Sample,
    StrongParams,
    apply_geometry,
    augment_strong,
    augment_weak,
    dataset_digest,
    draw_strong_params,
    identity_geometry,
    index_from_samples,
    make_view_pair,
    photometric,
    scan_dataset,
    split_labeled,
    synth_generate,
    synth_sample,
    write_dataset,
)


def png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def dummy(i, labeled=True, size=8):
    img = np.full((3, size, size), i / 1000, dtype=np.float32)
    if not labeled:
        return Sample(f"s{i:04d}", img)
    return Sample(f"s{i:04d}", img, np.zeros((size, size), np.uint8), i % 2)


# -- samples and ingestion --------------------------------------------------------------


def test_sample_invariants():
    with pytest.raises(ValueError):
        Sample("a", np.zeros((1, 4, 4), np.float32))
    with pytest.raises(ValueError):
        Sample("a", np.zeros((3, 4, 4), np.float32), np.zeros((3, 3), np.uint8), 0)
    with pytest.raises(ValueError):
        Sample("a", np.zeros((3, 4, 4), np.float32), np.zeros((4, 4), np.uint8), None)
    s = dummy(1)
    assert s.labeled and not s.stripped().labeled


def test_scan_single_file(tmp_path):
    png(tmp_path / "benign" / "a.png", np.full((6, 5), 128))
    mask = np.zeros((6, 5))
    mask[2:4, 1:3] = 255
    png(tmp_path / "benign" / "a_mask.png", mask)
    idx = scan_dataset(tmp_path)
    assert idx.labeled == ["benign/a"]
    s = idx.samples["benign/a"]
    assert s.class_label == 0 and s.image.shape == (3, 6, 5) and s.mask.sum() == 4
    assert np.allclose(s.image, 128 / 255)


def test_scan_empty_root(tmp_path):
    idx = scan_dataset(tmp_path)
    assert idx.all_ids == [] and idx.labeled == []


def test_scan_missing_mask_names_file(tmp_path):
    png(tmp_path / "malignant" / "b.png", np.zeros((4, 4)))
    with pytest.raises(IngestError, match="b.png"):
        scan_dataset(tmp_path)


def test_scan_unknown_class_and_unreadable(tmp_path):
    (tmp_path / "normal").mkdir()
    with pytest.raises(IngestError, match="normal"):
        scan_dataset(tmp_path)
    (tmp_path / "normal").rmdir()
    (tmp_path / "benign").mkdir()
    (tmp_path / "benign" / "c.png").write_bytes(b"not a png")
    (tmp_path / "benign" / "c_mask.png").write_bytes(b"not a png")
    with pytest.raises(IngestError, match="c.png"):
        scan_dataset(tmp_path)


def test_scan_is_lexicographic_and_resizes(tmp_path):
    for name in ("z", "a", "m"):
        png(tmp_path / "malignant" / f"{name}.png", np.zeros((10, 10)))
        png(tmp_path / "malignant" / f"{name}_mask.png", np.zeros((10, 10)))
    idx = scan_dataset(tmp_path, image_size=32)
    assert idx.all_ids == ["malignant/a", "malignant/m", "malignant/z"]
    assert idx.samples["malignant/a"].image.shape == (3, 32, 32)


def test_write_then_scan_roundtrip(tmp_path):
    samples = synth_generate(6, 32, 1)
    write_dataset(samples, tmp_path)
    idx = scan_dataset(tmp_path)
    assert len(idx.all_ids) == 6
    for s in samples:
        back = idx.samples[f"{('benign', 'malignant')[s.class_label]}/{s.id}"]
        assert np.array_equal(back.mask, s.mask)
        assert np.abs(back.image - s.image).max() <= 0.5 / 255 + 1e-6


# -- splits ------------------------------------------------------------------------


def test_split_examples():
    idx = index_from_samples([dummy(i) for i in range(100)])
    sp = split_labeled(idx, 70, 0.3, seed=0)
    assert (len(sp.labeled), len(sp.unlabeled), len(sp.val)) == (70, 0, 30)
    big = index_from_samples([dummy(i) for i in range(647)])
    sp = split_labeled(big, 72, 0.3, seed=0)
    assert len(sp.labeled) == 72 and len(sp.val) == 194 and len(sp.unlabeled) == 647 - 194 - 72
    assert all(not sp.samples[i].labeled for i in sp.unlabeled)
    assert all(sp.samples[i].labeled for i in sp.labeled + sp.val)


def test_split_deterministic_and_errors():
    idx = index_from_samples([dummy(i) for i in range(50)])
    a, b = split_labeled(idx, 10, 0.3, 5), split_labeled(idx, 10, 0.3, 5)
    assert (a.labeled, a.unlabeled, a.val) == (b.labeled, b.unlabeled, b.val)
    with pytest.raises(ValueError, match="n_labeled"):
        split_labeled(idx, 40, 0.3, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 80), st.floats(0.0, 0.9), st.integers(0, 1000), st.data())
def test_split_disjoint_and_complete(n, frac, seed, data):
    idx = index_from_samples([dummy(i) for i in range(n)])
    n_val = int(round(frac * n))
    k = data.draw(st.integers(0, n - n_val))
    sp = split_labeled(idx, k, frac, seed)
    groups = [set(sp.labeled), set(sp.unlabeled), set(sp.val)]
    assert sum(map(len, groups)) == n == len(set().union(*groups))


def test_index_rejects_overlap():
    with pytest.raises(ValueError):
        DatasetIndex(["a"], ["a"], [])


# -- synthetic generator --------------------------------------------------------------


def test_synth_deterministic():
    a, b = synth_generate(1, 96, 7), synth_generate(1, 96, 7)
    assert np.array_equal(a[0].image, b[0].image) and np.array_equal(a[0].mask, b[0].mask)
    assert dataset_digest(synth_generate(5, 32, 3)) == dataset_digest(synth_generate(5, 32, 3))
    assert dataset_digest(synth_generate(5, 32, 3)) != dataset_digest(synth_generate(5, 32, 4))
    with pytest.raises(ValueError):
        synth_generate(0, 32, 0)


def test_synth_sample_is_pure_in_index():
    # sample i does not depend on how many samples are generated around it
    assert np.array_equal(synth_generate(4, 32, 2)[3].image, synth_sample(2, 3, 32).image)


def test_synth_area_and_balance_over_1000():
    samples = synth_generate(1000, 32, 11)
    areas = np.array([s.mask.mean() for s in samples])
    assert areas.min() >= 0.02 and areas.max() <= 0.30
    freq = np.mean([s.class_label for s in samples])
    assert 0.45 <= freq <= 0.55
    for s in samples[:50]:
        assert s.image.dtype == np.float32 and s.image.min() >= 0 and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0, 1}
        assert np.array_equal(s.image[0], s.image[2])


# -- augmentation -------------------------------------------------------------------


def test_identity_geometry_is_identity():
    s = synth_sample(0, 0, 32)
    img, mask = apply_geometry(s.image, s.mask, identity_geometry(32))
    assert np.array_equal(img, s.image) and np.array_equal(mask, s.mask)


def test_flip_geometry():
    s = synth_sample(0, 1, 32)
    img, mask = apply_geometry(s.image, s.mask, Geometry(True, 1.0, 0, 0, 32))
    assert np.array_equal(mask, s.mask[:, ::-1])
    assert np.array_equal(img, s.image[:, :, ::-1])


def test_scale_crop_keeps_mask_binary_and_pads_with_zero():
    s = synth_sample(0, 2, 32)
    img, mask = apply_geometry(s.image, s.mask, Geometry(False, 0.8, -3, -3, 32))
    assert set(np.unique(mask)) <= {0, 1}
    assert (img[:, :3] == 0).all() and (mask[:3] == 0).all()
    # doubling: output pixel 2k+1 sits at source coordinate k + 0.25 along each axis
    img, _ = apply_geometry(s.image, None, Geometry(False, 2.0, 0, 0, 32))
    x = s.image.astype(np.float64)
    rows = 0.75 * x[:, :15, :] + 0.25 * x[:, 1:16, :]
    both = 0.75 * rows[:, :, :15] + 0.25 * rows[:, :, 1:16]
    assert np.allclose(img[:, 1:31:2, 1:31:2], both, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_weak_view_roundtrip_and_ranges(seed):
    s = synth_sample(1, seed % 7, 32)
    weak, geom, mask = augment_weak(s, np.random.default_rng(seed))
    again, mask2 = apply_geometry(s.image, s.mask, geom)
    assert np.array_equal(weak, again) and np.array_equal(mask, mask2)
    assert 0.8 <= geom.scale <= 1.2 and weak.shape == s.image.shape
    g2 = augment_weak(s, np.random.default_rng(seed))[1]
    assert g2 == geom


def test_strong_identity_and_clamp():
    view = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
    out = photometric(view, StrongParams(0.0, 1.0, 1.0))
    assert np.abs(out - view).max() <= 1e-6
    for seed in range(20):
        out = augment_strong(view * 3 - 1, np.random.default_rng(seed))
        assert out.min() >= 0 and out.max() <= 1


def test_strong_params_ranges():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = draw_strong_params(rng)
        assert 0.1 <= p.sigma <= 2.0 and 0.7 <= p.brightness <= 1.3 and 0.7 <= p.contrast <= 1.3


def test_view_pair_strong_is_photometric_of_weak():
    s = synth_sample(3, 0, 32)
    pair = make_view_pair(s, np.random.default_rng(9))
    # replay the same draws: geometry first, then the photometric parameters
    rng = np.random.default_rng(9)
    weak, geom, mask = augment_weak(s, rng)
    params = draw_strong_params(rng)
    assert np.array_equal(pair.weak, weak) and pair.geometry == geom
    assert np.array_equal(pair.strong, photometric(weak, params))
    assert np.array_equal(pair.mask, mask) and pair.source_id == s.id
