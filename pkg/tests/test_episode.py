import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imaformer.episode import (
    Dataset, DatasetFormatError, SyntheticSpec, augment, class_layout, episode_rng,
    generate_synthetic, load_dataset, resize_bilinear, sample_episode, save_dataset, split_classes,
)

from oracles import nearest_centroid_accuracy


# -- episodes ----------------------------------------------------------------------
def test_five_way_one_shot_ten_query(small_dataset):
    ep = sample_episode(small_dataset, 5, 1, 10, 0)
    assert ep.support_images.shape == (5, 3, 8, 8)
    assert ep.query_images.shape == (50, 3, 8, 8)
    assert ep.support_labels.tolist() == list(range(5))
    assert np.bincount(ep.query_labels).tolist() == [10] * 5


def test_two_class_dataset_uses_both():
    ds = Dataset(np.random.default_rng(0).random((2, 3, 1, 4, 4)))
    ep = sample_episode(ds, 2, 1, 1, 5)
    assert sorted(ep.classes.tolist()) == [0, 1]


def test_same_seed_same_episode(small_dataset):
    a = sample_episode(small_dataset, 3, 2, 4, 42)
    b = sample_episode(small_dataset, 3, 2, 4, 42)
    np.testing.assert_array_equal(a.support_images, b.support_images)
    np.testing.assert_array_equal(a.query_images, b.query_images)
    c = sample_episode(small_dataset, 3, 2, 4, episode_rng(42, 1))
    d = sample_episode(small_dataset, 3, 2, 4, episode_rng(42, 1))
    np.testing.assert_array_equal(c.classes, d.classes)


def test_episode_stream_is_pinned(small_dataset):
    # guards cross-platform reproducibility of the seeded episode stream
    ep = sample_episode(small_dataset, 3, 1, 2, episode_rng(7, 3))
    again = sample_episode(small_dataset, 3, 1, 2, np.random.default_rng([7, 3]))
    np.testing.assert_array_equal(ep.classes, again.classes)
    np.testing.assert_array_equal(ep.query_index, again.query_index)


def test_insufficient_classes_or_images(small_dataset):
    with pytest.raises(ValueError, match="short"):
        sample_episode(small_dataset, 13, 1, 1, 0)
    with pytest.raises(ValueError, match="short"):
        sample_episode(small_dataset, 2, 5, 8, 0)


def test_support_query_disjoint_over_many_episodes(small_dataset):
    for i in range(10_000):
        ep = sample_episode(small_dataset, 5, 2, 3, episode_rng(1, i))
        for c in range(5):
            s = set(ep.support_index[c].tolist())
            q = set(ep.query_index[c].tolist())
            assert not s & q and len(s) == 2 and len(q) == 3
        assert len(set(ep.classes.tolist())) == 5
        assert ep.query_labels.min() >= 0 and ep.query_labels.max() < 5


# -- synthetic generator -------------------------------------------------------------
def test_noise_free_classes_are_constant():
    ds = generate_synthetic(SyntheticSpec(classes=4, images_per_class=5, sigma_bg=0, sigma_sig=0, distractors=0))
    for c in range(4):
        assert np.all(ds.images[c] == ds.images[c, 0])
    assert not np.array_equal(ds.images[0, 0], ds.images[1, 0])


def test_signature_cells_disjoint_when_room():
    spec = SyntheticSpec(classes=4, signature_patches=2, distractors=2, image_size=32, patch_size=8)
    d_cells, _, s_cells, _ = class_layout(spec)
    for cells in s_cells:
        assert len(set(cells.tolist())) == 2
        assert not set(cells.tolist()) & set(d_cells.tolist())


@pytest.mark.parametrize("classes,s", [(7, 2), (14, 1), (3, 4)])
def test_classes_share_no_location_when_they_fit(classes, s):
    spec = SyntheticSpec(classes=classes, signature_patches=s, distractors=2)
    _, _, s_cells, _ = class_layout(spec)
    assert classes * s <= 14
    assert len(set(s_cells.ravel().tolist())) == classes * s


def test_too_many_patches_rejected():
    with pytest.raises(ValueError):
        SyntheticSpec(signature_patches=10, distractors=7)
    with pytest.raises(ValueError):
        SyntheticSpec(signature_patches=0)


def test_distractors_shared_across_classes():
    spec = SyntheticSpec(classes=3, images_per_class=2, sigma_bg=0, sigma_sig=0, distractors=2)
    ds = generate_synthetic(spec)
    d_cells, _, _, _ = class_layout(spec)
    y, x = divmod(int(d_cells[0]), 4)
    blocks = ds.images[:, :, :, y * 8:(y + 1) * 8, x * 8:(x + 1) * 8]
    assert np.all(blocks == blocks[0, 0])


def test_pixels_in_unit_range_and_deterministic():
    spec = SyntheticSpec(classes=5, images_per_class=4, sigma_bg=0.5)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a.images.min() >= 0 and a.images.max() <= 1
    np.testing.assert_array_equal(a.images, b.images)


def test_nearest_centroid_sanity_floor():
    ds = generate_synthetic(SyntheticSpec(classes=20, images_per_class=15, sigma_bg=0.05, seed=11))
    assert nearest_centroid_accuracy(ds.images, 5) > 0.99


def test_signatures_carry_the_class_information():
    spec = SyntheticSpec(classes=20, images_per_class=40, sigma_bg=0.05, signature_gain=0.0, seed=11)
    acc = nearest_centroid_accuracy(generate_synthetic(spec).images, 20)
    assert abs(acc - 1 / 20) <= 0.03


def test_split_classes_disjoint(small_dataset):
    parts = split_classes(small_dataset, {"train": 6, "val": 3, "test": 3}, seed=1)
    ids = [set(p.class_ids) for p in parts.values()]
    assert all(not (a & b) for i, a in enumerate(ids) for b in ids[i + 1:])
    assert parts["val"].split == "val"
    with pytest.raises(ValueError):
        split_classes(small_dataset, {"train": 20})


# -- FSDS files ------------------------------------------------------------------------
def test_fsds_round_trip_bitwise(tmp_path, small_dataset):
    path = tmp_path / "d.fsds"
    save_dataset(small_dataset, path)
    back = load_dataset(path)
    assert back.images.tobytes() == small_dataset.images.tobytes()
    assert back.metadata["spec"] == small_dataset.metadata["spec"]
    assert back.split == small_dataset.split


def test_fsds_layout_is_little_endian(tmp_path):
    ds = Dataset(np.arange(2 * 1 * 1 * 2 * 2, dtype=np.float32).reshape(2, 1, 1, 2, 2) / 10, "test")
    path = tmp_path / "d.fsds"
    save_dataset(ds, path)
    raw = path.read_bytes()
    assert raw[:4] == b"FSDS"
    assert [int.from_bytes(raw[i:i + 4], "little") for i in range(4, 28, 4)] == [1, 2, 1, 1, 2, 2]
    np.testing.assert_array_equal(np.frombuffer(raw[28:28 + 32], dtype="<f4"), ds.images.ravel())


@pytest.mark.parametrize("cut", [3, 20, 60, -1])
def test_fsds_truncation_raises(tmp_path, small_dataset, cut):
    path = tmp_path / "d.fsds"
    save_dataset(small_dataset, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(DatasetFormatError) as info:
        load_dataset(path)
    assert info.value.offset >= 0


def test_fsds_bad_magic_and_version(tmp_path, small_dataset):
    path = tmp_path / "d.fsds"
    save_dataset(small_dataset, path)
    raw = bytearray(path.read_bytes())
    path.write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(DatasetFormatError, match="magic"):
        load_dataset(path)
    raw[4:8] = (2).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="version"):
        load_dataset(path)


# -- augmentation --------------------------------------------------------------------------
def test_forced_noop_is_identity(rng):
    img = rng.random((3, 32, 32))
    np.testing.assert_array_equal(augment(img, rng, scale=(1.0, 1.0), flip_prob=0.0), img)


def test_double_flip_identity(rng):
    img = rng.random((3, 8, 8))
    once = augment(img, np.random.default_rng(0), scale=(1.0, 1.0), flip_prob=1.0)
    np.testing.assert_array_equal(once, img[:, :, ::-1])
    np.testing.assert_array_equal(augment(once, rng, scale=(1.0, 1.0), flip_prob=1.0), img)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([8, 16, 32]))
def test_augment_preserves_dims_and_range(seed, size):
    r = np.random.default_rng(seed)
    img = r.random((3, size, size))
    out = augment(img, r)
    assert out.shape == img.shape
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


def test_bilinear_resize_of_constant_and_identity(rng):
    np.testing.assert_allclose(resize_bilinear(np.full((1, 5, 5), 0.3), 9, 9), 0.3)
    img = rng.random((2, 6, 6))
    np.testing.assert_allclose(resize_bilinear(img, 6, 6), img, atol=1e-15)
