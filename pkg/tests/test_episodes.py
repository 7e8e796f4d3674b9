import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdat import episodes as E


@pytest.fixture(scope="module")
def small():
    return E.quantize(E.generate_synthetic(n_classes=20, images_per_class=20, resolution=16, seed=3))


def test_default_split_sizes(small):
    assert small.counts() == {"train": 12, "val": 4, "test": 4}
    assert small.image_shape == (3, 16, 16)


def test_generator_is_deterministic_and_seeded():
    a = E.generate_synthetic(10, 8, 8, seed=1, n_way=5)
    b = E.generate_synthetic(10, 8, 8, seed=1, n_way=5)
    c = E.generate_synthetic(10, 8, 8, seed=2, n_way=5)
    assert all(np.array_equal(x.images, y.images) for x, y in zip(a.classes, b.classes))
    assert not np.array_equal(a.classes[0].images, c.classes[0].images)


def test_generator_refuses_too_few_classes():
    with pytest.raises(ValueError):
        E.generate_synthetic(n_classes=9, n_way=5)


def test_classes_are_more_alike_within_than_across(small):
    means = np.stack([c.images.mean(axis=0).ravel() for c in small.classes])
    within = np.mean([np.linalg.norm(c.images.reshape(len(c.images), -1) - means[i], axis=1).mean()
                      for i, c in enumerate(small.classes)])
    across = np.mean([np.linalg.norm(small.classes[i].images.reshape(20, -1) - means[j], axis=1).mean()
                      for i in range(20) for j in range(20) if i != j])
    assert across > within


def test_round_trip_is_bit_identical(small, tmp_path):
    manifest = E.save_dataset(small, tmp_path)
    back = E.load_dataset(manifest)
    assert [c.name for c in back.classes] == [c.name for c in small.classes]
    assert [c.split for c in back.classes] == [c.split for c in small.classes]
    assert all(np.array_equal(a.images, b.images) for a, b in zip(small.classes, back.classes))


def test_tensor_file_layout(tmp_path):
    imgs = np.arange(2 * 1 * 2 * 3, dtype=np.float64).reshape(2, 1, 2, 3) / 16
    E.write_tensor_file(tmp_path / "a.fsds", imgs)
    raw = (tmp_path / "a.fsds").read_bytes()
    assert raw[:4] == b"FSDS" and raw[4:6] == b"\x01\x00"
    assert len(raw) == 4 + 2 + 16 + imgs.size * 4
    np.testing.assert_array_equal(E.read_tensor_file(tmp_path / "a.fsds"), imgs)


@pytest.mark.parametrize("mutate,message", [
    (lambda raw: raw[:10], "truncated"),
    (lambda raw: b"XXXX" + raw[4:], "magic"),
    (lambda raw: raw[:4] + b"\x02\x00" + raw[6:], "version"),
    (lambda raw: raw[:-4], "data bytes"),
])
def test_corrupt_tensor_files_are_rejected(tmp_path, mutate, message):
    path = tmp_path / "x.fsds"
    E.write_tensor_file(path, np.zeros((2, 1, 2, 2)))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(E.DatasetError, match=message):
        E.read_tensor_file(path)


def _manifest(tmp_path, lines):
    E.write_tensor_file(tmp_path / "a.fsds", np.zeros((3, 1, 2, 2)))
    path = tmp_path / "m.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_class_in_two_splits_is_rejected(tmp_path):
    path = _manifest(tmp_path, ["a a.fsds train", "a a.fsds test"])
    with pytest.raises(E.DatasetError, match="both"):
        E.load_dataset(path)


def test_manifest_errors_carry_line_numbers(tmp_path):
    with pytest.raises(E.DatasetError, match=":2:"):
        E.load_dataset(_manifest(tmp_path, ["# header", "a missing.fsds train"]))
    with pytest.raises(E.DatasetError, match=":1:"):
        E.load_dataset(_manifest(tmp_path, ["a a.fsds"]))
    with pytest.raises(E.DatasetError, match="split"):
        E.load_dataset(_manifest(tmp_path, ["a a.fsds holdout"]))
    with pytest.raises(E.DatasetError, match="need at least"):
        E.load_dataset(_manifest(tmp_path, ["a a.fsds train"]), min_images=4)


def test_out_of_range_pixels_are_rejected():
    with pytest.raises(E.DatasetError):
        E.Dataset([E.ClassImages("a", np.full((2, 1, 2, 2), 1.5), "train")])


def test_episode_shapes_and_labels(small):
    ep = E.sample_episode(small, "train", 5, 5, 10, np.random.default_rng(0))
    assert ep.support.shape == (25, 3, 16, 16) and ep.query.shape == (50, 3, 16, 16)
    np.testing.assert_array_equal(ep.support_labels, np.repeat(np.arange(5), 5))
    np.testing.assert_array_equal(ep.query_labels, np.repeat(np.arange(5), 10))
    for c, cid in enumerate(ep.class_ids):
        np.testing.assert_array_equal(ep.query[c * 10], small.classes[cid].images[ep.query_index[c, 0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["train", "val", "test"]), st.integers(1, 4), st.integers(1, 8))
def test_episodes_stay_in_split_and_never_overlap(small, seed, split, k, q):
    ep = E.sample_episode(small, split, 4, k, q, np.random.default_rng(seed))
    assert ep.overlaps() == 0
    assert len(set(ep.class_ids)) == 4
    assert all(small.classes[c].split == split for c in ep.class_ids)


def test_way_equal_to_split_size_uses_every_class(small):
    ep = E.sample_episode(small, "test", 4, 1, 1, np.random.default_rng(1))
    assert sorted(ep.class_ids) == small.split_indices("test")
    with pytest.raises(E.DatasetError):
        E.sample_episode(small, "test", 5, 1, 1, np.random.default_rng(1))


def test_too_few_images_per_class(small):
    with pytest.raises(E.DatasetError, match="need 21"):
        E.sample_episode(small, "train", 2, 1, 20, np.random.default_rng(0))


def test_class_frequencies_are_uniform(small):
    n, way = 10_000, 5
    rng = np.random.default_rng(5)
    counts = np.zeros(len(small.classes))
    for _ in range(n):
        counts[E.sample_episode(small, "train", way, 1, 1, rng).class_ids] += 1
    p = way / 12
    sd = np.sqrt(n * p * (1 - p))
    train = small.split_indices("train")
    assert np.all(np.abs(counts[train] - n * p) <= 3 * sd)
    assert counts.sum() == counts[train].sum()


def test_episode_streams_are_independent_of_call_order(small):
    a = E.sample_episode(small, "train", 5, 1, 2, E.episode_rng(0, 3, 7))
    E.sample_episode(small, "train", 5, 1, 2, E.episode_rng(0, 3, 6))
    b = E.sample_episode(small, "train", 5, 1, 2, E.episode_rng(0, 3, 7))
    assert a.class_ids == b.class_ids and np.array_equal(a.query_index, b.query_index)
