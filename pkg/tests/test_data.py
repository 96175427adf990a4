import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subnetscope._container import TruncatedError
from subnetscope.data import (
    CLASS_NAMES,
    FAMILIES,
    IdxFormatError,
    ShapesConfig,
    balanced_epoch,
    generate_shapes,
    load_dataset,
    load_idx,
    save_dataset,
    tight_bbox,
    write_idx,
)


@pytest.fixture(scope="module")
def small_shapes():
    config = ShapesConfig(train_per_class=12, val_per_class=4, test_per_class=4, seed=7)
    return config, generate_shapes(config)


class TestGenerateShapes:
    def test_split_sizes(self, small_shapes):
        config, splits = small_shapes
        assert len(splits["train"]) == 120
        assert len(splits["val"]) == 40
        assert np.bincount(splits["test"].labels).tolist() == [4] * 10
        assert splits["train"].images.shape == (120, 1, 32, 32)

    def test_deterministic(self, small_shapes):
        config, splits = small_shapes
        again = generate_shapes(config)
        for name in splits:
            np.testing.assert_array_equal(again[name].images, splits[name].images)
            np.testing.assert_array_equal(again[name].masks, splits[name].masks)

    def test_other_seed_differs(self, small_shapes):
        config, splits = small_shapes
        other = generate_shapes(ShapesConfig(train_per_class=12, val_per_class=4, test_per_class=4, seed=8))
        assert not np.array_equal(other["train"].images, splits["train"].images)

    def test_values_in_unit_interval(self, small_shapes):
        _, splits = small_shapes
        for s in splits.values():
            assert s.images.min() >= 0.0 and s.images.max() <= 1.0
            assert np.all(np.isfinite(s.images))

    def test_bbox_tight_and_masks_nonempty(self, small_shapes):
        _, splits = small_shapes
        for s in splits.values():
            for mask, (r0, c0, r1, c1) in zip(s.masks, s.bboxes):
                assert mask.any()
                rows, cols = np.nonzero(mask)
                assert rows.min() == r0 and rows.max() == r1
                assert cols.min() == c0 and cols.max() == c1

    def test_splits_disjoint(self, small_shapes):
        _, splits = small_shapes
        ids = [set(s.ids.tolist()) for s in splits.values()]
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])

    def test_noise_free_circle_interior_constant(self):
        config = ShapesConfig(train_per_class=3, val_per_class=1, test_per_class=1, noise=0.0, seed=1)
        train = generate_shapes(config)["train"]
        for img, mask, label in zip(train.images, train.masks, train.labels):
            if CLASS_NAMES[label] == "circle":
                interior = img[0][mask]
                assert np.ptp(interior) == 0.0
                assert np.all(img[0][~mask] == 0.0)

    def test_too_small_image(self):
        with pytest.raises(ValueError, match="minimum"):
            generate_shapes(ShapesConfig(image_size=8))

    def test_nonpositive_counts(self):
        with pytest.raises(ValueError):
            ShapesConfig(train_per_class=0)


class TestFamilies:
    def test_partition(self):
        members = [c for fam in FAMILIES.values() for c in fam]
        assert sorted(members) == sorted(CLASS_NAMES)
        assert len(members) == len(set(members))

    def test_family_members_share_generator(self):
        config = ShapesConfig()
        for fam, members in FAMILIES.items():
            assert len({config.generator_of(m) for m in members}) == 1
        assert len({config.generator_of(f[0]) for f in FAMILIES.values()}) == 3

    def test_family_labels(self):
        labels = ShapesConfig().family_labels()
        assert labels[:4] == ["polygons"] * 4
        assert labels[4:6] == ["round"] * 2
        assert labels[6:] == ["strokes"] * 4

    def test_tight_bbox(self):
        mask = np.zeros((5, 6), dtype=bool)
        mask[1:3, 2:5] = True
        assert tight_bbox(mask) == (1, 2, 2, 4)


class TestBalancedEpoch:
    def test_sizes(self):
        labels = np.repeat(np.arange(10), 500)
        idx, rel = balanced_epoch(labels, 3, seed=0)
        assert len(idx) == 1000
        assert rel.sum() == 500
        assert np.all(rel == (labels[idx] == 3))
        assert len(np.unique(idx)) == 1000

    def test_epochs_resample_negatives_only(self):
        labels = np.repeat(np.arange(10), 50)
        a, ra = balanced_epoch(labels, 2, seed=1, epoch=1)
        b, rb = balanced_epoch(labels, 2, seed=1, epoch=2)
        assert set(a[ra]) == set(b[rb]) == set(np.flatnonzero(labels == 2))
        assert set(a[~ra]) != set(b[~rb])

    def test_two_balanced_classes_cover_everything(self):
        labels = np.array([0, 1] * 20)
        idx, _ = balanced_epoch(labels, 0, seed=4)
        assert sorted(idx.tolist()) == list(range(40))
        assert idx.tolist() != list(range(40))

    def test_missing_class(self):
        with pytest.raises(ValueError, match="no samples"):
            balanced_epoch(np.array([0, 0, 1]), 2, seed=0)

    def test_too_few_negatives(self):
        with pytest.raises(ValueError, match="other samples"):
            balanced_epoch(np.array([0, 0, 0, 1]), 0, seed=0)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=4, max_size=60), st.integers(0, 4), st.integers(0, 2**16))
    def test_half_relevant(self, labels, c, seed):
        labels = np.array(labels)
        n_pos = int(np.sum(labels == c))
        if n_pos == 0 or len(labels) - n_pos < n_pos:
            return
        idx, rel = balanced_epoch(labels, c, seed)
        assert rel.mean() == 0.5


class TestIdx:
    def test_round_trip_and_scaling(self, tmp_path):
        images = np.zeros((2, 28, 28), dtype=np.uint8)
        images[0, 0, 0] = 255
        images[1, 5, 5] = 51
        write_idx(tmp_path / "img.idx", images)
        write_idx(tmp_path / "lab.idx", np.array([3, 7], dtype=np.uint8))
        data = load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")
        assert data.images.shape == (2, 1, 28, 28)
        assert data.images[0, 0, 0, 0] == 1.0
        assert data.images[1, 0, 5, 5] == pytest.approx(0.2)
        assert data.labels.tolist() == [3, 7]
        assert data.masks is None

    def test_bad_magic(self, tmp_path):
        write_idx(tmp_path / "lab.idx", np.array([1, 2], dtype=np.uint8))
        with pytest.raises(IdxFormatError, match="magic"):
            load_idx(tmp_path / "lab.idx", tmp_path / "lab.idx")

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "img.idx", np.zeros((3, 4, 4), dtype=np.uint8))
        write_idx(tmp_path / "lab.idx", np.array([1, 2], dtype=np.uint8))
        with pytest.raises(IdxFormatError, match="3 images but 2 labels"):
            load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")

    def test_truncated(self, tmp_path):
        write_idx(tmp_path / "img.idx", np.zeros((3, 4, 4), dtype=np.uint8))
        write_idx(tmp_path / "lab.idx", np.array([1, 2, 0], dtype=np.uint8))
        raw = (tmp_path / "img.idx").read_bytes()
        (tmp_path / "img.idx").write_bytes(raw[:-5])
        with pytest.raises(TruncatedError):
            load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")


class TestDatasetCache:
    def test_round_trip(self, small_shapes, tmp_path):
        config, splits = small_shapes
        save_dataset(tmp_path / "d.ssds", config, splits)
        config2, loaded = load_dataset(tmp_path / "d.ssds")
        assert config2 == config
        for name, s in splits.items():
            np.testing.assert_allclose(loaded[name].images, s.images, atol=1e-7)
            np.testing.assert_array_equal(loaded[name].masks, s.masks)
            np.testing.assert_array_equal(loaded[name].bboxes, s.bboxes)
            np.testing.assert_array_equal(loaded[name].labels, s.labels)
            np.testing.assert_array_equal(loaded[name].ids, s.ids)

    def test_round_trip_without_masks(self, tmp_path, small_shapes):
        config, splits = small_shapes
        bare = {k: type(v)(v.images, v.labels) for k, v in splits.items()}
        save_dataset(tmp_path / "d.ssds", config, bare)
        _, loaded = load_dataset(tmp_path / "d.ssds")
        assert loaded["train"].masks is None and loaded["train"].bboxes is None
