import json

import numpy as np
import pytest

from anatomia.core import (
    LabelMask,
    ProbMap,
    Volume,
    apply_augment,
    argmax_labels,
    augment,
    draw_augment_params,
    load_volume,
    make_splits,
    one_hot,
    random_crop,
    save_volume,
)
from anatomia.errors import ConfigError, DataError

from conftest import random_volume


class TestVolumeTypes:
    def test_volume_rejects_nonfinite(self):
        with pytest.raises(DataError):
            Volume(data=np.array([[1.0, np.nan]]), spacing=(1, 1))

    def test_volume_rejects_bad_spacing(self):
        with pytest.raises(DataError):
            Volume(data=np.zeros((2, 2)), spacing=(0.0, 1.0))

    def test_label_rejects_out_of_range(self):
        with pytest.raises(DataError):
            LabelMask(data=np.array([[0, 3]]), num_classes=2)

    def test_probmap_rejects_bad_sum(self):
        with pytest.raises(DataError):
            ProbMap(data=np.full((2, 2, 2), 0.7))


class TestArchiveRoundTrip:
    def test_identity_round_trip(self, tmp_path):
        v = Volume(data=np.arange(16, dtype=np.float32).reshape(4, 4), spacing=(1, 1), id="a")
        m = LabelMask(data=np.zeros((4, 4), dtype=np.uint8), num_classes=1)
        save_volume(v, m, tmp_path / "a")
        meta = json.loads((tmp_path / "a" / "meta.json").read_text())
        assert meta["shape"] == [4, 4] and meta["spacing"] == [1.0, 1.0]
        loaded, loaded_m = load_volume(tmp_path / "a")
        assert np.array_equal(loaded.data, v.data)
        assert loaded_m is not None and np.array_equal(loaded_m.data, m.data)

    def test_random_round_trips_bit_exact(self, tmp_path, rng):
        for i in range(100):
            shape = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
            v, m = random_volume(rng, shape=shape)
            save_volume(v, m, tmp_path / f"c{i}")
            lv, lm = load_volume(tmp_path / f"c{i}")
            assert lv.data.tobytes() == v.data.tobytes()
            assert lm is not None and lm.data.tobytes() == m.data.tobytes()
            assert lv.spacing == v.spacing

    def test_zero_volume_archive_payload(self, tmp_path):
        v = Volume(data=np.zeros((2, 2), dtype=np.float32), spacing=(1, 1))
        save_volume(v, None, tmp_path / "z")
        payload = (tmp_path / "z" / "image.raw").read_bytes()
        assert payload == b"\x00" * 16

    def test_label_value_above_num_classes_is_consistency_error(self, tmp_path):
        v = Volume(data=np.zeros((2, 2), dtype=np.float32), spacing=(1, 1))
        m = LabelMask(data=np.ones((2, 2), dtype=np.uint8), num_classes=1)
        save_volume(v, m, tmp_path / "bad")
        # Corrupt the label payload with value C+1.
        (tmp_path / "bad" / "label.raw").write_bytes(b"\x02" * 4)
        with pytest.raises(DataError):
            load_volume(tmp_path / "bad")

    def test_missing_meta_is_format_error(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(DataError):
            load_volume(tmp_path / "empty")

    def test_bad_spacing_fails_before_write(self, tmp_path):
        with pytest.raises(DataError):
            Volume(data=np.zeros((2, 2, 2)), spacing=(0, 1, 1))
        assert not any(tmp_path.iterdir())


class TestLabelProbConversions:
    def test_one_hot_single_voxel_background(self):
        m = LabelMask(data=np.zeros((1, 1), dtype=np.uint8), num_classes=1)
        p = one_hot(m)
        assert p.data[:, 0, 0].tolist() == [1.0, 0.0]

    def test_one_hot_single_voxel_class_two(self):
        m = LabelMask(data=np.full((1, 1), 2, dtype=np.uint8), num_classes=4)
        p = one_hot(m)
        assert p.data[:, 0, 0].tolist() == [0.0, 0.0, 1.0, 0.0, 0.0]

    def test_one_hot_argmax_round_trip(self, rng):
        for _ in range(100):
            _, m = random_volume(rng, shape=(7, 5), num_classes=3)
            assert np.array_equal(argmax_labels(one_hot(m)).data, m.data)

    def test_argmax_prefers_smaller_index_on_ties(self):
        p = ProbMap(data=np.full((2, 3, 3), 0.5))
        assert np.all(argmax_labels(p).data == 0)

    def test_argmax_uniform_gives_background(self):
        p = ProbMap(data=np.full((4, 2, 2), 0.25))
        assert np.all(argmax_labels(p).data == 0)


class TestSplits:
    def test_la_style_sizes(self):
        ids = [f"id{i}" for i in range(80)]
        manifest = make_splits(ids, n_labeled=8, m_unlabeled=72, seed=0)
        assert manifest.n_labeled == 8 and manifest.m_unlabeled == 72
        everything = manifest.labeled + manifest.unlabeled + manifest.val + manifest.test
        assert len(set(everything)) == 80

    def test_deterministic_per_seed(self):
        ids = [f"id{i}" for i in range(30)]
        a = make_splits(ids, 3, 20, val_frac=0.1, test_frac=0.1, seed=5)
        b = make_splits(ids, 3, 20, val_frac=0.1, test_frac=0.1, seed=5)
        assert a.to_dict() == b.to_dict()
        c = make_splits(ids, 3, 20, val_frac=0.1, test_frac=0.1, seed=6)
        assert c.to_dict() != a.to_dict()

    def test_zero_labeled_is_error(self):
        with pytest.raises(ConfigError):
            make_splits(["a", "b"], n_labeled=0, m_unlabeled=1)

    def test_insufficient_ids_is_error(self):
        with pytest.raises(ConfigError):
            make_splits(["a", "b"], n_labeled=2, m_unlabeled=2)


class TestRandomCrop:
    def test_full_extent_is_identity(self, rng):
        v, m = random_volume(rng, shape=(10, 12))
        cv, cm = random_crop(v, m, (10, 12), rng)
        assert np.array_equal(cv.data, v.data)
        assert cm is not None and np.array_equal(cm.data, m.data)

    def test_crop_window_matches_source_at_some_offset(self, rng):
        # Oracle: the cropped image/label pair must equal a direct slice of
        # the source at one shared offset.
        for _ in range(20):
            v, m = random_volume(rng, shape=(16, 16))
            cv, cm = random_crop(v, m, (8, 8), rng)
            assert cm is not None
            found = False
            for oy in range(9):
                for ox in range(9):
                    win = (slice(oy, oy + 8), slice(ox, ox + 8))
                    if np.array_equal(v.data[win], cv.data) and np.array_equal(
                        m.data[win], cm.data
                    ):
                        found = True
            assert found

    def test_small_input_zero_padded(self, rng):
        v, m = random_volume(rng, shape=(6, 6))
        m.data[:] = 1
        cv, cm = random_crop(v, m, (8, 8), rng)
        assert cv.shape == (8, 8) and cm is not None and cm.shape == (8, 8)
        # Symmetric padding: one leading and one trailing padded line.
        assert np.all(cv.data[0] == 0) and np.all(cv.data[-1] == 0)
        assert np.all(cm.data[0] == 0) and np.all(cm.data[-1] == 0)
        assert np.all(cm.data[1:7, 1:7] == 1)


class TestAugment:
    def test_identity_params(self, rng):
        v, m = random_volume(rng)
        av, am = apply_augment(v, m, flips=(False, False), k=0)
        assert np.array_equal(av.data, v.data)
        assert am is not None and np.array_equal(am.data, m.data)

    def test_two_quarter_turns_equal_half_turn(self, rng):
        v, m = random_volume(rng)
        once, _ = apply_augment(*apply_augment(v, m, (False, False), 1), (False, False), 1)
        twice, _ = apply_augment(v, m, (False, False), 2)
        assert np.array_equal(once.data, twice.data)

    def test_four_quarter_turns_identity(self, rng):
        for _ in range(100):
            v, m = random_volume(rng, shape=(9, 9))
            out_v, out_m = v, m
            for _ in range(4):
                out_v, out_m = apply_augment(out_v, out_m, (False, False), 1)
            assert np.array_equal(out_v.data, v.data)
            assert out_m is not None and np.array_equal(out_m.data, m.data)

    def test_label_multiset_preserved(self, rng):
        for _ in range(50):
            v, m = random_volume(rng, shape=(8, 8))
            _, am = augment(v, m, rng)
            assert am is not None
            assert np.array_equal(np.sort(am.data.ravel()), np.sort(m.data.ravel()))

    def test_same_seed_same_augmentation(self, rng):
        v, m = random_volume(rng)
        a = augment(v, m, np.random.default_rng(9))
        b = augment(v, m, np.random.default_rng(9))
        assert np.array_equal(a[0].data, b[0].data)

    def test_draw_params_shapes(self):
        flips, k = draw_augment_params(np.random.default_rng(0), rank=3)
        assert len(flips) == 3 and 0 <= k <= 3
