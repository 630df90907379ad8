import json

import numpy as np
import pytest
from scipy.ndimage import label as cc_label

from anatomia.errors import ConfigError
from anatomia.synthdata import SynthConfig, gen_dataset, generate_case


class TestSynthConfig:
    def test_rejects_small_images(self):
        with pytest.raises(ConfigError):
            SynthConfig(image_size=(16, 16))

    def test_rejects_bad_contrast(self):
        with pytest.raises(ConfigError):
            SynthConfig(contrast=0.0)

    def test_rejects_too_many_classes(self):
        with pytest.raises(ConfigError):
            SynthConfig(num_classes=5)


class TestGeneration:
    def test_threshold_recovery_oracle(self):
        # noise_std=0, contrast=1: every class is a constant intensity level,
        # so nearest-level classification must reproduce the mask exactly.
        cfg = SynthConfig(num_cases=1, num_classes=3, noise_std=0.0, contrast=1.0, seed=4)
        volume, mask = generate_case(cfg, 0)
        levels = {}
        for c in range(cfg.num_classes + 1):
            values = np.unique(volume.data[mask.data == c])
            assert len(values) == 1
            levels[c] = float(values[0])
        assert len(set(levels.values())) == cfg.num_classes + 1
        recovered = np.zeros_like(mask.data)
        for c, level in levels.items():
            recovered[np.isclose(volume.data, level)] = c
        assert np.array_equal(recovered, mask.data)

    def test_bit_identical_datasets_per_seed(self, tmp_path):
        cfg = SynthConfig(num_cases=3, seed=9)
        gen_dataset(cfg, tmp_path / "a")
        gen_dataset(cfg, tmp_path / "b")
        for case in ("case_0000", "case_0001", "case_0002"):
            for payload in ("image.raw", "label.raw", "meta.json"):
                assert (tmp_path / "a" / case / payload).read_bytes() == (
                    tmp_path / "b" / case / payload
                ).read_bytes()

    def test_four_class_alphabet(self):
        cfg = SynthConfig(num_cases=1, num_classes=4, seed=2)
        _, mask = generate_case(cfg, 0)
        assert set(np.unique(mask.data)) <= {0, 1, 2, 3, 4}

    def test_every_class_connected_and_present(self):
        cfg = SynthConfig(num_cases=1, num_classes=4, seed=13)
        for index in range(8):
            _, mask = generate_case(cfg, index)
            for c in range(1, 5):
                region = mask.data == c
                assert region.any()
                _, n_components = cc_label(region)
                assert n_components == 1

    def test_class_fractions_bounded(self):
        cfg = SynthConfig(num_cases=1, num_classes=2, seed=21)
        for index in range(8):
            _, mask = generate_case(cfg, index)
            total = mask.data.size
            for c in (1, 2):
                frac = float((mask.data == c).sum()) / total
                assert 0.002 <= frac <= 0.35

    def test_intensities_normalized(self):
        cfg = SynthConfig(num_cases=1, seed=3)
        volume, _ = generate_case(cfg, 0)
        assert volume.data.min() == 0.0 and volume.data.max() == 1.0

    def test_dataset_index(self, tmp_path):
        cfg = SynthConfig(num_cases=4, seed=0)
        ids = gen_dataset(cfg, tmp_path / "ds")
        index = json.loads((tmp_path / "ds" / "dataset.json").read_text())
        assert index["cases"] == ids and len(ids) == 4
        assert index["config"]["seed"] == 0
