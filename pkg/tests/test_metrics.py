import numpy as np
import pytest

from anatomia.core import LabelMask
from anatomia.errors import DataError
from anatomia.metrics import (
    aggregate_runs,
    dice_score,
    evaluate_masks,
    hd95,
    mean_std,
    write_metrics_json,
)


def make_mask(data, num_classes=1):
    return LabelMask(data=np.asarray(data, dtype=np.uint8), num_classes=num_classes)


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------
def brute_dice(pred, gt, c):
    a = {tuple(p) for p in np.argwhere(pred == c)}
    b = {tuple(p) for p in np.argwhere(gt == c)}
    if not a and not b:
        return 1.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def brute_boundary(region):
    region = np.asarray(region, dtype=bool)
    out = set()
    for idx in np.argwhere(region):
        for axis in range(region.ndim):
            for sign in (-1, 1):
                nb = list(idx)
                nb[axis] += sign
                if not (0 <= nb[axis] < region.shape[axis]) or not region[tuple(nb)]:
                    out.add(tuple(idx))
    return out


def brute_hd95(pred, gt, c, spacing):
    a = pred == c
    b = gt == c
    if not a.any() or not b.any():
        return None
    pa = np.array(sorted(brute_boundary(a)), dtype=float) * np.asarray(spacing)
    pb = np.array(sorted(brute_boundary(b)), dtype=float) * np.asarray(spacing)
    d_ab = [min(np.linalg.norm(p - q) for q in pb) for p in pa]
    d_ba = [min(np.linalg.norm(p - q) for q in pa) for p in pb]
    return float(np.percentile(np.asarray(d_ab + d_ba), 95, method="linear"))


class TestDice:
    def test_perfect_overlap(self):
        m = make_mask([[0, 1], [1, 1]])
        assert dice_score(m, m, 1) == 1.0

    def test_disjoint_regions(self):
        a = make_mask([[1, 0], [0, 0]])
        b = make_mask([[0, 0], [0, 1]])
        assert dice_score(a, b, 1) == 0.0

    def test_half_overlap(self):
        # |A| = |B| = 4, |A ∩ B| = 2 -> 0.5
        a = make_mask([[1, 1, 1, 1, 0, 0]])
        b = make_mask([[0, 0, 1, 1, 1, 1]])
        assert dice_score(a, b, 1) == 0.5

    def test_both_empty_is_one(self):
        z = make_mask([[0, 0]])
        assert dice_score(z, z, 1) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            dice_score(make_mask([[0]]), make_mask([[0, 1]]), 1)

    def test_symmetry_and_oracle(self, rng):
        for _ in range(100):
            shape = tuple(int(rng.integers(3, 9)) for _ in range(2))
            a = make_mask(rng.integers(0, 3, shape), num_classes=2)
            b = make_mask(rng.integers(0, 3, shape), num_classes=2)
            for c in (1, 2):
                d = dice_score(a, b, c)
                assert d == dice_score(b, a, c)
                assert abs(d - brute_dice(a.data, b.data, c)) <= 1e-9


class TestHd95:
    def test_identical_masks_zero(self):
        m = make_mask([[0, 1, 1], [0, 1, 0], [0, 0, 0]])
        assert hd95(m, m, 1, (1, 1)) == 0.0

    def test_empty_region_undefined(self):
        a = make_mask([[0, 0]])
        b = make_mask([[0, 1]])
        assert hd95(a, b, 1, (1, 1)) is None
        assert hd95(b, a, 1, (1, 1)) is None

    def test_three_four_offset_is_five(self):
        a = np.zeros((8, 8), dtype=np.uint8)
        b = np.zeros((8, 8), dtype=np.uint8)
        a[1, 1] = 1
        b[4, 5] = 1  # offset (3, 4) -> distance 5
        got = hd95(make_mask(a), make_mask(b), 1, (1, 1))
        expected = brute_hd95(a, b, 1, (1, 1))
        assert got is not None and abs(got - 5.0) <= 1e-9
        assert abs(got - expected) <= 1e-9

    def test_matches_brute_force_oracle(self, rng):
        for trial in range(100):
            ndim = 2 if trial % 2 == 0 else 3
            shape = tuple(int(rng.integers(3, 9 if ndim == 3 else 17)) for _ in range(ndim))
            spacing = tuple(float(rng.uniform(0.5, 2.0)) for _ in range(ndim))
            a = rng.integers(0, 2, shape).astype(np.uint8)
            b = rng.integers(0, 2, shape).astype(np.uint8)
            got = hd95(make_mask(a), make_mask(b), 1, spacing)
            expected = brute_hd95(a, b, 1, spacing)
            if expected is None:
                assert got is None
            else:
                assert got is not None and abs(got - expected) <= 1e-9

    def test_symmetry_translation_and_scaling(self, rng):
        base = np.zeros((12, 12), dtype=np.uint8)
        base[2:5, 2:6] = 1
        other = np.zeros((12, 12), dtype=np.uint8)
        other[3:7, 4:9] = 1
        a, b = make_mask(base), make_mask(other)
        d = hd95(a, b, 1, (1, 1))
        assert d == hd95(b, a, 1, (1, 1))
        shifted_a = make_mask(np.roll(base, (3, 3), axis=(0, 1)))
        shifted_b = make_mask(np.roll(other, (3, 3), axis=(0, 1)))
        assert abs(hd95(shifted_a, shifted_b, 1, (1, 1)) - d) <= 1e-9
        assert abs(hd95(a, b, 1, (2, 2)) - 2 * d) <= 1e-9


class TestAggregation:
    def test_identical_reports_zero_std(self):
        mean, std = mean_std([3.5, 3.5, 3.5])
        assert (mean, std) == (3.5, 0.0)

    def test_hand_computed_mean_std(self):
        mean, std = mean_std([85.0, 86.0, 87.0])
        assert abs(mean - 86.0) <= 1e-12 and abs(std - 1.0) <= 1e-12

    def test_single_run(self):
        assert mean_std([42.0]) == (42.0, 0.0)

    def test_empty_is_error(self):
        with pytest.raises(DataError):
            mean_std([])
        with pytest.raises(DataError):
            aggregate_runs([])

    def test_aggregate_excludes_undefined(self):
        agg = aggregate_runs([{"hd95": 2.0}, {"hd95": None}, {"hd95": 4.0}])
        assert agg["hd95"]["mean"] == 3.0 and agg["hd95"]["n"] == 2


class TestReports:
    def test_evaluate_and_write_json(self, tmp_path, rng):
        gt = make_mask(rng.integers(0, 2, (10, 10)), num_classes=1)
        report = evaluate_masks(gt, gt, (1, 1), case_id="x")
        assert report.per_class_dsc == [1.0] and report.per_class_hd95 == [0.0]
        payload = write_metrics_json(tmp_path / "metrics.json", [report], seeds=[1])
        assert payload["aggregate"]["mean_dsc"] == 1.0
        assert (tmp_path / "metrics.json").is_file()
