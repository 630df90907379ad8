import math

import numpy as np
import pytest
import torch

from anatomia.core import DatasetSplit, LabelMask, Volume
from anatomia.corruption import CorruptionPolicy
from anatomia.errors import ConfigError, DivergenceError
from anatomia.losses import one_hot_tensor
from anatomia.nets import ArchConfig, build_dae, parameter_count
from anatomia.prior import (
    DaeTrainConfig,
    dae_loss,
    dae_loss_components,
    dae_lr,
    smooth_one_hot,
    train_dae,
)
from anatomia.seeding import spawn_torch_rng
from anatomia.synthdata import SynthConfig, generate_case

from conftest import assert_gradients_match_fd

DAE_ARCH = ArchConfig(
    rank=2, in_channels=2, num_classes=1, base_width=4, depth=2,
    skip_connections=False, bottleneck_dim=16,
)


def small_split(num_cases=4, num_classes=1, seed=3):
    cfg = SynthConfig(num_cases=num_cases, num_classes=num_classes, seed=seed)
    labeled = []
    for i in range(num_cases):
        volume, mask = generate_case(cfg, i)
        labeled.append((volume, mask))
    return DatasetSplit(labeled=labeled, unlabeled=[])


class TestLearningRate:
    def test_initial_value(self):
        assert dae_lr(0) == 0.1

    def test_one_halving(self):
        assert dae_lr(5000) == 0.05

    def test_two_halvings(self):
        assert dae_lr(12000) == 0.025

    def test_piecewise_constant_non_increasing(self):
        values = [dae_lr(t) for t in range(0, 20001, 500)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert dae_lr(4999) == dae_lr(0)

    def test_negative_iteration_rejected(self):
        with pytest.raises(ConfigError):
            dae_lr(-1)


class TestDaeLoss:
    def test_exact_reconstruction(self):
        # eps-induced Dice bound is eps/(2S); with 32 voxels per class it
        # sits well under 1e-6.
        labels = torch.zeros(1, 8, 8, dtype=torch.long)
        labels[0, :4] = 1
        probs = one_hot_tensor(labels, 2)
        mse, dice = dae_loss_components(probs, labels)
        assert float(mse) == 0.0
        assert float(dice) < 1e-6

    def test_uniform_probabilities_mse(self):
        # Uniform 1/(C+1) with C=1 against any one-hot target: every entry is
        # 0.5 away from 0 or 1, so MSE = 0.25 exactly.
        labels = torch.tensor([[[0, 0], [1, 1]]])  # half foreground
        probs = torch.full((1, 2, 2, 2), 0.5)
        mse, _ = dae_loss_components(probs, labels)
        assert float(mse) == 0.25

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(1)
        tiny = ArchConfig(
            rank=2, in_channels=2, num_classes=1, base_width=2, depth=2,
            skip_connections=False, bottleneck_dim=4,
        )
        net = build_dae(tiny, (8, 8), spawn_torch_rng(3, "g")).double()
        assert parameter_count(net) <= 1500
        x = torch.rand(1, 2, 8, 8, dtype=torch.float64)
        x = x / x.sum(dim=1, keepdim=True)
        labels = torch.randint(0, 2, (1, 8, 8))

        def scalar():
            probs = torch.softmax(net(x), dim=1)
            return dae_loss(probs, labels)

        net.zero_grad()
        scalar().backward()
        # h=1e-5: the Dice ratio's curvature makes a 1e-3 secant too coarse.
        assert_gradients_match_fd(net.parameters(), scalar, h=1e-5)


class TestSmoothing:
    def test_zero_smoothing_is_hard(self):
        labels = torch.tensor([[[1]]])
        assert torch.equal(smooth_one_hot(labels, 2, 0.0), one_hot_tensor(labels, 2))

    def test_smoothing_moves_toward_uniform(self):
        labels = torch.tensor([[[1]]])
        smoothed = smooth_one_hot(labels, 2, 0.05)
        assert smoothed[0, 1, 0, 0].item() == pytest.approx(0.975)
        assert smoothed[0, 0, 0, 0].item() == pytest.approx(0.025)
        assert float(smoothed.sum(dim=1)) == pytest.approx(1.0)


class TestTrainDae:
    def test_smoke_loss_decreases(self, tmp_path):
        split = small_split(num_cases=8)
        cfg = DaeTrainConfig(
            arch=ArchConfig(
                rank=2, in_channels=2, num_classes=1, base_width=4, depth=2,
                skip_connections=False, bottleneck_dim=32,
            ),
            max_iters=50,
            patch_size=(32, 32),
            seed=0,
            log_every=5,
        )
        result = train_dae(split, cfg, tmp_path / "dae.pt", log_path=tmp_path / "log.csv")
        rows = result["log_rows"]
        assert rows[-1]["total"] < rows[0]["total"]
        assert (tmp_path / "dae.pt").is_file()
        header = (tmp_path / "log.csv").read_text().splitlines()[0]
        assert header == "iteration,lr,mse,dice,total"

    def test_bitwise_deterministic(self, tmp_path, single_thread):
        split = small_split(num_cases=4)
        cfg = DaeTrainConfig(
            arch=DAE_ARCH, max_iters=12, patch_size=(16, 16), seed=5, log_every=1
        )
        a = train_dae(split, cfg, tmp_path / "a.pt")
        b = train_dae(split, cfg, tmp_path / "b.pt")
        assert a["final_loss"] == b["final_loss"]
        assert math.isfinite(a["final_loss"])

    def test_divergence_aborts(self, tmp_path):
        split = small_split(num_cases=4)
        cfg = DaeTrainConfig(
            arch=DAE_ARCH, max_iters=50, patch_size=(16, 16), seed=0, lr0=1e30
        )
        with pytest.raises(DivergenceError):
            train_dae(split, cfg, tmp_path / "d.pt")

    def test_requires_labeled_masks(self, tmp_path):
        with pytest.raises(ConfigError):
            train_dae(
                DatasetSplit(labeled=[], unlabeled=[]),
                DaeTrainConfig(arch=DAE_ARCH, max_iters=1, patch_size=(16, 16)),
                tmp_path / "x.pt",
            )

    def test_uses_only_labeled_masks(self, tmp_path):
        # The prior is image-free: zeroing every labeled image must not
        # change the trained parameters.
        split = small_split(num_cases=4)
        blanked = DatasetSplit(
            labeled=[
                (Volume(data=np.zeros_like(v.data), spacing=v.spacing, id=v.id), m)
                for v, m in split.labeled
            ],
            unlabeled=[],
        )
        cfg = DaeTrainConfig(arch=DAE_ARCH, max_iters=8, patch_size=(16, 16), seed=2)
        a = train_dae(split, cfg, tmp_path / "a.pt")
        b = train_dae(blanked, cfg, tmp_path / "b.pt")
        assert a["final_loss"] == b["final_loss"]
