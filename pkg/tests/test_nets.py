import numpy as np
import pytest
import torch
from torch import nn

from anatomia.core import LabelMask, ProbMap, Volume, one_hot
from anatomia.errors import ConfigError, DataError
from anatomia.nets import (
    ArchConfig,
    build_dae,
    build_segnet,
    dae_map,
    forward,
    load_checkpoint,
    load_dae_checkpoint,
    parameter_count,
    save_checkpoint,
    sliding_window_infer,
)
from anatomia.seeding import spawn_torch_rng

SEG_ARCH = ArchConfig(rank=2, in_channels=1, num_classes=1, base_width=8, depth=3)
TINY_ARCH = ArchConfig(rank=2, in_channels=1, num_classes=1, base_width=2, depth=2)
DAE_ARCH = ArchConfig(
    rank=2, in_channels=2, num_classes=1, base_width=8, depth=3,
    skip_connections=False, bottleneck_dim=128,
)


class ConstantNet(nn.Module):
    """Stub emitting fixed logits regardless of input."""

    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float32)

    def forward(self, x):
        shape = (x.shape[0], len(self.logits)) + tuple(x.shape[2:])
        return self.logits.view(1, -1, *([1] * (x.dim() - 2))).expand(shape)


class TestArchConfig:
    def test_rejects_shallow_depth(self):
        with pytest.raises(ConfigError):
            ArchConfig(depth=1)

    def test_segnet_rejects_bottleneck(self):
        with pytest.raises(ConfigError):
            build_segnet(
                ArchConfig(bottleneck_dim=4), spawn_torch_rng(0, "a")
            )

    def test_dae_requires_bottleneck(self):
        with pytest.raises(ConfigError):
            build_dae(
                ArchConfig(skip_connections=False), (32, 32), spawn_torch_rng(0, "a")
            )

    def test_round_trip(self):
        assert ArchConfig.from_dict(SEG_ARCH.to_dict()) == SEG_ARCH


class TestBuild:
    def test_logit_shape_contract(self):
        net = build_segnet(SEG_ARCH, spawn_torch_rng(0, "b"))
        logits = net(torch.zeros(1, 1, 32, 32))
        assert tuple(logits.shape) == (1, 2, 32, 32)

    def test_same_seed_identical_parameters(self):
        a = build_segnet(SEG_ARCH, spawn_torch_rng(7, "init"))
        b = build_segnet(SEG_ARCH, spawn_torch_rng(7, "init"))
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_parameter_counts_pinned(self):
        assert parameter_count(build_segnet(SEG_ARCH, spawn_torch_rng(0, "c"))) == 37698
        assert parameter_count(build_segnet(TINY_ARCH, spawn_torch_rng(0, "c"))) == 542
        assert (
            parameter_count(build_dae(DAE_ARCH, (64, 64), spawn_torch_rng(0, "c")))
            == 2140362
        )

    def test_dae_large_latent_builds(self):
        arch = ArchConfig(
            rank=2, in_channels=5, num_classes=4, base_width=8, depth=3,
            skip_connections=False, bottleneck_dim=512,
        )
        net = build_dae(arch, (64, 64), spawn_torch_rng(0, "d"))
        assert parameter_count(net) == 8432445
        out = net(torch.rand(1, 5, 64, 64))
        assert tuple(out.shape) == (1, 5, 64, 64)


class TestForward:
    def test_softmax_sums_to_one(self):
        net = build_segnet(SEG_ARCH, spawn_torch_rng(1, "e"))
        _, probs = forward(net, torch.randn(2, 1, 32, 32))
        sums = probs.sum(dim=1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)

    def test_eval_mode_deterministic(self):
        arch = ArchConfig(rank=2, num_classes=1, base_width=4, depth=2, dropout_rate=0.5)
        net = build_segnet(arch, spawn_torch_rng(2, "f"))
        net.set_dropout_rng(spawn_torch_rng(2, "drop"))
        net.eval()
        x = torch.randn(1, 1, 16, 16)
        assert torch.equal(net(x), net(x))

    def test_train_mode_dropout_stochastic(self):
        arch = ArchConfig(rank=2, num_classes=1, base_width=4, depth=2, dropout_rate=0.5)
        net = build_segnet(arch, spawn_torch_rng(2, "g"))
        net.set_dropout_rng(spawn_torch_rng(2, "drop"))
        net.train()
        x = torch.randn(1, 1, 16, 16)
        outputs = [net(x) for _ in range(10)]
        distinct = any(not torch.equal(outputs[0], o) for o in outputs[1:])
        assert distinct

    def test_indivisible_shape_is_error(self):
        net = build_segnet(SEG_ARCH, spawn_torch_rng(3, "h"))
        with pytest.raises(DataError):
            net(torch.zeros(1, 1, 30, 30))


class TestGradients:
    def test_matches_central_finite_differences(self):
        # <=1e3-parameter net, double precision, h=1e-3, relative 1e-4.
        from conftest import assert_gradients_match_fd

        torch.manual_seed(0)
        net = build_segnet(TINY_ARCH, spawn_torch_rng(5, "grad")).double()
        assert parameter_count(net) <= 1000
        x = torch.randn(1, 1, 8, 8, dtype=torch.float64)
        weight = torch.randn(1, 2, 8, 8, dtype=torch.float64)

        def scalar():
            return (torch.softmax(net(x), dim=1) * weight).sum()

        net.zero_grad()
        scalar().backward()
        assert_gradients_match_fd(net.parameters(), scalar)


class TestDaeMap:
    def test_zero_noise_deterministic(self):
        dae = build_dae(DAE_ARCH, (64, 64), spawn_torch_rng(4, "i"))
        mask = LabelMask(data=(np.arange(64 * 64).reshape(64, 64) % 2).astype(np.uint8), num_classes=1)
        p = one_hot(mask)
        a = dae_map(dae, p, noise_std=0.0)
        b = dae_map(dae, p, noise_std=0.0)
        assert np.array_equal(a.data, b.data)

    def test_output_is_valid_probmap(self):
        dae = build_dae(DAE_ARCH, (64, 64), spawn_torch_rng(4, "j"))
        p = ProbMap(data=np.full((2, 96, 96), 0.5))
        recon = dae_map(dae, p)
        assert recon.data.shape == (2, 96, 96)

    def test_counts_single_forward(self):
        dae = build_dae(DAE_ARCH, (64, 64), spawn_torch_rng(4, "k"))
        p = ProbMap(data=np.full((2, 64, 64), 0.5))
        before = dae.forward_calls
        dae_map(dae, p, noise_std=0.1, generator=spawn_torch_rng(0, "noise"))
        assert dae.forward_calls == before + 1

    def test_latent_noise_changes_output(self):
        dae = build_dae(DAE_ARCH, (64, 64), spawn_torch_rng(4, "l"))
        p = ProbMap(data=np.full((2, 64, 64), 0.5))
        a = dae_map(dae, p, noise_std=0.5, generator=spawn_torch_rng(1, "n"))
        b = dae_map(dae, p, noise_std=0.0)
        assert not np.array_equal(a.data, b.data)


class TestSlidingWindow:
    def test_full_patch_equals_single_forward(self):
        net = build_segnet(SEG_ARCH, spawn_torch_rng(6, "m"))
        volume = Volume(data=np.random.default_rng(0).random((32, 32), dtype=np.float32), spacing=(1, 1))
        probs = sliding_window_infer(net, volume, (32, 32))
        net.eval()
        with torch.no_grad():
            direct = torch.softmax(net(torch.from_numpy(volume.data[None, None])), dim=1)[0]
        assert np.allclose(probs.data, direct.double().numpy(), atol=1e-6)

    def test_constant_model_constant_output(self):
        stub = ConstantNet([0.2, 1.7])
        volume = Volume(data=np.zeros((20, 28), dtype=np.float32), spacing=(1, 1))
        probs = sliding_window_infer(stub, volume, (8, 8), (4, 4))
        expected = torch.softmax(torch.tensor([0.2, 1.7]), dim=0).numpy()
        for c in (0, 1):
            assert np.allclose(probs.data[c], expected[c], atol=1e-9)

    def test_coverage_oracle_half_stride(self):
        # Independent tiling oracle: every voxel covered at least once.
        extent, patch, stride = 21, 8, 4
        positions = list(range(0, extent - patch + 1, stride))
        if positions[-1] != extent - patch:
            positions.append(extent - patch)
        coverage = np.zeros(extent)
        for p in positions:
            coverage[p : p + patch] += 1
        assert coverage.min() >= 1
        stub = ConstantNet([0.0, 0.0])
        volume = Volume(data=np.zeros((21, 21), dtype=np.float32), spacing=(1, 1))
        probs = sliding_window_infer(stub, volume, (8, 8), (4, 4))
        assert np.allclose(probs.data, 0.5)

    def test_stride_above_patch_rejected(self):
        stub = ConstantNet([0.0, 0.0])
        volume = Volume(data=np.zeros((16, 16), dtype=np.float32), spacing=(1, 1))
        with pytest.raises(ConfigError):
            sliding_window_infer(stub, volume, (8, 8), (9, 9))


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        dae = build_dae(DAE_ARCH, (64, 64), spawn_torch_rng(8, "p"))
        save_checkpoint(
            tmp_path / "dae.pt",
            {
                "kind": "dae",
                "arch": DAE_ARCH.to_dict(),
                "patch_size": [64, 64],
                "model_state": dae.state_dict(),
                "iteration": 3,
            },
        )
        loaded = load_dae_checkpoint(tmp_path / "dae.pt")
        for pa, pb in zip(dae.parameters(), loaded.parameters()):
            assert torch.equal(pa, pb)
        record = load_checkpoint(tmp_path / "dae.pt")
        assert record["iteration"] == 3 and record["version"] == 1

    def test_rejects_foreign_files(self, tmp_path):
        torch.save({"something": 1}, tmp_path / "x.pt")
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "x.pt")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "nope.pt")
