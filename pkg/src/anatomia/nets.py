"""Segmentation backbone and mask autoencoder, plus sliding-window inference
and checkpoint I/O.

Both networks share an encoder-decoder trunk (per-level x2 downsampling,
channel doubling, instance normalization). The segmentation net keeps skip
connections; the autoencoder drops them and routes the deepest feature map
through a dense bottleneck of size d. Every module counts its forward calls
(one batched call = one count) so inference-cost claims are testable.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .core import ProbMap, Volume
from .errors import ConfigError, DataError

CHECKPOINT_FORMAT = "anatomia-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ArchConfig:
    """Shared architecture description for both network kinds."""

    rank: int = 2
    in_channels: int = 1
    num_classes: int = 1
    base_width: int = 8
    depth: int = 3
    dropout_rate: float = 0.0
    skip_connections: bool = True
    bottleneck_dim: int | None = None

    def __post_init__(self) -> None:
        if self.rank not in (2, 3):
            raise ConfigError("rank must be 2 or 3")
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.bottleneck_dim is not None and self.bottleneck_dim < 1:
            raise ConfigError("bottleneck_dim must be >= 1 when present")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.num_classes + 1

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(raw: dict) -> "ArchConfig":
        return ArchConfig(**raw)


def _conv_nd(rank: int):
    return nn.Conv2d if rank == 2 else nn.Conv3d


def _convt_nd(rank: int):
    return nn.ConvTranspose2d if rank == 2 else nn.ConvTranspose3d


def _norm_nd(rank: int):
    return nn.InstanceNorm2d if rank == 2 else nn.InstanceNorm3d


class SeededDropout(nn.Module):
    """Dropout driven by an explicit generator so no strategy ever touches
    the global RNG stream."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.generator: torch.Generator | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = (
            torch.rand(x.shape, generator=self.generator, dtype=x.dtype, device=x.device)
            >= self.p
        )
        return x * keep / (1.0 - self.p)


class _ConvBlock(nn.Module):
    def __init__(self, rank: int, in_ch: int, out_ch: int):
        super().__init__()
        conv, norm = _conv_nd(rank), _norm_nd(rank)
        self.block = nn.Sequential(
            conv(in_ch, out_ch, kernel_size=3, padding=1),
            norm(out_ch),
            nn.ReLU(inplace=True),
            conv(out_ch, out_ch, kernel_size=3, padding=1),
            norm(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class _Trunk(nn.Module):
    """Encoder/decoder scaffolding shared by both network kinds."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        rank = arch.rank
        widths = [arch.base_width * 2**i for i in range(arch.depth)]
        self.widths = widths

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        in_ch = arch.in_channels
        for i, w in enumerate(widths):
            self.enc_blocks.append(_ConvBlock(rank, in_ch, w))
            if i < arch.depth - 1:
                self.downs.append(_conv_nd(rank)(w, widths[i + 1], kernel_size=2, stride=2))
            in_ch = widths[i + 1] if i < arch.depth - 1 else w

        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in reversed(range(arch.depth - 1)):
            self.ups.append(_convt_nd(rank)(widths[i + 1], widths[i], kernel_size=2, stride=2))
            dec_in = widths[i] * 2 if arch.skip_connections else widths[i]
            self.dec_blocks.append(_ConvBlock(rank, dec_in, widths[i]))

        # Regularize the two deepest encoder and decoder stages.
        self.enc_drop_levels = {arch.depth - 1, arch.depth - 2}
        self.dec_drop_levels = {0, 1} if arch.depth >= 3 else {0}
        self.dropouts = nn.ModuleDict()
        if arch.dropout_rate > 0:
            for lvl in self.enc_drop_levels:
                self.dropouts[f"enc{lvl}"] = SeededDropout(arch.dropout_rate)
            for j in self.dec_drop_levels:
                self.dropouts[f"dec{j}"] = SeededDropout(arch.dropout_rate)

        self.head = _conv_nd(rank)(widths[0], arch.out_channels, kernel_size=1)

    def set_dropout_rng(self, generator: torch.Generator | None) -> None:
        for mod in self.modules():
            if isinstance(mod, SeededDropout):
                mod.generator = generator

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        skips = []
        for i, block in enumerate(self.enc_blocks):
            x = block(x)
            if f"enc{i}" in self.dropouts:
                x = self.dropouts[f"enc{i}"](x)
            if i < self.arch.depth - 1:
                skips.append(x)
                x = self.downs[i](x)
        return x, skips

    def decode(self, x: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        for j, (up, block) in enumerate(zip(self.ups, self.dec_blocks)):
            x = up(x)
            if self.arch.skip_connections:
                x = torch.cat([skips[-(j + 1)], x], dim=1)
            x = block(x)
            if f"dec{j}" in self.dropouts:
                x = self.dropouts[f"dec{j}"](x)
        return self.head(x)


def _check_spatial(arch: ArchConfig, x: torch.Tensor) -> None:
    factor = arch.downsample_factor
    spatial = x.shape[2:]
    if len(spatial) != arch.rank:
        raise DataError(f"input rank {len(spatial)} != arch rank {arch.rank}")
    for s in spatial:
        if s % factor != 0:
            raise DataError(
                f"spatial shape {tuple(spatial)} not divisible by {factor}"
            )


class SegNet(nn.Module):
    """Encoder-decoder with skip connections; per-voxel class logits."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        if not arch.skip_connections or arch.bottleneck_dim is not None:
            raise ConfigError("segmentation net needs skips and no dense bottleneck")
        self.arch = arch
        self.trunk = _Trunk(arch)
        self.forward_calls = 0

    def set_dropout_rng(self, generator: torch.Generator | None) -> None:
        self.trunk.set_dropout_rng(generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_spatial(self.arch, x)
        self.forward_calls += 1
        feats, skips = self.trunk.encode(x)
        return self.trunk.decode(feats, skips)


class DaeNet(nn.Module):
    """Skip-free trunk with a dense bottleneck; reconstructs mask
    probabilities from corrupted ones on a fixed spatial grid."""

    def __init__(self, arch: ArchConfig, patch_size: Sequence[int]):
        super().__init__()
        if arch.skip_connections or arch.bottleneck_dim is None:
            raise ConfigError("autoencoder needs skip_connections=False and a bottleneck_dim")
        self.arch = arch
        self.patch_size = tuple(int(s) for s in patch_size)
        if len(self.patch_size) != arch.rank:
            raise ConfigError("patch_size rank must match arch rank")
        factor = arch.downsample_factor
        if any(s % factor != 0 for s in self.patch_size):
            raise ConfigError(f"patch_size must be divisible by {factor}")
        self.trunk = _Trunk(arch)
        grid = tuple(s // factor for s in self.patch_size)
        flat = self.trunk.widths[-1] * int(np.prod(grid))
        self.bottleneck_grid = grid
        self.to_latent = nn.Linear(flat, arch.bottleneck_dim)
        self.from_latent = nn.Linear(arch.bottleneck_dim, flat)
        self.forward_calls = 0

    def encode_latent(self, x: torch.Tensor) -> torch.Tensor:
        feats, _ = self.trunk.encode(x)
        return self.to_latent(feats.flatten(1))

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        batch = z.shape[0]
        feats = self.from_latent(z).view(
            batch, self.trunk.widths[-1], *self.bottleneck_grid
        )
        return self.trunk.decode(feats, [])

    def forward(
        self,
        x: torch.Tensor,
        noise_std: float = 0.0,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        if x.shape[2:] != torch.Size(self.patch_size):
            raise DataError(
                f"autoencoder expects spatial shape {self.patch_size}, got {tuple(x.shape[2:])}"
            )
        self.forward_calls += 1
        z = self.encode_latent(x)
        if noise_std > 0:
            # Noise in normalized latent units: scaled by each sample's RMS.
            rms = z.detach().pow(2).mean(dim=1, keepdim=True).sqrt()
            eps = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
            z = z + noise_std * rms * eps
        return self.decode_latent(z)


def _init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in-scaled normal init, reproducible from the given generator."""
    conv_types = (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d, nn.Linear)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, conv_types):
                if isinstance(m, (nn.ConvTranspose2d, nn.ConvTranspose3d)):
                    fan_in = m.weight.shape[0] * int(np.prod(m.kernel_size))
                elif isinstance(m, nn.Linear):
                    fan_in = m.weight.shape[1]
                else:
                    fan_in = m.weight.shape[1] * int(np.prod(m.kernel_size))
                std = math.sqrt(2.0 / max(fan_in, 1))
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def build_segnet(arch: ArchConfig, generator: torch.Generator) -> SegNet:
    net = SegNet(arch)
    _init_parameters(net, generator)
    return net


def build_dae(
    arch: ArchConfig, patch_size: Sequence[int], generator: torch.Generator
) -> DaeNet:
    net = DaeNet(arch, patch_size)
    _init_parameters(net, generator)
    return net


def forward(model: nn.Module, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Run the model; returns (logits, softmax probabilities)."""
    logits = model(x)
    return logits, torch.softmax(logits, dim=1)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Autoencoder mapping of probability fields
# ---------------------------------------------------------------------------
def _resample(probs: torch.Tensor, size: tuple[int, ...]) -> torch.Tensor:
    if probs.shape[2:] == torch.Size(size):
        return probs
    mode = "bilinear" if probs.dim() == 4 else "trilinear"
    return F.interpolate(probs, size=size, mode=mode, align_corners=False)


def dae_map_tensor(
    dae: DaeNet,
    probs: torch.Tensor,
    noise_std: float = 0.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Map (B, C+1, *spatial) probabilities through the autoencoder in one
    forward pass, resampling to/from the trained grid as needed."""
    original = probs.shape[2:]
    x = _resample(probs, dae.patch_size)
    logits = dae(x, noise_std=noise_std, generator=generator)
    recon = torch.softmax(logits, dim=1)
    recon = _resample(recon, tuple(original))
    return recon / recon.sum(dim=1, keepdim=True).clamp_min(1e-12)


def dae_map(
    dae: DaeNet,
    p: ProbMap,
    noise_std: float = 0.0,
    generator: torch.Generator | None = None,
) -> ProbMap:
    """ProbMap-level wrapper of dae_map_tensor (single inference step)."""
    x = torch.from_numpy(p.data[None].astype(np.float32))
    dae.eval()
    with torch.no_grad():
        recon = dae_map_tensor(dae, x, noise_std=noise_std, generator=generator)
    return ProbMap(data=recon[0].double().numpy())


# ---------------------------------------------------------------------------
# Sliding-window inference
# ---------------------------------------------------------------------------
def sliding_window_infer(
    model: nn.Module,
    v: Volume,
    patch_size: Sequence[int],
    stride: Sequence[int] | None = None,
) -> ProbMap:
    """Tile the volume (zero-padded to cover), average softmax probabilities
    over overlaps, renormalize."""
    patch = tuple(int(s) for s in patch_size)
    stride = patch if stride is None else tuple(int(s) for s in stride)
    if len(patch) != v.data.ndim:
        raise DataError("patch rank must match volume rank")
    if any(st > p for st, p in zip(stride, patch)):
        raise ConfigError("stride must not exceed patch size")
    if any(st < 1 for st in stride):
        raise ConfigError("stride must be >= 1")

    padded_shape = tuple(max(e, p) for e, p in zip(v.shape, patch))
    data = np.zeros(padded_shape, dtype=np.float32)
    data[tuple(slice(0, e) for e in v.shape)] = v.data

    positions_per_axis = []
    for extent, p, st in zip(padded_shape, patch, stride):
        last = extent - p
        pos = list(range(0, last + 1, st))
        if pos[-1] != last:
            pos.append(last)
        positions_per_axis.append(pos)

    accum = None
    counts = np.zeros(padded_shape, dtype=np.float64)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for origin in np.ndindex(*[len(p) for p in positions_per_axis]):
            offsets = tuple(positions_per_axis[ax][i] for ax, i in enumerate(origin))
            window = tuple(slice(o, o + p) for o, p in zip(offsets, patch))
            tile = torch.from_numpy(data[window][None, None])
            probs = torch.softmax(model(tile), dim=1)[0].double().numpy()
            if accum is None:
                accum = np.zeros((probs.shape[0],) + padded_shape, dtype=np.float64)
            accum[(slice(None),) + window] += probs
            counts[window] += 1.0
    if was_training:
        model.train()
    assert accum is not None
    accum /= counts[None]
    crop = (slice(None),) + tuple(slice(0, e) for e in v.shape)
    result = accum[crop]
    result /= result.sum(axis=0, keepdims=True)
    return ProbMap(data=result)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
def save_checkpoint(path: str | Path, payload: dict) -> None:
    """Single binary container with a versioned header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}
    record.update(payload)
    torch.save(record, path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    record = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(record, dict) or record.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not an anatomia checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {record.get('version')}")
    return record


def load_dae_checkpoint(path: str | Path) -> DaeNet:
    """Rebuild a frozen autoencoder from its checkpoint."""
    record = load_checkpoint(path)
    if record.get("kind") != "dae":
        raise DataError(f"{path} does not hold an autoencoder checkpoint")
    arch = ArchConfig.from_dict(record["arch"])
    net = DaeNet(arch, record["patch_size"])
    net.load_state_dict(record["model_state"])
    net.eval()
    for param in net.parameters():
        param.requires_grad_(False)
    return net


class WallClock:
    """Accumulates wall-clock milliseconds across labelled sections."""

    def __init__(self) -> None:
        self.start = time.perf_counter()

    def lap_ms(self) -> float:
        now = time.perf_counter()
        elapsed = (now - self.start) * 1000.0
        self.start = now
        return elapsed
