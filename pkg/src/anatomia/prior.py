"""Training of the mask shape prior: a denoising autoencoder that maps
corrupted one-hot masks back to clean ones, optimized with MSE + soft Dice
under SGD with momentum and a halve-every-5000-iterations learning rate.

The prior is image-free: it consumes only labeled-split masks, never images
or unlabeled data, and is frozen before semi-supervised training starts.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .core import (
    DatasetSplit,
    LabelMask,
    ProbMap,
    Volume,
    argmax_labels,
    augment,
    one_hot,
    random_crop,
)
from .corruption import CorruptionPolicy, corrupt
from .errors import ConfigError, DivergenceError
from .losses import mse_reconstruction_loss, one_hot_tensor, soft_dice_loss
from .metrics import dice_score
from .nets import ArchConfig, DaeNet, build_dae, dae_map, save_checkpoint
from .seeding import spawn_rng, spawn_torch_rng

INPUT_SMOOTHING = 0.05


@dataclass
class DaeTrainConfig:
    arch: ArchConfig
    policy: CorruptionPolicy = field(default_factory=CorruptionPolicy)
    lr0: float = 0.1
    momentum: float = 0.9
    lr_halving_period: int = 5000
    max_iters: int = 1200
    batch_size: int = 4
    patch_size: tuple[int, ...] = (64, 64)
    seed: int = 0
    log_every: int = 10
    plateau_patience: int = 2000

    def __post_init__(self) -> None:
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.lr_halving_period < 1:
            raise ConfigError("lr_halving_period must be >= 1")
        if self.arch.skip_connections or self.arch.bottleneck_dim is None:
            raise ConfigError(
                "prior architecture needs skip_connections=False and a bottleneck_dim"
            )

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "policy": self.policy.to_dict(),
            "lr0": self.lr0,
            "momentum": self.momentum,
            "lr_halving_period": self.lr_halving_period,
            "max_iters": self.max_iters,
            "batch_size": self.batch_size,
            "patch_size": list(self.patch_size),
            "seed": self.seed,
            "log_every": self.log_every,
            "plateau_patience": self.plateau_patience,
        }


def dae_lr(t: int, lr0: float = 0.1, halving_period: int = 5000) -> float:
    """lr0 * 2^(-floor(t / halving_period))."""
    if t < 0:
        raise ConfigError("iteration must be >= 0")
    return lr0 * 2.0 ** (-(t // halving_period))


def smooth_one_hot(labels: torch.Tensor, num_channels: int, smoothing: float) -> torch.Tensor:
    """One-hot encoding nudged toward uniform so the prior also accepts the
    soft inputs it will see at semi-supervised time."""
    hard = one_hot_tensor(labels, num_channels)
    if smoothing <= 0:
        return hard
    return (1.0 - smoothing) * hard + smoothing / num_channels


def dae_loss(recon_probs: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    """MSE + soft Dice, equally weighted."""
    mse, dice = dae_loss_components(recon_probs, clean)
    return mse + dice


def dae_loss_components(
    recon_probs: torch.Tensor, clean: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    target = one_hot_tensor(clean, recon_probs.shape[1], dtype=recon_probs.dtype)
    return mse_reconstruction_loss(recon_probs, target), soft_dice_loss(recon_probs, target)


def _mask_as_pair(mask: LabelMask) -> tuple[Volume, LabelMask]:
    carrier = Volume(
        data=mask.data.astype(np.float32), spacing=(1.0,) * mask.data.ndim, id="mask"
    )
    return carrier, mask


def _sample_batch(
    masks: Sequence[LabelMask],
    cfg: DaeTrainConfig,
    rng_data: np.random.Generator,
    rng_corrupt: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw a batch of (corrupted smoothed one-hot, clean labels)."""
    num_channels = masks[0].num_classes + 1
    idx = rng_data.choice(len(masks), size=cfg.batch_size, replace=True)
    inputs, targets = [], []
    for i in idx:
        carrier, m = _mask_as_pair(masks[int(i)])
        carrier, m = random_crop(carrier, m, cfg.patch_size, rng_data)
        carrier, m = augment(carrier, m, rng_data)
        assert m is not None
        corrupted = corrupt(m, cfg.policy, rng_corrupt)
        targets.append(torch.from_numpy(m.data.astype(np.int64)))
        inputs.append(
            smooth_one_hot(
                torch.from_numpy(corrupted.data.astype(np.int64))[None],
                num_channels,
                INPUT_SMOOTHING,
            )[0]
        )
    return torch.stack(inputs), torch.stack(targets)


def train_dae(
    split: DatasetSplit,
    cfg: DaeTrainConfig,
    out_ckpt: str | Path,
    log_path: str | Path | None = None,
) -> dict:
    """Train the shape prior on labeled-split masks; returns a summary dict.

    Raises DivergenceError on a non-finite loss.
    """
    if split.n_labeled < 1:
        raise ConfigError("prior training needs at least one labeled mask")
    masks = [m for _, m in split.labeled]

    init_gen = spawn_torch_rng(cfg.seed, "dae-init")
    rng_data = spawn_rng(cfg.seed, "dae-data")
    rng_corrupt = spawn_rng(cfg.seed, "dae-corrupt")

    net = build_dae(cfg.arch, cfg.patch_size, init_gen)
    net.train()
    optimizer = torch.optim.SGD(net.parameters(), lr=cfg.lr0, momentum=cfg.momentum)

    rows: list[dict] = []
    best_loss = math.inf
    best_iter = 0
    final_loss = math.nan
    stop_iter = cfg.max_iters
    for t in range(cfg.max_iters):
        lr = dae_lr(t, cfg.lr0, cfg.lr_halving_period)
        for group in optimizer.param_groups:
            group["lr"] = lr
        inputs, targets = _sample_batch(masks, cfg, rng_data, rng_corrupt)
        logits = net(inputs)
        probs = torch.softmax(logits, dim=1)
        mse, dice = dae_loss_components(probs, targets)
        loss = mse + dice
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(
                f"prior training diverged at iteration {t}: loss={value}, lr={lr}"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        final_loss = value
        if t % cfg.log_every == 0 or t == cfg.max_iters - 1:
            rows.append(
                {
                    "iteration": t,
                    "lr": lr,
                    "mse": float(mse.detach()),
                    "dice": float(dice.detach()),
                    "total": value,
                }
            )
        if value < best_loss - 1e-6:
            best_loss = value
            best_iter = t
        if t - best_iter >= cfg.plateau_patience:
            stop_iter = t + 1
            break

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with log_path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["iteration", "lr", "mse", "dice", "total"])
            writer.writeheader()
            writer.writerows(rows)

    net.eval()
    save_checkpoint(
        out_ckpt,
        {
            "kind": "dae",
            "arch": cfg.arch.to_dict(),
            "patch_size": list(cfg.patch_size),
            "iteration": stop_iter,
            "model_state": net.state_dict(),
            "optimizer_state": optimizer.state_dict(),
            "rng_state": {
                "data": rng_data.bit_generator.state,
                "corrupt": rng_corrupt.bit_generator.state,
            },
            "config": cfg.to_dict(),
            "final_loss": final_loss,
        },
    )
    return {
        "iterations": stop_iter,
        "final_loss": final_loss,
        "best_loss": best_loss,
        "log_rows": rows,
        "checkpoint": str(out_ckpt),
    }


def denoising_gate(
    dae: DaeNet,
    masks: Sequence[LabelMask],
    policy: CorruptionPolicy,
    seed: int,
    patch_size: Sequence[int] | None = None,
) -> dict:
    """Compare DSC(reconstruction, clean) against DSC(corrupted, clean) on
    held-out masks; the prior must beat the identity map."""
    rng = spawn_rng(seed, "gate-corrupt")
    crop_rng = spawn_rng(seed, "gate-crop")
    size = tuple(patch_size) if patch_size is not None else dae.patch_size
    dsc_corrupted, dsc_recon = [], []
    for mask in masks:
        carrier, m = _mask_as_pair(mask)
        carrier, m = random_crop(carrier, m, size, crop_rng)
        assert m is not None
        corrupted = corrupt(m, policy, rng)
        recon = dae_map(
            dae,
            _probmap_from_smoothed(corrupted),
            noise_std=0.0,
        )
        recon_mask = argmax_labels(recon)
        classes = range(1, m.num_classes + 1)
        dsc_corrupted.append(float(np.mean([dice_score(corrupted, m, c) for c in classes])))
        dsc_recon.append(float(np.mean([dice_score(recon_mask, m, c) for c in classes])))
    return {
        "mean_dsc_corrupted": float(np.mean(dsc_corrupted)),
        "mean_dsc_reconstruction": float(np.mean(dsc_recon)),
        "num_cases": len(masks),
    }


def _probmap_from_smoothed(mask: LabelMask) -> ProbMap:
    data = one_hot(mask).data
    smoothed = (1.0 - INPUT_SMOOTHING) * data + INPUT_SMOOTHING / data.shape[0]
    return ProbMap(data=smoothed)
