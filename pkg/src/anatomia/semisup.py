"""Mean-teacher semi-supervised trainer with pluggable uncertainty
strategies.

Strategies: ``anatomical`` (reconstruction discrepancy from the mask prior,
soft e^{-gamma*U} weighting), ``entropy`` (entropy of the prior's
reconstruction, same soft weighting), ``threshold`` (hard filtering of the
reconstruction discrepancy under a ramped threshold), ``mcdo`` (K stochastic
dropout passes, entropy of the mean, hard threshold), ``none`` (plain mean
teacher), and ``supervised`` (labeled data only; the lower bound).

Every random decision draws from its own derived stream, so runs that differ
only in strategy consume identical data/noise streams; with gamma=0 the
anatomical run is bitwise identical to plain mean teacher.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .core import (
    DatasetSplit,
    LabelMask,
    ProbMap,
    UncertaintyMap,
    Volume,
    argmax_labels,
    augment,
    random_crop,
)
from .errors import ConfigError, DataError, DivergenceError
from .losses import (
    cross_entropy_loss,
    one_hot_tensor,
    soft_dice_loss,
    squared_error_field,
)
from .metrics import dice_score
from .nets import (
    ArchConfig,
    DaeNet,
    SegNet,
    WallClock,
    build_segnet,
    dae_map_tensor,
    load_checkpoint,
    load_dae_checkpoint,
    save_checkpoint,
    sliding_window_infer,
)
from .seeding import spawn_rng, spawn_torch_rng

STRATEGIES = ("anatomical", "entropy", "threshold", "mcdo", "none", "supervised")
DAE_STRATEGIES = ("anatomical", "entropy", "threshold")

# Supremum of the channel-summed squared difference between two
# distributions on >= 2 classes; initial threshold cap for our uncertainty.
SQUARED_DIFF_CAP = 2.0


@dataclass
class SslConfig:
    arch: ArchConfig
    strategy: str = "anatomical"
    dae_ckpt: str | None = None
    alpha: float = 0.99
    beta: float = 0.1
    rampup_rate: float = 5.0
    gamma: float = 1.0
    mcdo_passes: int = 8
    latent_noise_std: float = 0.1
    input_noise_std: float = 0.05
    lr0: float = 0.1
    momentum: float = 0.9
    t_max: int = 400
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    patch_size: tuple[int, ...] = (64, 64)
    seed: int = 0
    model_selection: str = "auto"
    val_every: int = 50
    checkpoint_every: int = 0
    threshold_override: float | None = None

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0 <= self.alpha < 1:
            raise ConfigError("alpha must lie in [0, 1)")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError("beta and gamma must be >= 0")
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1")
        if self.batch_labeled != 2 or self.batch_unlabeled != 2:
            raise ConfigError("batch composition is fixed at 2 labeled + 2 unlabeled")
        if self.mcdo_passes < 2:
            raise ConfigError("mcdo needs at least 2 stochastic passes")
        if self.model_selection not in ("auto", "last-iteration", "best-val"):
            raise ConfigError("model_selection must be auto, last-iteration, or best-val")
        if self.strategy in DAE_STRATEGIES and not self.dae_ckpt:
            raise ConfigError(f"strategy {self.strategy!r} requires a dae_ckpt")

    def to_dict(self) -> dict:
        out = {
            "arch": self.arch.to_dict(),
            "strategy": self.strategy,
            "dae_ckpt": self.dae_ckpt,
            "alpha": self.alpha,
            "beta": self.beta,
            "rampup_rate": self.rampup_rate,
            "gamma": self.gamma,
            "mcdo_passes": self.mcdo_passes,
            "latent_noise_std": self.latent_noise_std,
            "input_noise_std": self.input_noise_std,
            "lr0": self.lr0,
            "momentum": self.momentum,
            "t_max": self.t_max,
            "batch_labeled": self.batch_labeled,
            "batch_unlabeled": self.batch_unlabeled,
            "patch_size": list(self.patch_size),
            "seed": self.seed,
            "model_selection": self.model_selection,
            "val_every": self.val_every,
            "checkpoint_every": self.checkpoint_every,
            "threshold_override": self.threshold_override,
        }
        return out


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------
def rampup_weight(t: float, t_max: float, beta: float, rate: float) -> float:
    """beta * exp(-rate * (1 - t/t_max)^2); reaches beta exactly at t_max."""
    if not 0 <= t <= t_max:
        raise ConfigError(f"iteration {t} outside [0, {t_max}]")
    return beta * math.exp(-rate * (1.0 - t / t_max) ** 2)


def cosine_lr(t: float, t_max: float, lr0: float) -> float:
    """Cosine annealing from lr0 at t=0 to exactly 0 at t=t_max."""
    if not 0 <= t <= t_max:
        raise ConfigError(f"iteration {t} outside [0, {t_max}]")
    return lr0 * (1.0 + math.cos(math.pi * t / t_max)) / 2.0


def threshold_schedule(t: float, t_max: float, u_cap: float) -> float:
    """Ramped hard-filter threshold: 0.7517*u_cap at t=0 up to u_cap."""
    if u_cap <= 0:
        raise ConfigError("threshold cap must be > 0")
    return (0.75 + 0.25 * math.exp(-5.0 * (1.0 - t / t_max) ** 2)) * u_cap


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, alpha: float) -> None:
    """theta_T <- alpha * theta_T + (1 - alpha) * theta_S, elementwise."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise DataError("teacher/student parameter trees differ")
    with torch.no_grad():
        for name, tp in t_params.items():
            sp = s_params[name]
            if tp.shape != sp.shape:
                raise DataError(f"parameter {name} shape mismatch: {tp.shape} vs {sp.shape}")
            tp.mul_(alpha).add_(sp, alpha=1.0 - alpha)
        for (tn, tb), (sn, sb) in zip(teacher.named_buffers(), student.named_buffers()):
            if tn != sn or tb.shape != sb.shape:
                raise DataError("teacher/student buffer trees differ")
            if tb.dtype.is_floating_point:
                tb.mul_(alpha).add_(sb, alpha=1.0 - alpha)
            else:
                tb.copy_(sb)


# ---------------------------------------------------------------------------
# Losses and uncertainty
# ---------------------------------------------------------------------------
def supervised_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross entropy plus soft Dice, equally weighted."""
    probs = torch.softmax(logits, dim=1)
    target = one_hot_tensor(labels, logits.shape[1], dtype=probs.dtype)
    return cross_entropy_loss(logits, labels) + soft_dice_loss(probs, target)


def consistency_loss(
    p_student: torch.Tensor, p_teacher: torch.Tensor, weights: torch.Tensor
) -> torch.Tensor:
    """Weighted mean of channel-summed squared differences; the teacher side
    carries no gradient."""
    if p_student.shape != p_teacher.shape:
        raise DataError("student/teacher probability shapes differ")
    total = weights.sum()
    if float(total) == 0.0:
        raise DataError("consistency weights are all zero")
    diff = squared_error_field(p_student, p_teacher.detach())
    return (weights * diff).sum() / total


def threshold_consistency(
    p_student: torch.Tensor,
    p_teacher: torch.Tensor,
    uncertainty: torch.Tensor,
    threshold: float,
) -> torch.Tensor:
    """Consistency with binary weights 1[U < H]; zero when nothing passes."""
    if threshold <= 0:
        raise ConfigError("threshold must be > 0")
    weights = (uncertainty < threshold).to(p_student.dtype)
    if float(weights.sum()) == 0.0:
        return torch.zeros((), dtype=p_student.dtype)
    return consistency_loss(p_student, p_teacher, weights)


def reliability_weights_tensor(uncertainty: torch.Tensor, gamma: float) -> torch.Tensor:
    if gamma < 0:
        raise ConfigError("gamma must be >= 0")
    return torch.exp(-gamma * uncertainty)


def entropy_tensor(probs: torch.Tensor) -> torch.Tensor:
    """Per-voxel predictive entropy, natural log, 0*log(0) := 0."""
    plogp = torch.where(probs > 0, probs * torch.log(probs), torch.zeros_like(probs))
    return -plogp.sum(dim=1)


def uncertainty_from_reconstruction(p: ProbMap, recon: ProbMap) -> UncertaintyMap:
    """Channel-summed squared difference between a prediction and its
    prior-reconstructed plausible version."""
    if p.data.shape != recon.data.shape:
        raise DataError("probability map shapes differ")
    return UncertaintyMap(data=((recon.data - p.data) ** 2).sum(axis=0))


def uncertainty_entropy(p: ProbMap) -> UncertaintyMap:
    data = p.data
    plogp = np.where(data > 0, data * np.log(data), 0.0)
    return UncertaintyMap(data=-plogp.sum(axis=0))


def reliability_weights(u: UncertaintyMap, gamma: float) -> np.ndarray:
    if gamma < 0:
        raise ConfigError("gamma must be >= 0")
    return np.exp(-gamma * u.data)


def mcdo_uncertainty(
    teacher: SegNet,
    x: torch.Tensor,
    passes: int,
    dropout_gen: torch.Generator,
    noise_gen: torch.Generator | None = None,
    input_noise_std: float = 0.0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """K stochastic dropout forwards; returns (mean probs, entropy of mean).

    Exactly `passes` teacher forwards are counted.
    """
    if teacher.arch.dropout_rate <= 0:
        raise ConfigError("mcdo uncertainty needs a teacher with dropout_rate > 0")
    if passes < 2:
        raise ConfigError("mcdo needs at least 2 passes")
    teacher.set_dropout_rng(dropout_gen)
    was_training = teacher.training
    teacher.train()
    acc = None
    with torch.no_grad():
        for _ in range(passes):
            xin = x
            if input_noise_std > 0 and noise_gen is not None:
                noise = torch.randn(x.shape, generator=noise_gen, dtype=x.dtype)
                xin = x + input_noise_std * noise
            probs = torch.softmax(teacher(xin), dim=1)
            acc = probs if acc is None else acc + probs
    if not was_training:
        teacher.eval()
    assert acc is not None
    mean = acc / passes
    return mean, entropy_tensor(mean)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------
def _sample_patches(
    split: DatasetSplit,
    cfg: SslConfig,
    rng: np.random.Generator,
    labeled_count: int,
    unlabeled_count: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw (labeled_count + unlabeled_count) augmented patches; returns the
    image batch and the labels of the labeled part."""
    images, labels = [], []
    lab_idx = rng.choice(split.n_labeled, size=labeled_count, replace=True)
    for i in lab_idx:
        v, m = split.labeled[int(i)]
        v, m = random_crop(v, m, cfg.patch_size, rng)
        v, m = augment(v, m, rng)
        assert m is not None
        images.append(torch.from_numpy(v.data.astype(np.float32))[None])
        labels.append(torch.from_numpy(m.data.astype(np.int64)))
    if unlabeled_count:
        unl_idx = rng.choice(split.m_unlabeled, size=unlabeled_count, replace=True)
        for i in unl_idx:
            v = split.unlabeled[int(i)]
            v, _ = random_crop(v, None, cfg.patch_size, rng)
            v, _ = augment(v, None, rng)
            images.append(torch.from_numpy(v.data.astype(np.float32))[None])
    return torch.stack(images), torch.stack(labels)


def mean_dsc_on_cases(
    model: torch.nn.Module,
    cases: Sequence[tuple[Volume, LabelMask]],
    patch_size: Sequence[int],
    stride: Sequence[int] | None = None,
) -> float:
    """Mean foreground DSC over cases via sliding-window inference."""
    scores = []
    for volume, mask in cases:
        probs = sliding_window_infer(model, volume, patch_size, stride)
        pred = argmax_labels(probs)
        classes = range(1, mask.num_classes + 1)
        scores.append(float(np.mean([dice_score(pred, mask, c) for c in classes])))
    return float(np.mean(scores))


def train_ssl(
    split: DatasetSplit,
    cfg: SslConfig,
    out_dir: str | Path,
) -> dict:
    """Run mean-teacher training; writes ssl_log.csv and checkpoint.pt under
    out_dir and returns a summary dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if split.n_labeled < 1:
        raise ConfigError("training needs at least one labeled case")
    # Consistency sums over labeled and unlabeled samples alike, so an
    # empty unlabeled pool is legal: it degenerates to labeled-only
    # regularization.
    uses_consistency = cfg.strategy != "supervised"

    arch = cfg.arch
    if cfg.strategy == "mcdo" and arch.dropout_rate == 0:
        arch = replace(arch, dropout_rate=0.5)

    init_gen = spawn_torch_rng(cfg.seed, "ssl-init")
    rng_data = spawn_rng(cfg.seed, "ssl-data")
    gen_student_noise = spawn_torch_rng(cfg.seed, "ssl-student-noise")
    gen_teacher_noise = spawn_torch_rng(cfg.seed, "ssl-teacher-noise")
    gen_latent = spawn_torch_rng(cfg.seed, "ssl-latent")
    gen_dropout = spawn_torch_rng(cfg.seed, "ssl-dropout")

    student = build_segnet(arch, init_gen)
    teacher = build_segnet(arch, init_gen)
    teacher.load_state_dict(student.state_dict())
    for p in teacher.parameters():
        p.requires_grad_(False)
    student.set_dropout_rng(gen_dropout)

    dae: DaeNet | None = None
    if cfg.strategy in DAE_STRATEGIES:
        dae = load_dae_checkpoint(cfg.dae_ckpt)

    optimizer = torch.optim.SGD(student.parameters(), lr=cfg.lr0, momentum=cfg.momentum)

    if cfg.model_selection == "auto":
        selection = "best-val" if split.val else "last-iteration"
    else:
        selection = cfg.model_selection
    if selection == "best-val" and not split.val:
        raise ConfigError("best-val selection requires a validation split")

    # Threshold cap starts at the theoretical supremum of the uncertainty in
    # play (entropy for mcdo, squared difference otherwise), then tracks the
    # running max of observed values.
    u_cap = math.log(arch.out_channels) if cfg.strategy == "mcdo" else SQUARED_DIFF_CAP

    log_path = out_dir / "ssl_log.csv"
    fieldnames = [
        "iteration",
        "lambda_c",
        "loss_supervised",
        "loss_consistency",
        "lr",
        "forwards_student",
        "forwards_teacher",
        "forwards_dae",
        "wall_ms",
    ]
    best_val = -math.inf
    best_state: dict | None = None
    best_iter = -1
    clock = WallClock()

    with log_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for t in range(cfg.t_max):
            clock.lap_ms()
            lr = cosine_lr(t, cfg.t_max, cfg.lr0)
            for group in optimizer.param_groups:
                group["lr"] = lr
            student_calls0 = student.forward_calls
            teacher_calls0 = teacher.forward_calls
            dae_calls0 = dae.forward_calls if dae is not None else 0

            unlabeled_count = cfg.batch_unlabeled if uses_consistency and split.m_unlabeled else 0
            labeled_count = cfg.batch_labeled
            x, labels = _sample_patches(split, cfg, rng_data, labeled_count, unlabeled_count)

            student.train()
            x_student = x
            if cfg.input_noise_std > 0:
                noise = torch.randn(x.shape, generator=gen_student_noise, dtype=x.dtype)
                x_student = x + cfg.input_noise_std * noise
            logits_s = student(x_student)
            probs_s = torch.softmax(logits_s, dim=1)
            loss_s = supervised_loss(logits_s[:labeled_count], labels)

            lam = rampup_weight(t, cfg.t_max, cfg.beta, cfg.rampup_rate)
            loss_c = torch.zeros((), dtype=probs_s.dtype)
            if uses_consistency:
                if cfg.strategy == "mcdo":
                    p_teacher, u_field = mcdo_uncertainty(
                        teacher,
                        x,
                        cfg.mcdo_passes,
                        gen_dropout,
                        gen_teacher_noise,
                        cfg.input_noise_std,
                    )
                    u_cap = max(u_cap, float(u_field.max()))
                    threshold = (
                        cfg.threshold_override
                        if cfg.threshold_override is not None
                        else threshold_schedule(t, cfg.t_max, u_cap)
                    )
                    loss_c = threshold_consistency(probs_s, p_teacher, u_field, threshold)
                else:
                    teacher.eval()
                    with torch.no_grad():
                        x_teacher = x
                        if cfg.input_noise_std > 0:
                            noise = torch.randn(
                                x.shape, generator=gen_teacher_noise, dtype=x.dtype
                            )
                            x_teacher = x + cfg.input_noise_std * noise
                        p_teacher = torch.softmax(teacher(x_teacher), dim=1)
                    if cfg.strategy == "none":
                        weights = torch.ones(
                            p_teacher.shape[:1] + p_teacher.shape[2:], dtype=p_teacher.dtype
                        )
                        loss_c = consistency_loss(probs_s, p_teacher, weights)
                    else:
                        assert dae is not None
                        with torch.no_grad():
                            recon = dae_map_tensor(
                                dae,
                                p_teacher,
                                noise_std=cfg.latent_noise_std,
                                generator=gen_latent,
                            )
                        if cfg.strategy == "entropy":
                            u_field = entropy_tensor(recon)
                            weights = reliability_weights_tensor(u_field, cfg.gamma)
                            loss_c = consistency_loss(probs_s, p_teacher, weights)
                        elif cfg.strategy == "threshold":
                            u_field = squared_error_field(recon, p_teacher)
                            u_cap = max(u_cap, float(u_field.max()))
                            threshold = (
                                cfg.threshold_override
                                if cfg.threshold_override is not None
                                else threshold_schedule(t, cfg.t_max, u_cap)
                            )
                            loss_c = threshold_consistency(
                                probs_s, p_teacher, u_field, threshold
                            )
                        else:  # anatomical
                            u_field = squared_error_field(recon, p_teacher)
                            weights = reliability_weights_tensor(u_field, cfg.gamma)
                            loss_c = consistency_loss(probs_s, p_teacher, weights)

            loss = loss_s + lam * loss_c
            value = float(loss.detach())
            if not math.isfinite(value):
                raise DivergenceError(
                    f"ssl training diverged at iteration {t}: loss={value}, lr={lr}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            ema_update(teacher, student, cfg.alpha)

            writer.writerow(
                {
                    "iteration": t,
                    "lambda_c": repr(lam),
                    "loss_supervised": repr(float(loss_s.detach())),
                    "loss_consistency": repr(float(loss_c.detach())),
                    "lr": repr(lr),
                    "forwards_student": student.forward_calls - student_calls0,
                    "forwards_teacher": teacher.forward_calls - teacher_calls0,
                    "forwards_dae": (dae.forward_calls - dae_calls0) if dae is not None else 0,
                    "wall_ms": f"{clock.lap_ms():.3f}",
                }
            )

            if selection == "best-val" and (
                (t + 1) % cfg.val_every == 0 or t == cfg.t_max - 1
            ):
                val_dsc = mean_dsc_on_cases(student, split.val, cfg.patch_size)
                if val_dsc > best_val:
                    best_val = val_dsc
                    best_iter = t
                    best_state = {
                        k: v.detach().clone() for k, v in student.state_dict().items()
                    }

            if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
                _save_ssl_checkpoint(
                    out_dir / f"checkpoint_{t + 1:06d}.pt", cfg, arch, t + 1, student, teacher, optimizer
                )

    if selection == "best-val" and best_state is not None:
        student.load_state_dict(best_state)
    ckpt_path = out_dir / "checkpoint.pt"
    _save_ssl_checkpoint(ckpt_path, cfg, arch, cfg.t_max, student, teacher, optimizer)
    return {
        "checkpoint": str(ckpt_path),
        "log": str(log_path),
        "iterations": cfg.t_max,
        "selection": selection,
        "best_val_dsc": None if best_val == -math.inf else best_val,
        "best_val_iteration": None if best_iter < 0 else best_iter,
    }


def _save_ssl_checkpoint(
    path: Path,
    cfg: SslConfig,
    arch: ArchConfig,
    iteration: int,
    student: SegNet,
    teacher: SegNet,
    optimizer: torch.optim.Optimizer,
) -> None:
    save_checkpoint(
        path,
        {
            "kind": "ssl",
            "arch": arch.to_dict(),
            "patch_size": list(cfg.patch_size),
            "iteration": iteration,
            "model_state": student.state_dict(),
            "teacher_state": teacher.state_dict(),
            "optimizer_state": optimizer.state_dict(),
            "rng_state": {"torch_seed_namespace": cfg.seed},
            "config": cfg.to_dict(),
        },
    )


def load_student_checkpoint(path: str | Path) -> SegNet:
    """Rebuild the trained segmentation net from an ssl checkpoint."""
    record = load_checkpoint(path)
    if record.get("kind") != "ssl":
        raise DataError(f"{path} does not hold a segmentation checkpoint")
    arch = ArchConfig.from_dict(record["arch"])
    net = SegNet(arch)
    net.load_state_dict(record["model_state"])
    net.eval()
    return net
