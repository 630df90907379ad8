"""Experiment orchestration: manifests, the (variant x seed) grid runner,
checkpoint evaluation, and inference dumps.

A manifest fully determines the results tree. Each cell trains (or reuses)
the shape prior for its seed, trains the segmentation model under one
strategy variant, and evaluates on the test split; failures are recorded and
remaining cells continue. One prior is shared per (prior config, seed), so
strategy comparisons differ only in the strategy.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .configio import set_by_path, write_resolved
from .core import (
    DatasetSplit,
    SplitManifest,
    argmax_labels,
    dataset_case_ids,
    load_split,
    load_volume,
    make_splits,
    save_volume,
)
from .corruption import CorruptionPolicy
from .errors import ConfigError, DataError
from .metrics import MetricReport, aggregate_runs, evaluate_masks, write_metrics_json
from .nets import (
    ArchConfig,
    dae_map,
    load_checkpoint,
    load_dae_checkpoint,
    sliding_window_infer,
)
from .prior import DaeTrainConfig, train_dae
from .semisup import (
    DAE_STRATEGIES,
    STRATEGIES,
    SslConfig,
    load_student_checkpoint,
    train_ssl,
    uncertainty_from_reconstruction,
)
from .synthdata import SynthConfig, gen_dataset


@dataclass
class Variant:
    """One comparison row: a strategy plus config overrides."""

    name: str
    strategy: str
    overrides: dict[str, Any] = field(default_factory=dict)
    plot: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "strategy": self.strategy,
            "overrides": self.overrides,
            "plot": self.plot,
        }


@dataclass
class ExperimentManifest:
    dataset: str | dict
    split: dict
    seeds: list[int]
    out_dir: str
    arch: dict = field(default_factory=dict)
    dae: dict = field(default_factory=dict)
    ssl: dict = field(default_factory=dict)
    variants: list[Variant] = field(default_factory=list)

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentManifest":
        missing = [k for k in ("dataset", "split", "seeds", "out_dir") if k not in raw]
        if missing:
            raise ConfigError(f"experiment manifest missing keys: {missing}")
        variants: list[Variant] = []
        if raw.get("variants"):
            for item in raw["variants"]:
                if "strategy" not in item:
                    raise ConfigError(f"variant {item} needs a strategy")
                if item["strategy"] not in STRATEGIES:
                    raise ConfigError(f"unknown strategy {item['strategy']!r}")
                variants.append(
                    Variant(
                        name=item.get("name", item["strategy"]),
                        strategy=item["strategy"],
                        overrides=dict(item.get("set", {})),
                        plot=dict(item.get("plot", {})),
                    )
                )
        else:
            for strategy in raw.get("strategies", []):
                if strategy not in STRATEGIES:
                    raise ConfigError(f"unknown strategy {strategy!r}")
                variants.append(Variant(name=strategy, strategy=strategy))
        if not variants:
            raise ConfigError("experiment manifest declares no strategies or variants")
        names = [v.name for v in variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"variant names must be unique, got {names}")
        seeds = [int(s) for s in raw["seeds"]]
        if not seeds:
            raise ConfigError("experiment manifest needs at least one seed")
        return ExperimentManifest(
            dataset=raw["dataset"],
            split=dict(raw["split"]),
            seeds=seeds,
            out_dir=str(raw["out_dir"]),
            arch=dict(raw.get("arch", {})),
            dae=dict(raw.get("dae", {})),
            ssl=dict(raw.get("ssl", {})),
            variants=variants,
        )

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "split": self.split,
            "seeds": self.seeds,
            "out_dir": self.out_dir,
            "arch": self.arch,
            "dae": self.dae,
            "ssl": self.ssl,
            "variants": [v.to_dict() for v in self.variants],
        }


# ---------------------------------------------------------------------------
# Config assembly
# ---------------------------------------------------------------------------
def build_arch(raw: dict) -> ArchConfig:
    try:
        return ArchConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad architecture config: {exc}") from exc


def dae_config_from_raw(arch_raw: dict, dae_raw: dict, seed: int) -> DaeTrainConfig:
    raw = dict(dae_raw)
    arch = dict(arch_raw)
    arch.update(raw.pop("arch", {}))
    arch.setdefault("bottleneck_dim", 128)
    arch["skip_connections"] = False
    arch.setdefault("dropout_rate", 0.0)
    # The prior consumes one-hot masks, not images.
    arch["in_channels"] = int(arch.get("num_classes", 1)) + 1
    policy = CorruptionPolicy.from_dict(raw.pop("policy", {}))
    raw["seed"] = int(raw.pop("seed", seed))
    if "patch_size" in raw:
        raw["patch_size"] = tuple(raw["patch_size"])
    try:
        return DaeTrainConfig(arch=build_arch(arch), policy=policy, **raw)
    except TypeError as exc:
        raise ConfigError(f"bad prior training config: {exc}") from exc


def build_dae_config(manifest: ExperimentManifest, seed: int) -> DaeTrainConfig:
    return dae_config_from_raw(manifest.arch, manifest.dae, seed)


def ssl_config_from_raw(
    arch_raw: dict,
    ssl_raw: dict,
    strategy: str,
    dae_ckpt: str | None,
    seed: int,
    overrides: dict[str, Any] | None = None,
) -> SslConfig:
    raw = dict(ssl_raw)
    arch = dict(arch_raw)
    arch.update(raw.pop("arch", {}))
    arch.pop("bottleneck_dim", None)
    arch["skip_connections"] = True
    combined: dict[str, Any] = {"ssl": raw, "arch": arch}
    for dotted, value in (overrides or {}).items():
        if dotted.split(".", 1)[0] == "dae":
            continue  # prior overrides are consumed by dae_config_from_raw
        set_by_path(combined, dotted, value)
    ssl_kwargs = dict(combined["ssl"])
    if "patch_size" in ssl_kwargs:
        ssl_kwargs["patch_size"] = tuple(ssl_kwargs["patch_size"])
    ssl_kwargs["seed"] = int(ssl_kwargs.pop("seed", seed))
    try:
        return SslConfig(
            arch=build_arch(combined["arch"]),
            strategy=strategy,
            dae_ckpt=dae_ckpt,
            **ssl_kwargs,
        )
    except TypeError as exc:
        raise ConfigError(f"bad ssl config: {exc}") from exc


def build_ssl_config(
    manifest: ExperimentManifest,
    variant: Variant,
    seed: int,
    dae_ckpt: str | None,
) -> SslConfig:
    return ssl_config_from_raw(
        manifest.arch, manifest.ssl, variant.strategy, dae_ckpt, seed, variant.overrides
    )


def variant_dae_overrides(variant: Variant) -> dict:
    out = {}
    for dotted, value in variant.overrides.items():
        parts = dotted.split(".")
        if parts[0] == "dae":
            out[".".join(parts[1:])] = value
    return out


# ---------------------------------------------------------------------------
# Dataset / split materialization
# ---------------------------------------------------------------------------
def ensure_dataset(dataset: str | dict, out_dir: Path) -> Path:
    """Return the dataset directory, generating it first if requested."""
    if isinstance(dataset, str):
        path = Path(dataset)
        if not path.is_dir():
            raise DataError(f"dataset directory not found: {path}")
        return path
    if "generate" not in dataset:
        raise ConfigError("dataset must be a path or hold a 'generate' config")
    target = Path(dataset.get("dir", out_dir / "dataset"))
    try:
        cfg = SynthConfig(**{
            **dataset["generate"],
            "image_size": tuple(dataset["generate"].get("image_size", (64, 64))),
        })
    except TypeError as exc:
        raise ConfigError(f"bad synthetic dataset config: {exc}") from exc
    if not (target / "dataset.json").is_file():
        gen_dataset(cfg, target)
    return target


def materialize_split(
    dataset_dir: Path, split_cfg: dict, seed: int, out_path: Path
) -> tuple[SplitManifest, DatasetSplit]:
    ids = dataset_case_ids(dataset_dir)
    manifest = make_splits(
        ids,
        n_labeled=int(split_cfg["n_labeled"]),
        m_unlabeled=int(split_cfg["m_unlabeled"]),
        val_frac=float(split_cfg.get("val_frac", 0.0)),
        test_frac=float(split_cfg.get("test_frac", 0.0)),
        seed=int(split_cfg.get("seed", seed)),
    )
    manifest.save(out_path)
    return manifest, load_split(dataset_dir, manifest)


# ---------------------------------------------------------------------------
# Evaluation and inference
# ---------------------------------------------------------------------------
def evaluate_checkpoint(
    ckpt_path: str | Path,
    cases: Sequence[tuple],
    patch_size: Sequence[int],
    stride: Sequence[int] | None = None,
    out_json: str | Path | None = None,
    seeds: Sequence[int] = (),
) -> dict:
    """Sliding-window evaluation of a trained model on (volume, mask) pairs."""
    if not cases:
        raise DataError("no cases to evaluate")
    model = load_student_checkpoint(ckpt_path)
    reports: list[MetricReport] = []
    for volume, mask in cases:
        probs = sliding_window_infer(model, volume, patch_size, stride)
        pred = argmax_labels(probs)
        reports.append(evaluate_masks(pred, mask, volume.spacing, case_id=volume.id))
    if out_json is None:
        out_json = Path(str(ckpt_path)).parent / "metrics.json"
    return write_metrics_json(out_json, reports, seeds=seeds)


def run_inference(
    ckpt_path: str | Path,
    volume_dirs: Sequence[str | Path],
    out_dir: str | Path,
    dae_ckpt: str | Path | None = None,
    patch_size: Sequence[int] | None = None,
    stride: Sequence[int] | None = None,
) -> dict:
    """Sliding-window predictions (probabilities, hard masks) and, when a
    prior checkpoint is given, reconstruction-discrepancy uncertainty maps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_student_checkpoint(ckpt_path)
    if patch_size is None:
        patch_size = load_checkpoint(ckpt_path)["patch_size"]
    dae = load_dae_checkpoint(dae_ckpt) if dae_ckpt else None
    cases = []
    for vdir in volume_dirs:
        volume, _ = load_volume(vdir)
        probs = sliding_window_infer(model, volume, patch_size, stride)
        pred = argmax_labels(probs)
        case_out = out_dir / volume.id
        case_out.mkdir(parents=True, exist_ok=True)
        save_volume(volume, pred, case_out)
        np.save(case_out / "probabilities.npy", probs.data.astype(np.float32))
        entry = {"case_id": volume.id, "out": str(case_out), "uncertainty": False}
        if dae is not None:
            recon = dae_map(dae, probs, noise_std=0.0)
            u = uncertainty_from_reconstruction(probs, recon)
            np.save(case_out / "uncertainty.npy", u.data.astype(np.float32))
            entry["uncertainty"] = True
        cases.append(entry)
    payload = {"cases": cases, "checkpoint": str(ckpt_path), "dae": bool(dae)}
    (out_dir / "inference.json").write_text(json.dumps(payload, indent=2))
    return payload


# ---------------------------------------------------------------------------
# The grid runner
# ---------------------------------------------------------------------------
def _dae_cache_key(cfg: DaeTrainConfig) -> str:
    digest = hashlib.sha256(
        json.dumps(cfg.to_dict(), sort_keys=True).encode()
    ).hexdigest()[:10]
    return digest


def run_experiment(manifest: ExperimentManifest, resume: bool = False) -> dict:
    """Run every (variant, seed) cell, aggregate per variant, and emit the
    comparison table. Cell failures are recorded; remaining cells continue.
    """
    out_dir = Path(manifest.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(manifest.to_dict(), out_dir / "manifest.resolved.json")
    dataset_dir = ensure_dataset(manifest.dataset, out_dir)

    cells: list[dict] = []
    dae_cache: dict[tuple[str, int], str] = {}
    splits: dict[int, DatasetSplit] = {}

    for seed in manifest.seeds:
        split_path = out_dir / f"splits_seed{seed}.json"
        _, splits[seed] = materialize_split(dataset_dir, manifest.split, seed, split_path)

    for variant in manifest.variants:
        for seed in manifest.seeds:
            cell_dir = out_dir / "cells" / variant.name / f"seed{seed}"
            cell: dict[str, Any] = {
                "variant": variant.name,
                "strategy": variant.strategy,
                "seed": seed,
                "dir": str(cell_dir),
                "plot": variant.plot,
            }
            try:
                result = _run_cell(
                    manifest, variant, seed, splits[seed], cell_dir, out_dir, dae_cache, resume
                )
                cell.update(result)
                cell["status"] = "ok"
            except Exception as exc:  # cell isolation: record and continue
                cell["status"] = "failed"
                cell["error"] = f"{type(exc).__name__}: {exc}"
            cells.append(cell)

    summary = _summarize(cells)
    (out_dir / "results.json").write_text(
        json.dumps({"cells": cells, "summary": summary}, indent=2)
    )
    _write_summary_csv(out_dir / "summary.csv", summary)
    _write_summary_text(out_dir / "summary.txt", summary)
    return {"out_dir": str(out_dir), "cells": cells, "summary": summary}


def _run_cell(
    manifest: ExperimentManifest,
    variant: Variant,
    seed: int,
    split: DatasetSplit,
    cell_dir: Path,
    out_dir: Path,
    dae_cache: dict[tuple[str, int], str],
    resume: bool,
) -> dict:
    cell_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = cell_dir / "checkpoint.pt"
    metrics_path = cell_dir / "metrics.json"

    dae_ckpt: str | None = None
    if variant.strategy in DAE_STRATEGIES:
        dae_cfg = build_dae_config(manifest, seed)
        extra = variant_dae_overrides(variant)
        if extra:
            raw = dae_cfg.to_dict()
            for dotted, value in extra.items():
                set_by_path(raw, dotted, value)
            arch_raw = raw.pop("arch")
            policy_raw = raw.pop("policy")
            raw["patch_size"] = tuple(raw["patch_size"])
            dae_cfg = DaeTrainConfig(
                arch=build_arch(arch_raw),
                policy=CorruptionPolicy.from_dict(policy_raw),
                **raw,
            )
        key = (_dae_cache_key(dae_cfg), seed)
        if key not in dae_cache:
            shared = out_dir / "shared" / f"dae_{key[0]}_seed{seed}.pt"
            if not (resume and shared.is_file()):
                train_dae(
                    split,
                    dae_cfg,
                    shared,
                    log_path=shared.with_suffix(".csv"),
                )
            dae_cache[key] = str(shared)
        dae_ckpt = dae_cache[key]

    cfg = build_ssl_config(manifest, variant, seed, dae_ckpt)
    write_resolved(cfg.to_dict(), cell_dir / "resolved.json")

    started = time.perf_counter()
    if not (resume and ckpt_path.is_file()):
        train_ssl(split, cfg, cell_dir)
    train_seconds = time.perf_counter() - started

    if not (resume and metrics_path.is_file()):
        evaluate_checkpoint(
            ckpt_path,
            split.test if split.test else split.labeled,
            cfg.patch_size,
            out_json=metrics_path,
            seeds=[seed],
        )
    metrics = json.loads(metrics_path.read_text())
    wall_ms = _mean_wall_ms(cell_dir / "ssl_log.csv")
    forwards = _forward_profile(cell_dir / "ssl_log.csv")
    return {
        "checkpoint": str(ckpt_path),
        "metrics": metrics["aggregate"],
        "mean_wall_ms": wall_ms,
        "forwards_per_iteration": forwards,
        "train_seconds": train_seconds,
        "dae_ckpt": dae_ckpt,
    }


def _mean_wall_ms(log_path: Path) -> float | None:
    if not log_path.is_file():
        return None
    with log_path.open() as fh:
        values = [float(row["wall_ms"]) for row in csv.DictReader(fh)]
    return float(np.mean(values)) if values else None


def _forward_profile(log_path: Path) -> dict | None:
    if not log_path.is_file():
        return None
    with log_path.open() as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return None
    return {
        "student": float(np.mean([int(r["forwards_student"]) for r in rows])),
        "teacher": float(np.mean([int(r["forwards_teacher"]) for r in rows])),
        "dae": float(np.mean([int(r["forwards_dae"]) for r in rows])),
    }


def _summarize(cells: list[dict]) -> list[dict]:
    by_variant: dict[str, list[dict]] = {}
    for cell in cells:
        by_variant.setdefault(cell["variant"], []).append(cell)
    summary = []
    for name, group in by_variant.items():
        ok = [c for c in group if c["status"] == "ok"]
        entry: dict[str, Any] = {
            "variant": name,
            "strategy": group[0]["strategy"],
            "plot": group[0].get("plot", {}),
            "seeds_ok": len(ok),
            "seeds_total": len(group),
        }
        if ok:
            agg = aggregate_runs(
                [
                    {
                        "dsc": c["metrics"]["mean_dsc"],
                        "hd95": c["metrics"]["mean_hd95"],
                        "wall_ms": c.get("mean_wall_ms"),
                    }
                    for c in ok
                ]
            )
            entry["dsc_mean"] = agg["dsc"]["mean"]
            entry["dsc_std"] = agg["dsc"]["std"]
            entry["hd95_mean"] = agg["hd95"]["mean"]
            entry["hd95_std"] = agg["hd95"]["std"]
            entry["wall_ms_mean"] = agg["wall_ms"]["mean"]
            entry["forwards"] = ok[0].get("forwards_per_iteration")
        summary.append(entry)
    return summary


def _write_summary_csv(path: Path, summary: list[dict]) -> None:
    fields = [
        "variant",
        "strategy",
        "seeds_ok",
        "seeds_total",
        "dsc_mean",
        "dsc_std",
        "hd95_mean",
        "hd95_std",
        "wall_ms_mean",
    ]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in summary:
            writer.writerow(row)


def _write_summary_text(path: Path, summary: list[dict]) -> None:
    lines = [
        f"{'variant':<16} {'DSC':>16} {'HD95':>16} {'ms/iter':>10}",
        "-" * 62,
    ]
    for row in summary:
        if row.get("dsc_mean") is None:
            lines.append(f"{row['variant']:<16} {'(failed)':>16}")
            continue
        hd = (
            f"{row['hd95_mean']:.2f}±{row['hd95_std']:.2f}"
            if row.get("hd95_mean") is not None
            else "undefined"
        )
        wall = f"{row['wall_ms_mean']:.1f}" if row.get("wall_ms_mean") is not None else "-"
        lines.append(
            f"{row['variant']:<16} "
            f"{row['dsc_mean'] * 100:.2f}±{row['dsc_std'] * 100:.2f} "
            f"{hd:>16} {wall:>10}"
        )
    path.write_text("\n".join(lines) + "\n")
