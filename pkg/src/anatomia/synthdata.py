"""Deterministic generator of desk-scale 2D organ-like segmentation data.

Each case contains one smooth star-convex blob per foreground class, built
from random radial harmonics. Blobs are placed on disjoint grid cells so
every class region is connected and never vanishes. Class intensity levels
partially overlap (controlled by ``contrast``), a random boundary arc is
locally blurred to create genuinely ambiguous regions, Gaussian noise is
added, and the image is min-max normalized to [0, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, label as cc_label

from .core import LabelMask, Volume, save_volume
from .errors import ConfigError
from .seeding import spawn_rng


@dataclass
class SynthConfig:
    """Knobs for the synthetic dataset.

    ``blob_count`` is the number of radial harmonics shaping each blob's
    outline (more harmonics, lumpier organs); ``irregularity`` scales their
    amplitude; ``contrast`` in (0, 1] controls both intensity separation
    between classes and boundary sharpness (1.0 means exactly threshold-
    recoverable classes); ``noise_std`` is additive Gaussian noise.
    """

    num_cases: int = 200
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 1
    blob_count: int = 4
    irregularity: float = 0.25
    contrast: float = 0.6
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        self.image_size = tuple(int(s) for s in self.image_size)
        if len(self.image_size) != 2 or min(self.image_size) < 32:
            raise ConfigError("image_size must be 2D with extents >= 32")
        if not 1 <= self.num_classes <= 4:
            raise ConfigError("num_classes must be in 1..4")
        if self.num_cases < 1:
            raise ConfigError("num_cases must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 0 < self.contrast <= 1:
            raise ConfigError("contrast must lie in (0, 1]")
        if self.blob_count < 1:
            raise ConfigError("blob_count must be >= 1")
        if not 0 <= self.irregularity < 1:
            raise ConfigError("irregularity must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def _grid_cells(shape: tuple[int, int], count: int) -> list[tuple[float, float, float]]:
    """(center_r, center_c, half_extent) of `count` disjoint grid cells."""
    g = math.ceil(math.sqrt(count))
    cell_h, cell_w = shape[0] / g, shape[1] / g
    half = min(cell_h, cell_w) / 2.0
    cells = []
    for i in range(g):
        for j in range(g):
            cells.append(((i + 0.5) * cell_h, (j + 0.5) * cell_w, half))
    return cells


def _radial_profile(
    rng: np.random.Generator, base_radius: float, harmonics: int, irregularity: float
) -> tuple[np.ndarray, np.ndarray, float]:
    """Coefficients (amp, phase) of the blob outline R(theta)."""
    amps = rng.uniform(-1.0, 1.0, size=harmonics) / np.arange(1, harmonics + 1)
    phases = rng.uniform(0.0, 2 * np.pi, size=harmonics)
    norm = np.abs(amps).sum()
    if norm > 0:
        amps = amps / norm * irregularity
    return amps, phases, base_radius


def _rasterize_blob(
    shape: tuple[int, int],
    center: tuple[float, float],
    amps: np.ndarray,
    phases: np.ndarray,
    base_radius: float,
) -> np.ndarray:
    rr, cc = np.meshgrid(
        np.arange(shape[0], dtype=np.float64),
        np.arange(shape[1], dtype=np.float64),
        indexing="ij",
    )
    dy, dx = rr - center[0], cc - center[1]
    dist = np.hypot(dy, dx)
    theta = np.arctan2(dx, dy)
    radius = np.full(shape, base_radius)
    for k, (a, p) in enumerate(zip(amps, phases), start=1):
        radius = radius + base_radius * a * np.cos(k * theta + p)
    return dist <= radius


def _is_connected(region: np.ndarray) -> bool:
    _, n = cc_label(region)
    return n == 1


def generate_case(cfg: SynthConfig, case_index: int) -> tuple[Volume, LabelMask]:
    """Deterministically generate one (image, mask) pair."""
    rng = spawn_rng(cfg.seed, "synth-case", case_index)
    shape = cfg.image_size
    cells = _grid_cells(shape, cfg.num_classes)
    chosen = rng.permutation(len(cells))[: cfg.num_classes]

    mask = np.zeros(shape, dtype=np.uint8)
    for c, cell_idx in enumerate(chosen, start=1):
        cy, cx, half = cells[cell_idx]
        # Keep max radius inside the cell so class regions stay disjoint.
        r_cap = 0.92 * half / (1.0 + cfg.irregularity)
        r_min = min(max(3.0, 0.35 * r_cap), 0.9 * r_cap)
        for _ in range(20):
            jitter = 0.15 * half
            center = (cy + rng.uniform(-jitter, jitter), cx + rng.uniform(-jitter, jitter))
            base_radius = rng.uniform(r_min, r_cap)
            amps, phases, base_radius = _radial_profile(
                rng, base_radius, cfg.blob_count, cfg.irregularity
            )
            blob = _rasterize_blob(shape, center, amps, phases, base_radius)
            if blob.any() and _is_connected(blob):
                mask[blob] = c
                break
        else:  # pragma: no cover - star-convex rasterization is connected
            raise RuntimeError("failed to rasterize a connected blob")

    # Intensity levels: evenly spaced bases, jittered toward overlap as
    # contrast decreases.
    bases = np.linspace(0.25, 0.95, cfg.num_classes + 1)
    gap = (bases[1] - bases[0]) if cfg.num_classes else 0.5
    jitter_scale = 0.6 * gap * (1.0 - cfg.contrast)
    levels = bases + rng.uniform(-jitter_scale, jitter_scale, size=cfg.num_classes + 1)
    image = levels[mask].astype(np.float64)

    # Locally blur a random boundary arc of each blob so some boundaries are
    # genuinely ambiguous; blur strength vanishes at contrast=1.
    blur_sigma = 2.0 * (1.0 - cfg.contrast)
    if blur_sigma > 0:
        blurred = gaussian_filter(image, sigma=blur_sigma)
        band = np.zeros(shape, dtype=bool)
        for c, cell_idx in enumerate(chosen, start=1):
            cy, cx, _ = cells[cell_idx]
            arc_start = rng.uniform(0.0, 2 * np.pi)
            arc_width = rng.uniform(0.5 * np.pi, 1.5 * np.pi)
            smooth = gaussian_filter((mask == c).astype(np.float64), 1.5)
            edge = (smooth > 0.05) & (smooth < 0.95)
            rr, cc = np.meshgrid(
                np.arange(shape[0], dtype=np.float64),
                np.arange(shape[1], dtype=np.float64),
                indexing="ij",
            )
            theta = np.mod(np.arctan2(cc - cx, rr - cy) - arc_start, 2 * np.pi)
            band |= edge & (theta <= arc_width)
        image = np.where(band, blurred, image)

    if cfg.noise_std > 0:
        image = image + rng.normal(0.0, cfg.noise_std, size=shape)

    lo, hi = image.min(), image.max()
    if hi > lo:
        image = (image - lo) / (hi - lo)
    volume = Volume(
        data=image.astype(np.float32),
        spacing=(1.0, 1.0),
        id=f"case_{case_index:04d}",
    )
    return volume, LabelMask(data=mask, num_classes=cfg.num_classes)


def gen_dataset(cfg: SynthConfig, out_dir: str | Path) -> list[str]:
    """Write all cases as volume archives plus a dataset.json index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    case_ids = []
    for i in range(cfg.num_cases):
        volume, mask = generate_case(cfg, i)
        save_volume(volume, mask, out_dir / volume.id)
        case_ids.append(volume.id)
    (out_dir / "dataset.json").write_text(
        json.dumps({"config": cfg.to_dict(), "cases": case_ids}, indent=2)
    )
    return case_ids
