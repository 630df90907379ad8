"""Domain types, volume archive I/O, dataset splits, and patch sampling.

A volume archive is a directory with ``meta.json`` plus raw little-endian
payloads: ``image.raw`` (float32, row-major) and optionally ``label.raw``
(uint8). A split manifest (``splits.json``) records which case ids belong to
the labeled/unlabeled/val/test subsets and the seed that produced them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

META_NAME = "meta.json"
IMAGE_NAME = "image.raw"
LABEL_NAME = "label.raw"


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------
@dataclass
class Volume:
    """Dense scalar field (2D or 3D) with per-axis physical spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, ...]
    id: str = ""

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim not in (2, 3):
            raise DataError(f"volume rank must be 2 or 3, got {self.data.ndim}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.data.ndim:
            raise DataError("spacing length must match volume rank")
        if any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be strictly positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class LabelMask:
    """Integer field over {0, ..., num_classes}; 0 is background."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.integer):
            raise DataError(f"label dtype must be integer, got {self.data.dtype}")
        if self.num_classes < 1:
            raise DataError("num_classes must be >= 1")
        if self.data.size:
            lo, hi = int(self.data.min()), int(self.data.max())
            if lo < 0 or hi > self.num_classes:
                raise DataError(
                    f"label values must lie in 0..{self.num_classes}, found {lo}..{hi}"
                )
        self.data = self.data.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class ProbMap:
    """Per-class probability field of shape (C+1, *spatial); rows sum to 1."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim not in (3, 4):
            raise DataError("probability map must be (channels, H, W[, D])")
        if self.data.min() < -1e-7 or self.data.max() > 1 + 1e-7:
            raise DataError("probabilities must lie in [0, 1]")
        sums = self.data.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise DataError("per-voxel channel sums must equal 1 within 1e-5")

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.data.shape[1:]


@dataclass
class UncertaintyMap:
    """Non-negative scalar field over the spatial grid of a ProbMap."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise DataError("uncertainty map contains non-finite values")
        if self.data.size and self.data.min() < 0:
            raise DataError("uncertainty values must be >= 0")


@dataclass
class SplitManifest:
    """Id-level dataset partition; a pure function of (ids, N, M, seed)."""

    labeled: list[str]
    unlabeled: list[str]
    val: list[str]
    test: list[str]
    seed: int

    @property
    def n_labeled(self) -> int:
        return len(self.labeled)

    @property
    def m_unlabeled(self) -> int:
        return len(self.unlabeled)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_labeled": self.n_labeled,
            "m_unlabeled": self.m_unlabeled,
            "labeled": list(self.labeled),
            "unlabeled": list(self.unlabeled),
            "val": list(self.val),
            "test": list(self.test),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @staticmethod
    def load(path: str | Path) -> "SplitManifest":
        try:
            raw = json.loads(Path(path).read_text())
            return SplitManifest(
                labeled=list(raw["labeled"]),
                unlabeled=list(raw["unlabeled"]),
                val=list(raw["val"]),
                test=list(raw["test"]),
                seed=int(raw["seed"]),
            )
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed split manifest {path}: {exc}") from exc


@dataclass
class DatasetSplit:
    """Materialized split: volumes (and masks) loaded from a dataset dir."""

    labeled: list[tuple[Volume, LabelMask]]
    unlabeled: list[Volume]
    val: list[tuple[Volume, LabelMask]] = field(default_factory=list)
    test: list[tuple[Volume, LabelMask]] = field(default_factory=list)

    @property
    def n_labeled(self) -> int:
        return len(self.labeled)

    @property
    def m_unlabeled(self) -> int:
        return len(self.unlabeled)


# ---------------------------------------------------------------------------
# Archive I/O
# ---------------------------------------------------------------------------
def save_volume(v: Volume, m: LabelMask | None, path: str | Path) -> None:
    """Write a volume archive; raises DataError before touching disk if the
    pair violates invariants."""
    if m is not None and m.shape != v.shape:
        raise DataError(f"label shape {m.shape} != volume shape {v.shape}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "dtype": "float32",
        "num_classes": m.num_classes if m is not None else 0,
    }
    try:
        (path / META_NAME).write_text(json.dumps(meta, indent=2))
        (path / IMAGE_NAME).write_bytes(
            np.ascontiguousarray(v.data, dtype="<f4").tobytes()
        )
        if m is not None:
            (path / LABEL_NAME).write_bytes(
                np.ascontiguousarray(m.data, dtype=np.uint8).tobytes()
            )
    except OSError as exc:
        raise DataError(f"failed to write archive {path}: {exc}") from exc


def load_volume(path: str | Path) -> tuple[Volume, LabelMask | None]:
    """Read a volume archive back; bit-exact inverse of save_volume."""
    path = Path(path)
    meta_path = path / META_NAME
    if not meta_path.is_file():
        raise DataError(f"missing {META_NAME} in {path}")
    try:
        meta = json.loads(meta_path.read_text())
        shape = tuple(int(s) for s in meta["shape"])
        spacing = tuple(float(s) for s in meta["spacing"])
        num_classes = int(meta.get("num_classes", 0))
        if meta.get("dtype") != "float32":
            raise DataError(f"unsupported image dtype {meta.get('dtype')!r}")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"ill-formed {META_NAME} in {path}: {exc}") from exc

    image_bytes = (path / IMAGE_NAME).read_bytes() if (path / IMAGE_NAME).is_file() else None
    if image_bytes is None:
        raise DataError(f"missing {IMAGE_NAME} in {path}")
    expected = int(np.prod(shape)) * 4
    if len(image_bytes) != expected:
        raise DataError(
            f"{IMAGE_NAME} in {path} has {len(image_bytes)} bytes, expected {expected}"
        )
    data = np.frombuffer(image_bytes, dtype="<f4").reshape(shape)
    volume = Volume(data=data.copy(), spacing=spacing, id=path.name)

    label_path = path / LABEL_NAME
    if not label_path.is_file():
        return volume, None
    label_bytes = label_path.read_bytes()
    if len(label_bytes) != int(np.prod(shape)):
        raise DataError(f"{LABEL_NAME} in {path} does not match volume shape")
    label_data = np.frombuffer(label_bytes, dtype=np.uint8).reshape(shape)
    mask = LabelMask(data=label_data.copy(), num_classes=max(num_classes, 1))
    return volume, mask


# ---------------------------------------------------------------------------
# Label / probability conversions
# ---------------------------------------------------------------------------
def one_hot(m: LabelMask) -> ProbMap:
    """Encode a mask as a (C+1, *spatial) indicator field."""
    channels = m.num_classes + 1
    data = np.zeros((channels,) + m.shape, dtype=np.float64)
    for c in range(channels):
        data[c] = m.data == c
    return ProbMap(data=data)


def argmax_labels(p: ProbMap) -> LabelMask:
    """Hard prediction; ties go to the smaller class index."""
    labels = np.argmax(p.data, axis=0).astype(np.uint8)
    return LabelMask(data=labels, num_classes=p.num_channels - 1)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------
def make_splits(
    ids: Sequence[str],
    n_labeled: int,
    m_unlabeled: int,
    val_frac: float = 0.0,
    test_frac: float = 0.0,
    seed: int = 0,
) -> SplitManifest:
    """Deterministically partition case ids into the four disjoint subsets."""
    if n_labeled < 1:
        raise ConfigError("need at least one labeled case (supervised loss undefined)")
    if m_unlabeled < 0:
        raise ConfigError("unlabeled count must be >= 0")
    ids = list(ids)
    n_val = int(round(val_frac * len(ids)))
    n_test = int(round(test_frac * len(ids)))
    needed = n_labeled + m_unlabeled + n_val + n_test
    if needed > len(ids):
        raise ConfigError(
            f"split needs {needed} ids (N={n_labeled}, M={m_unlabeled}, "
            f"val={n_val}, test={n_test}) but only {len(ids)} available"
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    test = shuffled[:n_test]
    val = shuffled[n_test : n_test + n_val]
    labeled = shuffled[n_test + n_val : n_test + n_val + n_labeled]
    unlabeled = shuffled[
        n_test + n_val + n_labeled : n_test + n_val + n_labeled + m_unlabeled
    ]
    return SplitManifest(labeled=labeled, unlabeled=unlabeled, val=val, test=test, seed=seed)


def dataset_case_ids(dataset_dir: str | Path) -> list[str]:
    """Case ids of a dataset directory, from dataset.json when present."""
    dataset_dir = Path(dataset_dir)
    index = dataset_dir / "dataset.json"
    if index.is_file():
        try:
            return list(json.loads(index.read_text())["cases"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"malformed dataset.json in {dataset_dir}: {exc}") from exc
    cases = sorted(p.name for p in dataset_dir.iterdir() if (p / META_NAME).is_file())
    if not cases:
        raise DataError(f"no volume archives found under {dataset_dir}")
    return cases


def load_split(dataset_dir: str | Path, manifest: SplitManifest) -> DatasetSplit:
    """Materialize a split manifest by loading its archives."""
    dataset_dir = Path(dataset_dir)

    def load_pair(case_id: str) -> tuple[Volume, LabelMask]:
        volume, mask = load_volume(dataset_dir / case_id)
        if mask is None:
            raise DataError(f"case {case_id} has no label payload")
        return volume, mask

    return DatasetSplit(
        labeled=[load_pair(i) for i in manifest.labeled],
        unlabeled=[load_volume(dataset_dir / i)[0] for i in manifest.unlabeled],
        val=[load_pair(i) for i in manifest.val],
        test=[load_pair(i) for i in manifest.test],
    )


# ---------------------------------------------------------------------------
# Patch sampling and augmentation
# ---------------------------------------------------------------------------
def _pad_to(data: np.ndarray, size: Sequence[int], value: float) -> np.ndarray:
    pads = []
    for extent, target in zip(data.shape, size):
        deficit = max(0, target - extent)
        before = deficit // 2
        pads.append((before, deficit - before))
    if any(p != (0, 0) for p in pads):
        data = np.pad(data, pads, mode="constant", constant_values=value)
    return data


def random_crop(
    v: Volume,
    m: LabelMask | None,
    size: Sequence[int],
    rng: np.random.Generator,
) -> tuple[Volume, LabelMask | None]:
    """Crop image and label with identical offsets; inputs smaller than the
    requested size are symmetrically padded (zeros / background) first."""
    size = tuple(int(s) for s in size)
    if len(size) != v.data.ndim:
        raise DataError(f"crop size rank {len(size)} != volume rank {v.data.ndim}")
    image = _pad_to(v.data, size, 0.0)
    label = _pad_to(m.data, size, 0) if m is not None else None
    offsets = tuple(
        int(rng.integers(0, extent - target + 1))
        for extent, target in zip(image.shape, size)
    )
    window = tuple(slice(o, o + s) for o, s in zip(offsets, size))
    out_v = Volume(data=image[window].copy(), spacing=v.spacing, id=v.id)
    out_m = (
        LabelMask(data=label[window].copy(), num_classes=m.num_classes)
        if m is not None and label is not None
        else None
    )
    return out_v, out_m


def draw_augment_params(rng: np.random.Generator, rank: int) -> tuple[tuple[bool, ...], int]:
    """Sample (per-axis flips, quarter-turn count) for one augmentation."""
    flips = tuple(bool(rng.random() < 0.5) for _ in range(rank))
    k = int(rng.integers(0, 4))
    return flips, k


def apply_augment(
    v: Volume,
    m: LabelMask | None,
    flips: Sequence[bool],
    k: int,
) -> tuple[Volume, LabelMask | None]:
    """Apply flips then k*90-degree rotation (first two axes) to both arrays."""

    def transform(arr: np.ndarray) -> np.ndarray:
        for axis, do_flip in enumerate(flips):
            if do_flip:
                arr = np.flip(arr, axis=axis)
        if k % 4:
            arr = np.rot90(arr, k=k % 4, axes=(0, 1))
        return arr.copy()

    spacing = list(v.spacing)
    if k % 2:  # odd quarter turns exchange the first two axes
        spacing[0], spacing[1] = spacing[1], spacing[0]
    out_v = Volume(data=transform(v.data), spacing=tuple(spacing), id=v.id)
    out_m = (
        LabelMask(data=transform(m.data), num_classes=m.num_classes)
        if m is not None
        else None
    )
    return out_v, out_m


def augment(
    v: Volume,
    m: LabelMask | None,
    rng: np.random.Generator,
) -> tuple[Volume, LabelMask | None]:
    """Random flip per axis (p=0.5) and k*90-degree in-plane rotation."""
    flips, k = draw_augment_params(rng, v.data.ndim)
    return apply_augment(v, m, flips, k)
