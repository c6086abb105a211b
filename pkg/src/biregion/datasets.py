"""Synthetic nested-ellipse segmentation data, on-disk container, and splits.

On-disk layout of a dataset root::

    root/
      split.json             # SplitManifest for the training pool
      train/manifest.json    # one directory per split
      train/<id>.image.f32   # raw little-endian float32, shape [C_in, H, W]
      train/<id>.label.f32   # raw little-endian float32 class ids, shape [H, W]
      val/...
      test/...
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError

MANIFEST_NAME = "manifest.json"
SPLIT_NAME = "split.json"
FORMAT_VERSION = 1


@dataclass
class SyntheticSpec:
    image_size: int = 128
    num_classes: int = 4
    num_samples: int = 200
    boundary_blur_sigma: float = 1.5
    intensity_noise_std: float = 0.1
    # per-sample global brightness shift, uniform in [-jitter, jitter]
    intensity_jitter: float = 0.03
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_samples < 1:
            raise ConfigError(f"num_samples must be positive, got {self.num_samples}")
        if self.boundary_blur_sigma < 0 or self.intensity_noise_std < 0:
            raise ConfigError("blur sigma and noise std must be non-negative")
        levels = class_intensities(self.num_classes)
        half_gap = 0.5 * (levels[1] - levels[0])
        if not 0 <= self.intensity_jitter < half_gap:
            raise ConfigError(f"intensity_jitter must lie in [0, {half_gap:.3f})")


@dataclass
class Sample:
    image: np.ndarray  # float32 [C_in, H, W] in [0, 1]
    label: Optional[np.ndarray]  # int64 [H, W], None for unlabeled samples
    id: str

    @property
    def labeled(self) -> bool:
        return self.label is not None


@dataclass
class SplitManifest:
    labeled_ids: list[str]
    unlabeled_ids: list[str]
    ratio: float
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(list(d["labeled_ids"]), list(d["unlabeled_ids"]), float(d["ratio"]), int(d["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_json(Path(path).read_text())


def class_intensities(num_classes: int) -> np.ndarray:
    """Base intensity of each class; background darkest, evenly spaced."""
    return np.linspace(0.15, 0.85, num_classes)


def _layer_scales(num_classes: int, rng: np.random.Generator) -> np.ndarray:
    # relative radii of the nested foreground layers, outermost first
    n = num_classes - 1
    if n == 1:
        return np.array([1.0])
    base = np.linspace(1.0, 0.35, n)
    wiggle = rng.uniform(-0.04, 0.04, size=n)
    wiggle[0] = 0.0
    return base + wiggle


def _label_map(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    cy, cx = rng.uniform(0.38 * s, 0.62 * s, size=2)
    a = rng.uniform(0.22, 0.32) * s
    b = a * rng.uniform(0.7, 1.0)
    theta = rng.uniform(0.0, math.pi)
    scales = _layer_scales(spec.num_classes, rng)

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)

    label = np.zeros((s, s), dtype=np.int64)
    # outermost layer gets the highest id, innermost disk is class 1
    for k, scale in enumerate(scales):
        label[r <= scale] = spec.num_classes - 1 - k
    return label


def render_image(label: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    levels = class_intensities(spec.num_classes)
    img = levels[label]
    if spec.intensity_jitter > 0:
        img = img + rng.uniform(-spec.intensity_jitter, spec.intensity_jitter)
    if spec.boundary_blur_sigma > 0:
        img = ndimage.gaussian_filter(img, spec.boundary_blur_sigma, mode="nearest")
    if spec.intensity_noise_std > 0:
        img = img + rng.normal(0.0, spec.intensity_noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


def generate_synthetic_dataset(spec: SyntheticSpec, prefix: str = "s") -> list[Sample]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    samples = []
    for i in range(spec.num_samples):
        label = _label_map(spec, rng)
        image = render_image(label, spec, rng)
        samples.append(Sample(image=image, label=label, id=f"{prefix}{i:05d}"))
    return samples


def split_labeled_unlabeled(ids: Sequence[str], ratio: float, seed: int) -> SplitManifest:
    if not 0 < ratio < 1:
        raise ConfigError(f"labeled ratio must lie in (0, 1), got {ratio}")
    ids = list(ids)
    # round half up: 0.05 * 70 = 3.5 -> 4
    n_lab = int(math.floor(ratio * len(ids) + 0.5 + 1e-9))
    if n_lab == 0:
        raise ConfigError(f"ratio {ratio} of {len(ids)} samples yields no labeled samples")
    order = np.random.default_rng(seed).permutation(len(ids))
    lab = sorted(ids[i] for i in order[:n_lab])
    unl = sorted(ids[i] for i in order[n_lab:])
    return SplitManifest(labeled_ids=lab, unlabeled_ids=unl, ratio=ratio, seed=seed)


def partition_pool(samples: Sequence[Sample], seed: int, fractions=(0.7, 0.1, 0.2)) -> dict[str, list[Sample]]:
    """Seeded train/val/test partition of a generated pool (70/10/20 by default)."""
    n = len(samples)
    order = np.random.default_rng(seed + 1_000_003).permutation(n)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_val - n_test
    parts = {
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }
    return {k: [samples[i] for i in sorted(idx)] for k, idx in parts.items()}


def apply_split(samples: Iterable[Sample], manifest: SplitManifest) -> tuple[list[Sample], list[Sample]]:
    """Labeled pool keeps labels; unlabeled pool has them stripped."""
    by_id = {s.id: s for s in samples}
    missing = [i for i in manifest.labeled_ids + manifest.unlabeled_ids if i not in by_id]
    if missing:
        raise FormatError(f"split manifest references unknown ids: {missing[:5]}")
    labeled = []
    for i in manifest.labeled_ids:
        if by_id[i].label is None:
            raise FormatError(f"sample {i} is in the labeled pool but has no label")
        labeled.append(by_id[i])
    unlabeled = [Sample(by_id[i].image, None, i) for i in manifest.unlabeled_ids]
    return labeled, unlabeled


# --- container format ---------------------------------------------------------

def _write_tensor(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_split(samples: Sequence[Sample], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        entry = {
            "id": s.id,
            "image": {"file": f"{s.id}.image.f32", "shape": list(s.image.shape), "dtype": "<f4"},
            "label": None,
        }
        _write_tensor(d / entry["image"]["file"], s.image)
        if s.label is not None:
            entry["label"] = {"file": f"{s.id}.label.f32", "shape": list(s.label.shape), "dtype": "<f4"}
            _write_tensor(d / entry["label"]["file"], s.label)
        entries.append(entry)
    manifest = {"format_version": FORMAT_VERSION, "samples": entries}
    (d / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))


def _read_tensor(path: Path, shape, sid: str) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"sample {sid}: missing tensor file {path.name}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise FormatError(f"sample {sid}: {path.name} has {len(raw)} bytes, manifest shape {list(shape)} needs {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def load_dataset(path) -> list[Sample]:
    """Load one split directory; samples without a label file come back unlabeled."""
    d = Path(path)
    mpath = d / MANIFEST_NAME
    if not mpath.exists():
        raise FormatError(f"no {MANIFEST_NAME} in {d}")
    try:
        manifest = json.loads(mpath.read_text())
        entries = manifest["samples"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"unreadable manifest {mpath}: {exc}") from exc
    samples = []
    for e in entries:
        sid = e["id"]
        img = _read_tensor(d / e["image"]["file"], e["image"]["shape"], sid)
        if img.ndim != 3:
            raise FormatError(f"sample {sid}: image must be [C, H, W], got shape {list(img.shape)}")
        # images are stored normalized; re-clip guards against foreign writers
        img = np.clip(img, 0.0, 1.0)
        label = None
        spec = e.get("label")
        if spec is not None and (d / spec["file"]).exists():
            lab = _read_tensor(d / spec["file"], spec["shape"], sid)
            if lab.shape != img.shape[1:]:
                raise FormatError(f"sample {sid}: label shape {list(lab.shape)} does not match image {list(img.shape)}")
            label = lab.astype(np.int64)
        samples.append(Sample(image=img, label=label, id=sid))
    return samples


def write_dataset(root, spec: SyntheticSpec, labeled_ratio: float = 0.05, split_seed: Optional[int] = None) -> dict:
    """Generate, partition and persist a synthetic dataset; returns summary stats."""
    root = Path(root)
    samples = generate_synthetic_dataset(spec)
    parts = partition_pool(samples, spec.seed)
    for name, part in parts.items():
        save_split(part, root / name)
    seed = spec.seed if split_seed is None else split_seed
    manifest = split_labeled_unlabeled([s.id for s in parts["train"]], labeled_ratio, seed)
    manifest.save(root / SPLIT_NAME)
    (root / "synthetic_spec.json").write_text(json.dumps(asdict(spec), indent=2))
    return dataset_summary(samples, spec.num_classes) | {
        "splits": {k: len(v) for k, v in parts.items()},
        "labeled": len(manifest.labeled_ids),
        "unlabeled": len(manifest.unlabeled_ids),
    }


def dataset_summary(samples: Sequence[Sample], num_classes: int) -> dict:
    counts = np.zeros(num_classes, dtype=np.int64)
    full = 0
    for s in samples:
        if s.label is None:
            continue
        c = np.bincount(s.label.ravel(), minlength=num_classes)
        counts += c[:num_classes]
        full += int(np.all(c[:num_classes] > 0))
    total = counts.sum()
    return {
        "num_samples": len(samples),
        "class_fraction": [float(c / total) if total else 0.0 for c in counts],
        "all_classes_present": full,
    }


@dataclass
class DatasetBundle:
    """A dataset root loaded into memory, with the training split applied."""

    labeled: list[Sample]
    unlabeled: list[Sample]
    val: list[Sample]
    test: list[Sample]
    manifest: SplitManifest
    num_classes: int = field(default=0)
    # unlabeled training samples with their stored labels, for diagnostics only
    hidden_unlabeled: list = field(default_factory=list)


def load_bundle(root, labeled_ratio: Optional[float] = None, split_seed: Optional[int] = None) -> DatasetBundle:
    """Load train/val/test from ``root``.

    The stored split.json is used unless a different ratio or seed is requested,
    in which case the training pool is re-split deterministically.
    """
    root = Path(root)
    if not (root / "train" / MANIFEST_NAME).exists():
        raise FormatError(f"{root} is not a dataset root (missing train/{MANIFEST_NAME})")
    train = load_dataset(root / "train")
    val = load_dataset(root / "val") if (root / "val").exists() else []
    test = load_dataset(root / "test") if (root / "test").exists() else []
    manifest = None
    if (root / SPLIT_NAME).exists():
        manifest = SplitManifest.load(root / SPLIT_NAME)
    want_ratio = labeled_ratio if labeled_ratio is not None else (manifest.ratio if manifest else None)
    want_seed = split_seed if split_seed is not None else (manifest.seed if manifest else 0)
    if want_ratio is None:
        raise ConfigError("no split.json in dataset root and no labeled ratio given")
    if manifest is None or manifest.ratio != want_ratio or manifest.seed != want_seed:
        manifest = split_labeled_unlabeled([s.id for s in train], want_ratio, want_seed)
    labeled, unlabeled = apply_split(train, manifest)
    num_classes = 0
    for s in train + val + test:
        if s.label is not None:
            num_classes = max(num_classes, int(s.label.max()) + 1)
    spec_path = root / "synthetic_spec.json"
    if spec_path.exists():
        num_classes = max(num_classes, int(json.loads(spec_path.read_text())["num_classes"]))
    unl_ids = set(manifest.unlabeled_ids)
    hidden = [s for s in train if s.id in unl_ids and s.label is not None]
    return DatasetBundle(labeled, unlabeled, val, test, manifest, num_classes, hidden)


def augment_batch(images: np.ndarray, labels: Optional[np.ndarray], rng: np.random.Generator):
    """Random flips and 90-degree rotations, applied identically to images and labels."""
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    images = np.rot90(images, k, axes=(-2, -1))
    if labels is not None:
        labels = np.rot90(labels, k, axes=(-2, -1))
    if flip:
        images = images[..., ::-1]
        if labels is not None:
            labels = labels[..., ::-1]
    images = np.ascontiguousarray(images)
    labels = None if labels is None else np.ascontiguousarray(labels)
    return images, labels
