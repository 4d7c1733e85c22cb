"""Dataset splits, episode sampling, and data generation.

A dataset is an immutable in-memory map from class name to a stack of
samples, each class assigned to exactly one of the base/val/novel splits.
Samples are either feature row blocks (r, d) or images (3, S, S) in [0, 1].

All randomness flows through numpy Generators; helpers here never touch
global RNG state.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SPLITS = ("base", "val", "novel")


class DatasetError(ValueError):
    """Bad dataset layout, manifest, or split request."""


class SamplingError(ValueError):
    """Episode spec cannot be satisfied by the dataset."""


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Named, reproducible child stream of a root seed."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence((int(root_seed), key)))


@dataclass
class Dataset:
    """Class-indexed samples plus split assignment."""
    samples: dict           # class name -> (n, ...) float array
    splits: dict            # class name -> split name
    mode: str               # "features" | "images"

    def __post_init__(self):
        for name, split in self.splits.items():
            if split not in SPLITS:
                raise DatasetError(f"class {name!r} has unknown split {split!r}")
            if name not in self.samples:
                raise DatasetError(f"class {name!r} in split map but has no samples")

    def classes(self, split: Optional[str] = None) -> list:
        names = sorted(self.samples)
        if split is None:
            return names
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return [n for n in names if self.splits[n] == split]

    def sample_shape(self) -> tuple:
        first = next(iter(sorted(self.samples)))
        return self.samples[first].shape[1:]


def make_splits(classes: Sequence[str], ratios: Sequence[float],
                seed: int) -> dict:
    """Partition class names into base/val/novel.

    Sizes are floor(n * ratio) for base and val; the remainder goes to
    novel. Deterministic for a given seed; every class lands in exactly
    one split.
    """
    classes = list(classes)
    if len(set(classes)) != len(classes):
        raise DatasetError("duplicate class names")
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DatasetError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(classes)
    n_base = int(n * ratios[0])
    n_val = int(n * ratios[1])
    if n_base < 1 or n_val < 1 or n - n_base - n_val < 1:
        raise DatasetError(f"{n} classes cannot fill three splits at ratios {ratios}")
    order = list(classes)
    substream(seed, "splits").shuffle(order)
    out = {}
    for i, name in enumerate(order):
        if i < n_base:
            out[name] = "base"
        elif i < n_base + n_val:
            out[name] = "val"
        else:
            out[name] = "novel"
    return out


@dataclass
class EpisodeSpec:
    way: int
    shot: int
    queries: int
    split: str = "novel"

    def __post_init__(self):
        if self.way < 2:
            raise SamplingError(f"way must be >= 2, got {self.way}")
        if self.shot < 1 or self.queries < 1:
            raise SamplingError("shot and queries must be >= 1")
        if self.split not in SPLITS:
            raise SamplingError(f"unknown split {self.split!r}")


@dataclass
class Episode:
    """One C-way K-shot task. Local labels run 1..C, class-major order."""
    support_x: np.ndarray   # (C*K, ...)
    support_y: np.ndarray   # (C*K,) values 1..C
    query_x: np.ndarray     # (C*M, ...)
    query_y: np.ndarray     # (C*M,)
    class_ids: list         # local label c -> global class name, index c-1

    @property
    def way(self) -> int:
        return len(self.class_ids)


def sample_episode(spec: EpisodeSpec, dataset: Dataset,
                   rng: np.random.Generator) -> Episode:
    """Uniformly sample classes, then K+M distinct samples per class."""
    pool = dataset.classes(spec.split)
    if spec.way > len(pool):
        raise SamplingError(f"{spec.way}-way episode needs {spec.way} classes; "
                            f"split {spec.split!r} has {len(pool)}")
    chosen = [pool[i] for i in rng.choice(len(pool), size=spec.way, replace=False)]
    need = spec.shot + spec.queries
    support, query = [], []
    for name in chosen:
        stack = dataset.samples[name]
        if len(stack) < need:
            raise SamplingError(f"class {name!r} has {len(stack)} samples; "
                                f"episode needs {need}")
        idx = rng.choice(len(stack), size=need, replace=False)
        support.append(stack[idx[:spec.shot]])
        query.append(stack[idx[spec.shot:]])
    c, k, m = spec.way, spec.shot, spec.queries
    return Episode(
        support_x=np.concatenate(support, axis=0),
        support_y=np.repeat(np.arange(1, c + 1), k),
        query_x=np.concatenate(query, axis=0),
        query_y=np.repeat(np.arange(1, c + 1), m),
        class_ids=chosen,
    )


@dataclass
class SyntheticConfig:
    """Controls for the generated fine-grained surrogate dataset.

    sigma_between scales class templates, sigma_within the per-sample
    noise; their ratio sets difficulty. With signal_rank set, templates
    live in a shared random subspace of that dimension per feature row
    while the noise stays isotropic over all d dims, which keeps the task
    hard even when r*d is large.
    """
    classes: int = 30
    samples_per_class: int = 40
    mode: str = "features"       # features | images
    rows: int = 4                # r (features mode)
    feature_dim: int = 64        # d (features mode)
    image_size: int = 32         # images mode
    sigma_between: float = 10.0
    sigma_within: float = 1.0
    signal_rank: Optional[int] = None
    seed: int = 0
    split_ratios: tuple = (0.5, 0.25, 0.25)

    def __post_init__(self):
        if self.sigma_between <= 0 or self.sigma_within < 0:
            raise DatasetError("sigma_between must be > 0 and sigma_within >= 0")
        if self.mode not in ("features", "images"):
            raise DatasetError(f"unknown synthetic mode {self.mode!r}")
        if self.signal_rank is not None and not (
                1 <= self.signal_rank <= self.feature_dim):
            raise DatasetError(f"signal_rank must be in 1..{self.feature_dim}")


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Pure function of cfg: same config, byte-identical dataset."""
    rng = substream(cfg.seed, "synthetic")
    names = [f"class{i:03d}" for i in range(cfg.classes)]
    if cfg.mode == "features":
        rank = cfg.signal_rank or cfg.feature_dim
        if rank < cfg.feature_dim:
            # orthonormal lift shared by all classes
            basis, _ = np.linalg.qr(rng.standard_normal((cfg.feature_dim, rank)))
        else:
            basis = None
        samples = {}
        for name in names:
            latent = rng.standard_normal((cfg.rows, rank)) * cfg.sigma_between
            template = latent @ basis.T if basis is not None else latent
            noise = rng.standard_normal(
                (cfg.samples_per_class, cfg.rows, cfg.feature_dim)) * cfg.sigma_within
            samples[name] = (template[None, :, :] + noise).astype(np.float64)
    else:
        coarse = cfg.image_size // 8 if cfg.image_size >= 16 else 2
        reps = cfg.image_size // coarse
        samples = {}
        for name in names:
            motif = rng.standard_normal((3, coarse, coarse)) * cfg.sigma_between
            template = np.kron(motif, np.ones((reps, reps)))[:, :cfg.image_size,
                                                             :cfg.image_size]
            noise = rng.standard_normal(
                (cfg.samples_per_class, 3, cfg.image_size, cfg.image_size)
            ) * cfg.sigma_within
            imgs = np.clip(0.5 + template[None] + noise, 0.0, 1.0)
            samples[name] = imgs.astype(np.float64)
    splits = make_splits(names, cfg.split_ratios, cfg.seed)
    return Dataset(samples=samples, splits=splits, mode=cfg.mode)


def load_manifest(path) -> dict:
    """Parse a split manifest: one `class<TAB>split` per line."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError(f"{path}:{lineno}: expected `class<TAB>split`")
        name, split = parts[0].strip(), parts[1].strip()
        if split not in SPLITS:
            raise DatasetError(f"{path}:{lineno}: unknown split {split!r}")
        if name in out:
            raise DatasetError(f"{path}:{lineno}: class {name!r} listed twice")
        out[name] = split
    if not out:
        raise DatasetError(f"{path}: empty manifest")
    return out


def load_image_folder(root, manifest_path, image_size: int = 84) -> Dataset:
    """Load `root/<class>/<image files>` with splits from the manifest.

    Images are decoded, resized to image_size x image_size, and scaled to
    [0, 1] float32 with shape (3, S, S).
    """
    from PIL import Image

    root = Path(root)
    splits = load_manifest(manifest_path)
    samples = {}
    for name in sorted(splits):
        class_dir = root / name
        if not class_dir.is_dir():
            raise DatasetError(f"class {name!r} in manifest but {class_dir} is missing")
        stack = []
        for f in sorted(class_dir.iterdir()):
            if not f.is_file():
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((image_size, image_size),
                                                  Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as e:
                raise DatasetError(f"cannot read image {f}: {e}") from None
            stack.append(arr.transpose(2, 0, 1))
        if not stack:
            raise DatasetError(f"class directory {class_dir} has no images")
        samples[name] = np.stack(stack)
    return Dataset(samples=samples, splits=splits, mode="images")


def augment_images(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Training-time augmentation: random horizontal flip and colour jitter."""
    out = batch.copy()
    n = out.shape[0]
    flips = rng.random(n) < 0.5
    out[flips] = out[flips][:, :, :, ::-1]
    jitter = rng.uniform(0.8, 1.2, size=(n, 3, 1, 1))
    return np.clip(out * jitter, 0.0, 1.0)
