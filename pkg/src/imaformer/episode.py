"""Few-shot episodes, the synthetic patch-signature benchmark, FSDS files, augmentation."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FSDS_MAGIC = b"FSDS"
FSDS_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


@dataclass
class Dataset:
    """Images ``(classes, images_per_class, C, H, W)`` stored as float32 in [0, 1]."""

    images: np.ndarray
    split: str = "all"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 5:
            raise ValueError(f"Dataset images must be 5-D, got shape {self.images.shape}")
        if self.images.shape[0] == 0 or self.images.shape[1] == 0:
            raise ValueError("Dataset needs at least one class and one image per class")
        self.metadata.setdefault("class_ids", list(range(self.images.shape[0])))

    @property
    def num_classes(self) -> int:
        return self.images.shape[0]

    @property
    def images_per_class(self) -> int:
        return self.images.shape[1]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[2:]

    @property
    def class_ids(self) -> list[int]:
        return list(self.metadata["class_ids"])

    def subset(self, class_index, split: str) -> "Dataset":
        class_index = np.asarray(class_index, dtype=np.int64)
        meta = dict(self.metadata)
        meta["class_ids"] = [self.class_ids[i] for i in class_index]
        meta["split"] = split
        return Dataset(self.images[class_index], split, meta)


def split_classes(ds: Dataset, counts: dict[str, int], seed: int = 0) -> dict[str, Dataset]:
    """Partition classes into disjoint named splits (e.g. train/val/test)."""
    total = sum(counts.values())
    if total > ds.num_classes:
        raise ValueError(f"split needs {total} classes, dataset has {ds.num_classes}")
    order = np.random.default_rng([seed, 0x5A17]).permutation(ds.num_classes)
    out, start = {}, 0
    for name, n in counts.items():
        out[name] = ds.subset(np.sort(order[start : start + n]), name)
        start += n
    return out


@dataclass
class Episode:
    """An N-way K-shot task with episode-local labels in ``[0, N)``."""

    way: int
    shot: int
    queries: int
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    classes: np.ndarray
    support_index: np.ndarray
    query_index: np.ndarray
    seed: object = None


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for episode ``index`` under master ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def sample_episode(ds: Dataset, way: int, shot: int, queries: int, rng) -> Episode:
    """Draw ``way`` classes, then ``shot + queries`` distinct images per class.

    The first ``shot`` images of each class form the support set, the rest the
    query set; ``rng`` is a Generator or an int seed.
    """
    if ds.num_classes < way:
        raise ValueError(f"episode needs {way} classes, dataset has {ds.num_classes} ({way - ds.num_classes} short)")
    need = shot + queries
    if ds.images_per_class < need:
        raise ValueError(
            f"episode needs {need} images per class, dataset has {ds.images_per_class} "
            f"({need - ds.images_per_class} short)"
        )
    seed = rng if not isinstance(rng, np.random.Generator) else None
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    classes = rng.choice(ds.num_classes, size=way, replace=False)
    picks = np.stack([rng.choice(ds.images_per_class, size=need, replace=False) for _ in classes])
    s_idx, q_idx = picks[:, :shot], picks[:, shot:]
    s_img = ds.images[classes[:, None], s_idx].astype(np.float64)
    q_img = ds.images[classes[:, None], q_idx].astype(np.float64)
    c, h, w = ds.image_shape
    return Episode(
        way=way,
        shot=shot,
        queries=queries,
        support_images=s_img.reshape(way * shot, c, h, w),
        support_labels=np.repeat(np.arange(way), shot),
        query_images=q_img.reshape(way * queries, c, h, w),
        query_labels=np.repeat(np.arange(way), queries),
        classes=classes,
        support_index=s_idx,
        query_index=q_idx,
        seed=seed,
    )


# -- synthetic benchmark -------------------------------------------------------
@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the patch-signature benchmark.

    Each class owns ``signature_patches`` fixed grid cells with fixed random
    patterns; ``distractors`` cells carry patterns shared by every class; the
    rest is Gaussian background around ``background_level``.  With
    ``signature_gain=0`` the signatures vanish and classes are
    indistinguishable.
    """

    classes: int = 100
    images_per_class: int = 40
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    signature_patches: int = 2
    sigma_sig: float = 0.1
    sigma_bg: float = 0.1
    distractors: int = 2
    background_level: float = 0.5
    signature_gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.signature_patches < 1:
            raise ValueError("signature_patches must be >= 1")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.signature_patches + self.distractors > self.grid_cells:
            raise ValueError(
                f"signature_patches + distractors = {self.signature_patches + self.distractors} "
                f"exceeds {self.grid_cells} patch cells"
            )
        if self.classes < 1 or self.images_per_class < 1:
            raise ValueError("need at least one class and one image per class")

    @property
    def grid_cells(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


def class_layout(spec: SyntheticSpec):
    """Distractor cells/patterns and per-class signature cells/patterns."""
    p, c = spec.patch_size, spec.channels
    root = np.random.default_rng([spec.seed, 0])
    cells = root.permutation(spec.grid_cells)
    distractor_cells = np.sort(cells[: spec.distractors])
    free = np.sort(cells[spec.distractors :])
    distractor_patterns = root.random((spec.distractors, c, p, p))
    s = spec.signature_patches
    # when every class fits, hand out disjoint locations; otherwise classes may overlap
    disjoint = root.permutation(free) if s * spec.classes <= free.size else None
    sig_cells, sig_patterns = [], []
    for k in range(spec.classes):
        r = np.random.default_rng([spec.seed, 1, k])
        if disjoint is not None:
            sig_cells.append(np.sort(disjoint[k * s : (k + 1) * s]))
        else:
            sig_cells.append(np.sort(r.choice(free, size=s, replace=False)))
        sig_patterns.append(r.random((spec.signature_patches, c, p, p)))
    return distractor_cells, distractor_patterns, np.array(sig_cells), np.array(sig_patterns)


def _paste(img: np.ndarray, cell: int, patch: np.ndarray, grid: int, p: int) -> None:
    y, x = divmod(int(cell), grid)
    img[:, y * p : (y + 1) * p, x * p : (x + 1) * p] = patch


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    p, c, size = spec.patch_size, spec.channels, spec.image_size
    grid = size // p
    d_cells, d_pats, s_cells, s_pats = class_layout(spec)
    images = np.empty((spec.classes, spec.images_per_class, c, size, size), dtype=np.float32)
    a = spec.signature_gain
    for k in range(spec.classes):
        r = np.random.default_rng([spec.seed, 2, k])
        for n in range(spec.images_per_class):
            img = spec.background_level + spec.sigma_bg * r.standard_normal((c, size, size))
            for cell, pat in zip(d_cells, d_pats):
                _paste(img, cell, pat, grid, p)
            for cell, pat in zip(s_cells[k], s_pats[k]):
                y, x = divmod(int(cell), grid)
                bg = img[:, y * p : (y + 1) * p, x * p : (x + 1) * p]
                sig = pat + spec.sigma_sig * r.standard_normal(pat.shape)
                _paste(img, cell, (1.0 - a) * bg + a * sig, grid, p)
            images[k, n] = np.clip(img, 0.0, 1.0)
    meta = {"generator": "patch-signature", "spec": spec.to_dict(), "seed": spec.seed, "split": "all"}
    return Dataset(images, "all", meta)


# -- FSDS files ------------------------------------------------------------------
def save_dataset(ds: Dataset, path) -> None:
    """FSDS: header, f32 LE pixels (class, image, channel, row, col), u32-prefixed JSON metadata."""
    k, n, c, h, w = ds.images.shape
    meta = dict(ds.metadata)
    meta["split"] = ds.split
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FSDS_MAGIC, FSDS_VERSION, k, n, c, h, w))
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("truncated header", len(raw))
    magic, version, k, n, c, h, w = _HEADER.unpack_from(raw, 0)
    if magic != FSDS_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != FSDS_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    count = k * n * c * h * w
    offset = _HEADER.size
    end = offset + 4 * count
    if len(raw) < end + 4:
        raise DatasetFormatError("truncated pixel data", len(raw))
    images = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(k, n, c, h, w)
    (blob_len,) = struct.unpack_from("<I", raw, end)
    if len(raw) != end + 4 + blob_len:
        raise DatasetFormatError(
            f"metadata length {blob_len} does not match file size {len(raw)}", end
        )
    try:
        meta = json.loads(raw[end + 4 :].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise DatasetFormatError(f"invalid metadata: {exc}", end + 4) from None
    return Dataset(images.astype(np.float32), meta.get("split", "all"), meta)


# -- augmentation ----------------------------------------------------------------------
def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of ``(C, h, w)`` with half-pixel centres and edge clamping."""
    _, h, w = image.shape

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(height, h)
    x0, x1, fx = coords(width, w)
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.6, 1.0),
    flip_prob: float = 0.5,
) -> np.ndarray:
    """Random horizontal flip and random square crop of ``U(scale)`` area, resized back."""
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    if rng.random() < flip_prob:
        image = image[:, :, ::-1]
    area = rng.uniform(*scale)
    ch = min(h, max(1, int(round(math.sqrt(area) * h))))
    cw = min(w, max(1, int(round(math.sqrt(area) * w))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = image[:, top : top + ch, left : left + cw]
    if (ch, cw) == (h, w):
        return np.ascontiguousarray(crop)
    return resize_bilinear(crop, h, w)


def augment_batch(images: np.ndarray, rng: np.random.Generator, **kwargs) -> np.ndarray:
    return np.stack([augment(img, rng, **kwargs) for img in images])
