"""Procedural shapes dataset, IDX ingestion and the balanced per-class sampler."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._container import FormatError, TruncatedError, pack_arrays, read_container, unpack_arrays, write_container

DATASET_MAGIC = b"SSDS"

CLASS_NAMES = (
    "triangle", "square", "pentagon", "hexagon",
    "circle", "ellipse",
    "hbar", "vbar", "cross", "ring",
)
FAMILIES = {
    "polygons": ("triangle", "square", "pentagon", "hexagon"),
    "round": ("circle", "ellipse"),
    "strokes": ("hbar", "vbar", "cross", "ring"),
}
# each family is drawn by one geometry generator
FAMILY_GENERATOR = {"polygons": "regular_polygon", "round": "filled_ellipse", "strokes": "thick_stroke"}

MIN_IMAGE_SIZE = 16


@dataclass(frozen=True)
class ShapesConfig:
    image_size: int = 32
    train_per_class: int = 500
    val_per_class: int = 100
    test_per_class: int = 100
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("train_per_class", "val_per_class", "test_per_class"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")

    @property
    def class_names(self) -> tuple[str, ...]:
        return CLASS_NAMES

    @property
    def num_classes(self) -> int:
        return len(CLASS_NAMES)

    def family_of(self, cls: int | str) -> str:
        name = CLASS_NAMES[cls] if isinstance(cls, (int, np.integer)) else cls
        for fam, members in FAMILIES.items():
            if name in members:
                return fam
        raise KeyError(name)

    def generator_of(self, cls: int | str) -> str:
        return FAMILY_GENERATOR[self.family_of(cls)]

    def family_labels(self) -> list[str]:
        return [self.family_of(c) for c in range(self.num_classes)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabeledSet:
    """A split: images N×C×H×W in [0, 1], labels, optional masks and boxes.

    ``ids`` are unique sample identifiers across all splits of a dataset.
    """

    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray | None = None
    bboxes: np.ndarray | None = None
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.ids is None:
            self.ids = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> LabeledSet:
        idx = np.asarray(idx)
        return LabeledSet(
            self.images[idx],
            self.labels[idx],
            None if self.masks is None else self.masks[idx],
            None if self.bboxes is None else self.bboxes[idx],
            self.ids[idx],
        )


# ------------------------------------------------------------- rasterizing


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size]
    return ys + 0.5, xs + 0.5


def _rotate(ys, xs, cy, cx, angle):
    dy, dx = ys - cy, xs - cx
    c, s = np.cos(angle), np.sin(angle)
    return c * dy - s * dx, s * dy + c * dx


def regular_polygon(ys, xs, cy, cx, radius, sides, angle):
    v = angle + 2 * np.pi * np.arange(sides) / sides
    vy, vx = cy + radius * np.sin(v), cx + radius * np.cos(v)
    inside = np.ones(ys.shape, dtype=bool)
    for k in range(sides):
        ay, ax = vy[k], vx[k]
        by, bx = vy[(k + 1) % sides], vx[(k + 1) % sides]
        # vertices run counter-clockwise in (x, y); interior is on the left
        inside &= (bx - ax) * (ys - ay) - (by - ay) * (xs - ax) >= 0
    return inside


def filled_ellipse(ys, xs, cy, cx, a, b, angle):
    u, v = _rotate(ys, xs, cy, cx, angle)
    return (u / b) ** 2 + (v / a) ** 2 <= 1.0


def _segment_distance(ys, xs, p, q):
    py, px = p
    qy, qx = q
    dy, dx = qy - py, qx - px
    t = np.clip(((ys - py) * dy + (xs - px) * dx) / (dy * dy + dx * dx), 0.0, 1.0)
    return np.hypot(ys - (py + t * dy), xs - (px + t * dx))


def thick_stroke(ys, xs, cy, cx, strokes, width):
    """Pixels within ``width / 2`` of any stroke (segments or circles)."""
    dist = np.full(ys.shape, np.inf)
    for kind, params in strokes:
        if kind == "segment":
            d = _segment_distance(ys, xs, *params)
        else:
            d = np.abs(np.hypot(ys - cy, xs - cx) - params)
        dist = np.minimum(dist, d)
    return dist <= width / 2


def _draw_mask(name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = _pixel_grid(size)
    extent = rng.uniform(0.30, 0.42) * size
    margin = extent + 1.0
    cy, cx = rng.uniform(margin, size - margin, size=2)
    angle = rng.uniform(0, 2 * np.pi)
    if name in FAMILIES["polygons"]:
        sides = 3 + FAMILIES["polygons"].index(name)
        return regular_polygon(ys, xs, cy, cx, extent, sides, angle)
    if name == "circle":
        return filled_ellipse(ys, xs, cy, cx, extent * 0.9, extent * 0.9, 0.0)
    if name == "ellipse":
        return filled_ellipse(ys, xs, cy, cx, extent, extent * rng.uniform(0.4, 0.6), angle)
    width = rng.uniform(0.09, 0.14) * size
    jitter = rng.uniform(-0.15, 0.15)
    horiz = ((cy + extent * np.sin(jitter), cx - extent * np.cos(jitter)),
             (cy - extent * np.sin(jitter), cx + extent * np.cos(jitter)))
    vert = ((cy - extent * np.cos(jitter), cx - extent * np.sin(jitter)),
            (cy + extent * np.cos(jitter), cx + extent * np.sin(jitter)))
    if name == "hbar":
        return thick_stroke(ys, xs, cy, cx, [("segment", horiz)], width)
    if name == "vbar":
        return thick_stroke(ys, xs, cy, cx, [("segment", vert)], width)
    if name == "cross":
        return thick_stroke(ys, xs, cy, cx, [("segment", horiz), ("segment", vert)], width)
    if name == "ring":
        return thick_stroke(ys, xs, cy, cx, [("circle", extent - width / 2)], width)
    raise KeyError(name)


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def _render_split(config: ShapesConfig, per_class: int, rng, id_start: int) -> LabeledSet:
    size = config.image_size
    n = per_class * config.num_classes
    labels = np.repeat(np.arange(config.num_classes), per_class)
    images = np.zeros((n, 1, size, size))
    masks = np.zeros((n, size, size), dtype=bool)
    bboxes = np.zeros((n, 4), dtype=np.int64)
    for i, c in enumerate(labels):
        mask = _draw_mask(CLASS_NAMES[c], size, rng)
        fg = rng.uniform(0.6, 1.0)
        img = mask * fg + rng.normal(0.0, config.noise, size=(size, size)) if config.noise else mask * fg
        images[i, 0] = np.clip(img, 0.0, 1.0)
        masks[i] = mask
        bboxes[i] = tight_bbox(mask)
    order = rng.permutation(n)
    return LabeledSet(images[order], labels[order], masks[order], bboxes[order], id_start + np.arange(n))


def generate_shapes(config: ShapesConfig = ShapesConfig()) -> dict[str, LabeledSet]:
    """Deterministic train/val/test splits for ``config``."""
    if config.image_size < MIN_IMAGE_SIZE:
        raise ValueError(f"image size {config.image_size} is below the minimum {MIN_IMAGE_SIZE}")
    rng = np.random.default_rng(config.seed)
    splits, start = {}, 0
    for name, per_class in (("train", config.train_per_class), ("val", config.val_per_class),
                            ("test", config.test_per_class)):
        splits[name] = _render_split(config, per_class, rng, start)
        start += len(splits[name])
    return splits


# --------------------------------------------------------------------- IDX


class IdxFormatError(FormatError):
    pass


def _read_idx(path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedError(f"{path}: too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - head < count:
        raise TruncatedError(f"{path}: expected {count} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledSet:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]. No masks."""
    images = _read_idx(images_path, 0x00000803)
    labels = _read_idx(labels_path, 0x00000801)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    return LabeledSet(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        fh.write(array.tobytes())


# --------------------------------------------------------------- sampling


def balanced_epoch(labels, c: int, seed: int, epoch: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """All samples of class ``c`` plus as many others drawn without replacement.

    Returns shuffled sample indices and a boolean relevance flag (label == c).
    The draw depends on ``(seed, epoch)`` only.
    """
    labels = np.asarray(getattr(labels, "labels", labels))
    pos = np.flatnonzero(labels == c)
    neg = np.flatnonzero(labels != c)
    if len(pos) == 0:
        raise ValueError(f"class {c} has no samples")
    if len(neg) < len(pos):
        raise ValueError(f"class {c}: only {len(neg)} other samples for {len(pos)} positives")
    rng = np.random.default_rng([seed, epoch])
    picked = np.sort(rng.choice(neg, size=len(pos), replace=False))
    idx = rng.permutation(np.concatenate([pos, picked]))
    return idx, labels[idx] == c


# ----------------------------------------------------------------- caching


def save_dataset(path, config: ShapesConfig, splits: dict[str, LabeledSet]) -> None:
    images = {f"{k}.images": v.images for k, v in splits.items()}
    masks = {f"{k}.masks": v.masks for k, v in splits.items() if v.masks is not None}
    img_dir, img_blob = pack_arrays(images, "f4")
    mask_dir, mask_blob = pack_arrays(masks, "u1")
    for entry in mask_dir:
        entry["offset"] += len(img_blob)
    header = {
        "config": config.to_dict(),
        "tensors": img_dir + mask_dir,
        "labels": {k: v.labels.tolist() for k, v in splits.items()},
        "bboxes": {k: None if v.bboxes is None else v.bboxes.tolist() for k, v in splits.items()},
        "ids": {k: v.ids.tolist() for k, v in splits.items()},
    }
    write_container(path, DATASET_MAGIC, header, img_blob + mask_blob)


def load_dataset(path) -> tuple[ShapesConfig, dict[str, LabeledSet]]:
    header, payload = read_container(path, DATASET_MAGIC)
    arrays = unpack_arrays(header["tensors"], payload, path)
    splits = {}
    for name, labels in header["labels"].items():
        splits[name] = LabeledSet(
            arrays[f"{name}.images"].astype(np.float64),
            np.asarray(labels, dtype=np.int64),
            arrays[f"{name}.masks"].astype(bool) if f"{name}.masks" in arrays else None,
            None if header["bboxes"][name] is None else np.asarray(header["bboxes"][name], dtype=np.int64),
            np.asarray(header["ids"][name], dtype=np.int64),
        )
    return ShapesConfig(**header["config"]), splits
