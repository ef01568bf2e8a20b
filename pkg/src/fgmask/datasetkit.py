"""Image transforms, masked dataset construction, manifests and a synthetic generator.

Images are float arrays in [0, 1] shaped (H, W) or (H, W, C); masks are bool
(H, W). Bounding boxes are ``(x, y, w, h)`` with x the column and y the row
of the top-left corner.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import netpbm

BBox = Tuple[int, int, int, int]

MANIFEST_HEADER = "MBMANIFEST 1"
ANNOTATION_HEADER = "MBANNOT 1"


class ManifestError(ValueError):
    def __init__(self, path, line_no, msg):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


# --------------------------------------------------------------------------
# Pixel transforms
# --------------------------------------------------------------------------

def binarize(img, threshold: float = 0.5) -> np.ndarray:
    """1 where ``img >= threshold``, else 0."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(img) >= threshold).astype(np.float64)


def _check_mask(img, mask):
    img, mask = np.asarray(img), np.asarray(mask, bool)
    if mask.shape != img.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {img.shape[:2]}")
    return img, mask


def apply_mask(img, mask) -> np.ndarray:
    """Keep foreground pixels, zero the rest (every channel)."""
    img, mask = _check_mask(img, mask)
    if img.ndim == 3:
        mask = mask[:, :, None]
    return np.where(mask, img, 0.0)


def crop_window(shape, bbox: BBox):
    """Square crop window ``(row0, col0, side)`` around ``bbox``.

    The side is ``max(w, h)`` clamped to the shorter image dimension; the
    window is centred on the box and translated (never shrunk) to fit.
    """
    H, W = shape[:2]
    x, y, w, h = (int(v) for v in bbox)
    if w < 1 or h < 1 or x >= W or y >= H or x + w <= 0 or y + h <= 0:
        raise ValueError(f"bbox {bbox} does not intersect a {H}x{W} image")
    side = min(max(w, h), H, W)
    col0 = x + (w - side) // 2
    row0 = y + (h - side) // 2
    col0 = min(max(col0, 0), W - side)
    row0 = min(max(row0, 0), H - side)
    return row0, col0, side


def crop_square(img, bbox: BBox) -> np.ndarray:
    row0, col0, side = crop_window(np.shape(img), bbox)
    return np.asarray(img)[row0:row0 + side, col0:col0 + side].copy()


def blackout_regions(img, boxes: Iterable[BBox]) -> np.ndarray:
    out = np.array(img, copy=True)
    H, W = out.shape[:2]
    for x, y, w, h in boxes:
        r0, r1 = max(int(y), 0), min(int(y + h), H)
        c0, c1 = max(int(x), 0), min(int(x + w), W)
        if r0 < r1 and c0 < c1:
            out[r0:r1, c0:c1] = 0
    return out


def resize_nn(img, out_h: int, out_w: int) -> np.ndarray:
    """Nearest neighbour with source index ``floor((i + 0.5) * in / out)``."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be positive")
    arr = np.asarray(img)
    in_h, in_w = arr.shape[:2]
    rows = ((2 * np.arange(out_h) + 1) * in_h) // (2 * out_h)
    cols = ((2 * np.arange(out_w) + 1) * in_w) // (2 * out_w)
    return arr[rows][:, cols].copy()


def foreground_fraction(mask) -> float:
    mask = np.asarray(mask, bool)
    return float(mask.sum()) / mask.size


def boxes_overlap(a: BBox, b: BBox) -> bool:
    return a[0] < b[0] + b[2] and b[0] < a[0] + a[2] and a[1] < b[1] + b[3] and b[1] < a[1] + a[3]


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Record:
    image: str
    mask: Optional[str]
    label: int


@dataclass
class DatasetManifest:
    records: List[Record]
    label_names: List[str]
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        for name in self.label_names:
            if "," in name or "\n" in name:
                raise ValueError(f"label name {name!r} may not contain commas or newlines")
        for r in self.records:
            if not 0 <= r.label < len(self.label_names):
                raise ValueError(f"label {r.label} outside [0, {len(self.label_names)})")

    def __len__(self):
        return len(self.records)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def has_masks(self) -> bool:
        return all(r.mask for r in self.records)

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.records[i] for i in indices], list(self.label_names), self.root)


def format_manifest(m: DatasetManifest) -> str:
    lines = [MANIFEST_HEADER, ",".join(m.label_names)]
    for r in m.records:
        for p in (r.image, r.mask or ""):
            if "," in p or "\n" in p:
                raise ValueError(f"path {p!r} may not contain commas or newlines")
        lines.append(f"{r.image},{r.mask or ''},{r.label}")
    return "\n".join(lines) + "\n"


def write_manifest(m: DatasetManifest, path) -> None:
    Path(path).write_text(format_manifest(m), encoding="utf-8")


def parse_manifest(text: str, source="<manifest>", root=Path(".")) -> DatasetManifest:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ManifestError(source, 1, f"expected header {MANIFEST_HEADER!r}")
    if len(lines) < 2:
        raise ManifestError(source, 2, "missing label-name line")
    names = lines[1].split(",") if lines[1] else []
    records = []
    for no, line in enumerate(lines[2:], start=3):
        parts = line.split(",")
        if len(parts) != 3 or not parts[0]:
            raise ManifestError(source, no, "expected image_relpath,mask_relpath,label")
        try:
            label = int(parts[2])
        except ValueError:
            raise ManifestError(source, no, f"label {parts[2]!r} is not an integer") from None
        if not 0 <= label < len(names):
            raise ManifestError(source, no, f"label {label} outside [0, {len(names)})")
        records.append(Record(parts[0], parts[1] or None, label))
    return DatasetManifest(records, names, Path(root))


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), path, path.parent)


def load_arrays(m: DatasetManifest, need_masks: bool = False):
    """Stack a manifest into ``(x[N, C, H, W], masks[N, H, W] or None, labels[N])``."""
    if not len(m):
        raise ValueError("manifest is empty")
    imgs, masks = [], []
    for r in m.records:
        img = netpbm.read_image(m.path(r.image))
        imgs.append(img[:, :, None] if img.ndim == 2 else img)
        if r.mask:
            masks.append(netpbm.read_mask(m.path(r.mask)))
        elif need_masks:
            raise ValueError(f"record {r.image} has no mask")
    x = np.stack(imgs).transpose(0, 3, 1, 2)
    labels = np.array([r.label for r in m.records], dtype=np.int64)
    return x, (np.stack(masks) if len(masks) == len(imgs) else None), labels


# --------------------------------------------------------------------------
# Class selection and dataset building
# --------------------------------------------------------------------------

def select_classes(freq: Dict[str, int], k: int, exclude: Iterable[str] = ()) -> List[str]:
    """Top ``k`` labels by count, descending, ignoring ``exclude``; ties go to the smaller name."""
    excluded = set(exclude)
    pool = [(name, n) for name, n in freq.items() if name not in excluded]
    if not 0 <= k <= len(pool):
        raise ValueError(f"cannot select {k} classes from {len(pool)} candidates")
    pool.sort(key=lambda item: (-item[1], item[0]))
    return [name for name, _ in pool[:k]]


@dataclass(frozen=True)
class Annotation:
    image: str
    mask: str
    bbox: BBox
    label: str


def read_annotations(path) -> List[Annotation]:
    """Normalized per-object annotations.

    Line 1 is ``MBANNOT 1``; each later line is
    ``image_relpath,mask_relpath,x,y,w,h,label_name``. Objects sharing an
    image path belong to the same picture.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != ANNOTATION_HEADER:
        raise ManifestError(path, 1, f"expected header {ANNOTATION_HEADER!r}")
    out = []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise ManifestError(path, no, "expected image,mask,x,y,w,h,label")
        try:
            bbox = tuple(int(round(float(v))) for v in parts[2:6])
        except ValueError:
            raise ManifestError(path, no, "bbox fields must be numbers") from None
        out.append(Annotation(parts[0], parts[1], bbox, parts[6]))
    return out


def write_annotations(annotations: Sequence[Annotation], path) -> None:
    lines = [ANNOTATION_HEADER]
    lines += [f"{a.image},{a.mask},{a.bbox[0]},{a.bbox[1]},{a.bbox[2]},{a.bbox[3]},{a.label}" for a in annotations]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class BuildReport:
    emitted: int = 0
    unreadable: int = 0
    filtered: int = 0
    empty_mask: int = 0
    foreground_fractions: List[float] = field(default_factory=list)

    @property
    def mean_foreground(self) -> float:
        return float(np.mean(self.foreground_fractions)) if self.foreground_fractions else 0.0


def build_dataset(annotations_path, out_dir, k: int = 10, exclude: Iterable[str] = ("person",),
                  size: int = 32):
    """Cut one square, masked-ready sample per annotated object.

    For each object of a selected class: black out the boxes of other objects
    in the same picture that overlap it, crop a square around it, resize image
    and mask to ``size`` x ``size`` and write them. Returns
    ``(manifest, report)``; the manifest is also written to
    ``out_dir/manifest.txt``.
    """
    annotations_path = Path(annotations_path)
    base = annotations_path.parent
    annotations = read_annotations(annotations_path)
    classes = select_classes(Counter(a.label for a in annotations), k, exclude)
    index = {name: i for i, name in enumerate(classes)}
    by_image: Dict[str, List[Annotation]] = {}
    for a in annotations:
        by_image.setdefault(a.image, []).append(a)

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    report = BuildReport()
    records = []
    cache: Dict[str, Optional[np.ndarray]] = {}
    for a in annotations:
        if a.label not in index:
            report.filtered += 1
            continue
        if a.image not in cache:
            try:
                cache[a.image] = netpbm.read_image(base / a.image)
            except (OSError, ValueError):
                cache[a.image] = None
        img = cache[a.image]
        try:
            mask = netpbm.read_mask(base / a.mask)
        except (OSError, ValueError):
            mask = None
        if img is None or mask is None or mask.shape != img.shape[:2]:
            report.unreadable += 1
            continue
        others = [b.bbox for b in by_image[a.image] if b is not a and boxes_overlap(b.bbox, a.bbox)]
        img = blackout_regions(img, others)
        try:
            row0, col0, side = crop_window(img.shape, a.bbox)
        except ValueError:
            report.unreadable += 1
            continue
        patch = resize_nn(img[row0:row0 + side, col0:col0 + side], size, size)
        mpatch = resize_nn(mask[row0:row0 + side, col0:col0 + side], size, size)
        if not mpatch.any():
            report.empty_mask += 1
            continue
        stem = f"{len(records):06d}"
        ext = "ppm" if patch.ndim == 3 else "pgm"
        netpbm.write_image(out_dir / "images" / f"{stem}.{ext}", patch)
        netpbm.write_mask(out_dir / "masks" / f"{stem}.pgm", mpatch)
        records.append(Record(f"images/{stem}.{ext}", f"masks/{stem}.pgm", index[a.label]))
        report.foreground_fractions.append(foreground_fraction(mpatch))
    if not records:
        raise ValueError("no records emitted; check annotation paths and class selection")
    report.emitted = len(records)
    manifest = DatasetManifest(records, classes, out_dir)
    write_manifest(manifest, out_dir / "manifest.txt")
    return manifest, report


# --------------------------------------------------------------------------
# Synthetic shapes
# --------------------------------------------------------------------------

SHAPES = ("square", "disk", "triangle", "diamond")

# size ranges as fractions of the image side; every shape covers a disk of
# radius >= 0.17 * side around the centre, so centre seeds land on it
_SIZE_RANGE = {
    "square": (0.19, 0.36),
    "disk": (0.20, 0.40),
    "triangle": (0.35, 0.47),
    "diamond": (0.25, 0.42),
}


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 1000
    side: int = 32
    n_classes: int = 2
    amplitude: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 0:
            raise ValueError("n_samples must be non-negative")
        if self.side < 8:
            raise ValueError("side must be at least 8")
        if not 2 <= self.n_classes <= len(SHAPES):
            raise ValueError(f"n_classes must lie in [2, {len(SHAPES)}]")
        if not 0 <= self.amplitude <= 1:
            raise ValueError("amplitude must lie in [0, 1]")


def shape_mask(kind: str, side: int, size: float) -> np.ndarray:
    """Support of a shape centred on the image, sampled at pixel centres."""
    c = (side - 1) / 2
    r, col = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = r - c, col - c
    if kind == "square":
        return (np.abs(dx) <= size) & (np.abs(dy) <= size)
    if kind == "disk":
        return dx * dx + dy * dy <= size * size
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= size
    if kind == "triangle":
        # upward equilateral triangle, centroid at the centre, circumradius `size`
        inr = size / 2
        return (dy <= inr) & (math.sqrt(3) * dx - dy <= size) & (-math.sqrt(3) * dx - dy <= size)
    raise ValueError(f"unknown shape {kind!r}")


def synth_sample(rng: np.random.Generator, cfg: SynthConfig):
    """One (image, mask, label) triple drawn from ``rng``."""
    label = int(rng.integers(cfg.n_classes))
    kind = SHAPES[label]
    lo, hi = _SIZE_RANGE[kind]
    size = rng.uniform(lo, hi) * cfg.side
    while True:
        color = rng.uniform(0.0, 1.0, 3)
        if color.max() >= 0.6:
            break
    background = rng.uniform(0.0, cfg.amplitude, (cfg.side, cfg.side, 3)) if cfg.amplitude else \
        np.zeros((cfg.side, cfg.side, 3))
    mask = shape_mask(kind, cfg.side, size)
    img = np.where(mask[:, :, None], color, background)
    return img, mask, label


def synth_generate(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write ``cfg.n_samples`` shape images, masks and ``manifest.txt`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    records = []
    for i in range(cfg.n_samples):
        img, mask, label = synth_sample(rng, cfg)
        stem = f"{i:06d}"
        netpbm.write_image(out_dir / "images" / f"{stem}.ppm", img)
        netpbm.write_mask(out_dir / "masks" / f"{stem}.pgm", mask)
        records.append(Record(f"images/{stem}.ppm", f"masks/{stem}.pgm", label))
    manifest = DatasetManifest(records, list(SHAPES[:cfg.n_classes]), out_dir)
    write_manifest(manifest, out_dir / "manifest.txt")
    return manifest


def manifest_foreground_fractions(m: DatasetManifest) -> np.ndarray:
    return np.array([foreground_fraction(netpbm.read_mask(m.path(r.mask))) for r in m.records if r.mask])
