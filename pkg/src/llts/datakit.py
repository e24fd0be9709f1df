"""Dataset plumbing: YOLO-style label IO, synthetic night scenes, low-light
degradation, and anchor-size statistics.

Layout on disk:  <root>/images/*.png, <root>/labels/<stem>.txt with lines
"class cx cy w h" (normalized, '#' comments allowed), an optional
classes.txt naming the classes, and a manifest.json sidecar.  Pixels map
to [0,1] by /255.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._rng import STREAM_DEGRADE, STREAM_SYNTH_SCENE, stream
from .tensorops import Tensor, gaussian_blur, no_grad

DEFAULT_CLASSES = ("prohibitory", "mandatory", "warning")
# target draw frequencies for the three classes, most-common first
CLASS_RATIOS = (0.64, 0.22, 0.14)

_RED = (0.85, 0.08, 0.08)
_BLUE = (0.10, 0.20, 0.90)
_YELLOW = (0.95, 0.85, 0.10)
_WHITE = (0.95, 0.95, 0.95)


# -- domain types ----------------------------------------------------------


@dataclass(frozen=True)
class LabelRecord:
    """One normalized box: class id plus center/size in [0,1]."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not (0.0 < self.w and 0.0 < self.h):
            raise ValueError(f"box size must be positive, got {self.w}x{self.h}")
        for v in (self.cx, self.cy, self.w, self.h):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"normalized fields must lie in [0,1]: {self}")

    def to_row(self) -> list[float]:
        return [float(self.class_id), self.cx, self.cy, self.w, self.h]


@dataclass
class ImageEntry:
    path: str  # relative to the dataset root
    width: int
    height: int
    labels: list[LabelRecord] = field(default_factory=list)


@dataclass
class DatasetManifest:
    split: str
    classes: list[str] = field(default_factory=lambda: list(DEFAULT_CLASSES))
    images: list[ImageEntry] = field(default_factory=list)
    notes: dict = field(default_factory=dict)  # e.g. the degradation recipe
    malformed: int = field(default=0, compare=False)  # load-time report only

    def __post_init__(self):
        for entry in self.images:
            for rec in entry.labels:
                if rec.class_id >= len(self.classes):
                    raise ValueError(
                        f"{entry.path}: class id {rec.class_id} outside table "
                        f"of {len(self.classes)}")

    def class_counts(self) -> list[int]:
        counts = [0] * len(self.classes)
        for entry in self.images:
            for rec in entry.labels:
                counts[rec.class_id] += 1
        return counts

    def label_array(self, index: int) -> np.ndarray:
        """Labels of one image as a [K,5] float array."""
        entry = self.images[index]
        if not entry.labels:
            return np.zeros((0, 5))
        return np.array([r.to_row() for r in entry.labels])


@dataclass(frozen=True)
class DegradeParams:
    """Parametric day-to-night recipe; fields are applied in declaration order.

    Typical darkening uses gamma in [1.5, 4]; gamma 1 with unit scale/cast
    and zero sigmas is the identity, kept constructible for testing.
    """

    gamma_dark: float = 2.2
    contrast_scale: float = 0.7
    noise_sigma: float = 0.02
    blur_sigma: float = 0.8
    color_cast: tuple[float, float, float] = (0.7, 0.8, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not 1.0 <= self.gamma_dark <= 4.0:
            raise ValueError(f"gamma_dark must lie in [1,4], got {self.gamma_dark}")
        if not 0.0 < self.contrast_scale <= 1.0:
            raise ValueError(f"contrast_scale must lie in (0,1], got {self.contrast_scale}")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise_sigma and blur_sigma must be non-negative")
        if len(self.color_cast) != 3 or min(self.color_cast) <= 0:
            raise ValueError(f"color_cast needs three positive factors, got {self.color_cast}")

    def to_dict(self) -> dict:
        return {"gamma_dark": self.gamma_dark, "contrast_scale": self.contrast_scale,
                "noise_sigma": self.noise_sigma, "blur_sigma": self.blur_sigma,
                "color_cast": list(self.color_cast), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradeParams":
        d = dict(d)
        d["color_cast"] = tuple(d["color_cast"])
        return cls(**d)


# -- image file IO ---------------------------------------------------------


def save_image_png(path, image: np.ndarray) -> None:
    """[3,H,W] floats in [0,1] -> 8-bit RGB PNG (timestamp-free, so
    identical arrays give identical files)."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got {image.shape}")
    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return rgb.transpose(2, 0, 1)


# -- dataset load/save -----------------------------------------------------


def _clip_label(class_id: int, cx: float, cy: float, w: float, h: float) -> LabelRecord | None:
    """Clip box extents to [0,1]; None when nothing remains.

    In-bounds boxes pass through untouched so a save/load cycle cannot
    drift them by an ulp.
    """
    if 0.0 <= cx - w / 2 and cx + w / 2 <= 1.0 and 0.0 <= cy - h / 2 and cy + h / 2 <= 1.0:
        return LabelRecord(class_id, cx, cy, w, h)
    x1, x2 = max(0.0, cx - w / 2), min(1.0, cx + w / 2)
    y1, y2 = max(0.0, cy - h / 2), min(1.0, cy + h / 2)
    if x2 - x1 <= 0.0 or y2 - y1 <= 0.0:
        return None
    return LabelRecord(class_id, (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def _parse_label_file(path: Path, num_classes: int):
    records, malformed = [], 0
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 fields, got {len(parts)}")
            cid = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
            if cid < 0 or not all(math.isfinite(v) for v in (cx, cy, w, h)) or w <= 0 or h <= 0:
                raise ValueError("values out of range")
        except ValueError as e:
            warnings.warn(f"{path.name}:{lineno}: skipping malformed label ({e})")
            malformed += 1
            continue
        if cid >= num_classes:
            raise ValueError(f"{path.name}:{lineno}: class id {cid} outside table of {num_classes}")
        rec = _clip_label(cid, cx, cy, w, h)
        if rec is None:
            warnings.warn(f"{path.name}:{lineno}: box clips to nothing, skipping")
            malformed += 1
        else:
            records.append(rec)
    return records, malformed


def load_dataset(root_dir, split: str | None = None) -> DatasetManifest:
    """Read an images/ + labels/ pair into a manifest.

    Missing label files mean background-only images; malformed lines are
    skipped with a warning and counted; out-of-table class ids raise.
    """
    root = Path(root_dir)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise FileNotFoundError(f"no images directory under {root}")
    classes_file = root / "classes.txt"
    classes = (classes_file.read_text().split() if classes_file.exists()
               else list(DEFAULT_CLASSES))
    notes, recorded_split = {}, None
    sidecar = root / "manifest.json"
    if sidecar.exists():
        recorded = json.loads(sidecar.read_text())
        notes = recorded.get("notes", {})
        recorded_split = recorded.get("split")

    entries, malformed = [], 0
    for img_path in sorted(images_dir.iterdir()):
        if img_path.suffix.lower() not in (".png", ".jpg", ".jpeg"):
            continue
        with Image.open(img_path) as im:
            width, height = im.size
        label_path = root / "labels" / (img_path.stem + ".txt")
        labels: list[LabelRecord] = []
        if label_path.exists():
            labels, bad = _parse_label_file(label_path, len(classes))
            malformed += bad
        entries.append(ImageEntry(f"images/{img_path.name}", width, height, labels))
    return DatasetManifest(split or recorded_split or root.name, classes, entries,
                           notes=notes, malformed=malformed)


def save_dataset(manifest: DatasetManifest, root_dir, arrays: dict | None = None) -> None:
    """Write labels, class table, manifest sidecar, and any provided images.

    `arrays` maps an entry's relative path to a [3,H,W] float image.  Label
    floats are written with repr so a reload reproduces them bit-exactly.
    """
    root = Path(root_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("\n".join(manifest.classes) + "\n")
    for entry in manifest.images:
        stem = Path(entry.path).stem
        lines = [f"{r.class_id} {r.cx!r} {r.cy!r} {r.w!r} {r.h!r}" for r in entry.labels]
        (root / "labels" / f"{stem}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
        if arrays and entry.path in arrays:
            save_image_png(root / entry.path, arrays[entry.path])
    sidecar = {
        "split": manifest.split,
        "classes": manifest.classes,
        "class_counts": manifest.class_counts(),
        "num_images": len(manifest.images),
        "notes": manifest.notes,
    }
    (root / "manifest.json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=1) + "\n")


# -- synthetic night scenes ------------------------------------------------


def _paint(img: np.ndarray, mask: np.ndarray, color) -> None:
    for c in range(3):
        img[c][mask] = color[c]


def _pixel_grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size]
    return yy + 0.5, xx + 0.5  # pixel centers


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.empty((3, size, size))
    top, bottom = rng.uniform(0.02, 0.06), rng.uniform(0.06, 0.12)
    ramp = np.linspace(top, bottom, size)[:, None] * np.ones((1, size))
    for c, tint in enumerate((0.9, 0.95, 1.1)):  # cold night sky
        img[c] = np.clip(ramp * tint, 0.0, 0.2)
    # blocky skyline
    for _ in range(int(rng.integers(3, 7))):
        x0 = int(rng.integers(0, size))
        bw = int(rng.integers(size // 10, size // 3))
        bh = int(rng.integers(size // 4, size // 2))
        shade = rng.uniform(0.05, 0.18)
        img[:, size - bh:, x0:min(x0 + bw, size)] = shade
    # road band
    y0 = int(rng.integers(size * 2 // 3, size - size // 8))
    img[:, y0:, :] = rng.uniform(0.08, 0.14)
    return img


def _distractors(rng: np.random.Generator, img: np.ndarray, size: int) -> None:
    """Muted shapes that must never pass the sign color predicates."""
    ycc, xcc = _pixel_grid(size)
    for _ in range(int(rng.integers(2, 6))):
        kind = rng.integers(0, 2)
        v = rng.uniform(0.15, 0.45)
        color = {0: (v, v, v), 1: (v * 0.6, v, v * 0.55)}[int(rng.integers(0, 2))]
        if kind == 0:
            x0, y0 = rng.integers(0, size, 2)
            w, h = rng.integers(4, size // 4, 2)
            img[:, y0:y0 + h, x0:x0 + w] = np.array(color)[:, None, None]
        else:
            cx, cy = rng.uniform(0, size, 2)
            r = rng.uniform(3, size / 10)
            _paint(img, (xcc - cx) ** 2 + (ycc - cy) ** 2 <= r * r, color)


def _disc_mask(size, cx, cy, r):
    ycc, xcc = _pixel_grid(size)
    return (xcc - cx) ** 2 + (ycc - cy) ** 2 <= r * r


def _paint_prohibitory(img, cx, cy, w):
    size = img.shape[1]
    r = w / 2
    outer = _disc_mask(size, cx, cy, r)
    _paint(img, outer, _RED)  # red ring
    _paint(img, _disc_mask(size, cx, cy, 0.62 * r), _WHITE)
    _paint(img, _disc_mask(size, cx, cy, 0.2 * r), _RED)  # center dot
    return outer


def _paint_mandatory(img, cx, cy, w):
    size = img.shape[1]
    r = w / 2
    disc = _disc_mask(size, cx, cy, r)
    _paint(img, disc, _BLUE)
    ycc, xcc = _pixel_grid(size)
    bar = (np.abs(ycc - cy) <= 0.18 * r) & (np.abs(xcc - cx) <= 0.6 * r)
    _paint(img, bar, _WHITE)
    return disc


def _paint_warning(img, cx, cy, w):
    size = img.shape[1]
    r = w / 2
    ycc, xcc = _pixel_grid(size)
    # upright triangle: apex (cx, cy-r), base corners (cx -+ r, cy+r)
    inside = (ycc <= cy + r) & (np.abs(xcc - cx) * 2 <= (ycc - (cy - r)))
    _paint(img, inside, _YELLOW)
    dot = (np.abs(xcc - cx) <= 0.1 * r) & (ycc > cy) & (ycc <= cy + 0.7 * r)
    _paint(img, dot, (0.05, 0.05, 0.05))
    return inside


_PAINTERS = (_paint_prohibitory, _paint_mandatory, _paint_warning)


def synth_scene(seed: int, size: int = 160, max_signs: int = 3):
    """Deterministic night scene -> ([3,size,size] floats in [0,1], [K,5] labels).

    Renders 1..max_signs non-overlapping sign glyphs (red-ring circle, blue
    circle, yellow triangle) 12-60 px wide over a structured dark background
    with distractor shapes, and emits exact normalized labels.
    """
    if size < 48:
        raise ValueError(f"scene size must be >= 48, got {size}")
    rng = stream(seed, STREAM_SYNTH_SCENE)
    img = _background(rng, size)
    _distractors(rng, img, size)
    labels = []
    occupied: list[tuple[float, float, float, float]] = []
    for _ in range(int(rng.integers(1, max_signs + 1))):
        cid = int(rng.choice(3, p=CLASS_RATIOS))
        w = float(rng.uniform(12.0, min(60.0, size / 2)))
        half = w / 2 + 2  # 2 px halo keeps masks separable
        placed = None
        for _attempt in range(20):
            cx = float(rng.uniform(half, size - half))
            cy = float(rng.uniform(half, size - half))
            box = (cx - half, cy - half, cx + half, cy + half)
            if all(box[2] <= o[0] or o[2] <= box[0] or box[3] <= o[1] or o[3] <= box[1]
                   for o in occupied):
                placed = (cx, cy, box)
                break
        if placed is None:
            continue
        cx, cy, box = placed
        occupied.append(box)
        mask = _PAINTERS[cid](img, cx, cy, w)
        # label the painted pixels, not the requested geometry, so the box
        # bounds the glyph exactly even where rasterization trims an edge
        ys, xs = np.nonzero(mask)
        x1, x2 = float(xs.min()), float(xs.max() + 1)
        y1, y2 = float(ys.min()), float(ys.max() + 1)
        labels.append([cid, (x1 + x2) / 2 / size, (y1 + y2) / 2 / size,
                       (x2 - x1) / size, (y2 - y1) / size])
    arr = np.array(labels) if labels else np.zeros((0, 5))
    return img, arr


# -- degradation -----------------------------------------------------------


def degrade_lowlight(image: np.ndarray, p: DegradeParams) -> np.ndarray:
    """Day -> night: cast, gamma darkening, contrast reduction about the
    per-channel mean, blur, seeded noise, clamp.  Pixels stay in [0,1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got {img.shape}")
    # no-op stages are skipped so identity params are bitwise identity
    if any(c != 1.0 for c in p.color_cast):
        img = img * np.asarray(p.color_cast)[:, None, None]
    if p.gamma_dark != 1.0:
        img = np.power(np.clip(img, 0.0, 1.0), p.gamma_dark)
    if p.contrast_scale != 1.0:
        mean = img.mean(axis=(1, 2), keepdims=True)
        img = mean + p.contrast_scale * (img - mean)
    if p.blur_sigma > 0:
        ksize = 2 * math.ceil(3 * p.blur_sigma) + 1
        with no_grad():
            img = gaussian_blur(Tensor(img[None], check=False), ksize, p.blur_sigma).data[0]
    if p.noise_sigma > 0:
        img = img + stream(p.seed, STREAM_DEGRADE).normal(0.0, p.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def sample_degrade_params(seed: int) -> DegradeParams:
    """Seeded per-image draw from the corpus degradation ranges."""
    rng = stream(seed, STREAM_DEGRADE, substream=1)
    return DegradeParams(
        gamma_dark=float(rng.uniform(1.5, 4.0)),
        contrast_scale=float(rng.uniform(0.5, 0.9)),
        noise_sigma=float(rng.uniform(0.005, 0.04)),
        blur_sigma=float(rng.uniform(0.0, 1.2)),
        color_cast=(float(rng.uniform(0.5, 0.9)), float(rng.uniform(0.6, 1.0)),
                    float(rng.uniform(0.75, 1.0))),
        seed=seed,
    )


def build_synth_dataset(root_dir, count: int, size: int = 160, max_signs: int = 3,
                        seed: int = 0, degrade: bool = True,
                        split: str = "train") -> DatasetManifest:
    """Generate, optionally degrade, and write a full corpus; returns its manifest."""
    entries, arrays = [], {}
    for i in range(count):
        scene_seed = (seed << 20) + i
        img, labels = synth_scene(scene_seed, size, max_signs)
        if degrade:
            img = degrade_lowlight(img, sample_degrade_params(scene_seed))
        path = f"images/scene_{i:05d}.png"
        arrays[path] = img
        recs = [LabelRecord(int(row[0]), *map(float, row[1:])) for row in labels]
        entries.append(ImageEntry(path, size, size, recs))
    manifest = DatasetManifest(
        split, list(DEFAULT_CLASSES), entries,
        notes={"generator": {"size": size, "max_signs": max_signs, "seed": seed,
                             "count": count, "degrade": bool(degrade),
                             "order": "cast,gamma,contrast,blur,noise,clamp"}},
    )
    save_dataset(manifest, root_dir, arrays)
    return manifest


def manifest_to_pairs(manifest: DatasetManifest, root_dir):
    """(image array, label array) pairs ready for the training loop."""
    root = Path(root_dir)
    return [(load_image_png(root / e.path), manifest.label_array(i))
            for i, e in enumerate(manifest.images)]


# -- anchor statistics -----------------------------------------------------


@dataclass(frozen=True)
class AnchorStats:
    mean_w: float
    mean_h: float
    count: int
    hist: np.ndarray  # [bins, bins] counts
    w_edges: np.ndarray
    h_edges: np.ndarray


def anchor_stats(manifest: DatasetManifest, csv_path=None, bins: int = 16) -> AnchorStats:
    """Pixel-space instance sizes: means plus a binned (w,h) histogram.

    With csv_path set, writes one "w_px,h_px" row per instance.
    """
    sizes = [(rec.w * entry.width, rec.h * entry.height)
             for entry in manifest.images for rec in entry.labels]
    if not sizes:
        raise ValueError("anchor_stats needs at least one labelled instance")
    arr = np.asarray(sizes)
    hist, w_edges, h_edges = np.histogram2d(arr[:, 0], arr[:, 1], bins=bins)
    if csv_path is not None:
        lines = ["w_px,h_px"] + [f"{w!r},{h!r}" for w, h in sizes]
        Path(csv_path).write_text("\n".join(lines) + "\n")
    return AnchorStats(float(arr[:, 0].mean()), float(arr[:, 1].mean()),
                       len(sizes), hist, w_edges, h_edges)
