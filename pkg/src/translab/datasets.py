"""Trans10K-format data: manifests, mask codec, synthetic data and statistics.

On-disk layout::

    root/train/images/<name>.jpg|png
    root/train/masks/<name>_mask.png
    root/validation/{images,masks}/...      (same for test)
    root/validation/easy.txt, hard.txt      (same for test)
    root/validation/{easy,hard}/{images,masks}/...   (alternative, no .txt needed)
    root/train/train.txt                    (optional)

Manifest lines are ``image_path<TAB>mask_path<TAB>difficulty`` with paths
relative to the split directory. A bare image name per line is accepted too.
Masks are single-channel 8-bit PNGs holding the raw ids 0 (background),
1 (things) and 2 (stuff).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from torch.utils.data import Dataset

from translab.boundary import DEFAULT_THICKNESS, generate_boundary

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
SPLIT_ALIASES = {"val": "validation", "valid": "validation"}
DIFFICULTIES = ("easy", "hard")
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
MASK_SUFFIX = "_mask.png"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

AREA_BINS = 32
HEATMAP_SIZE = 64
RESOLUTION_EDGES_MP = tuple(np.round(np.arange(0.0, 10.5, 0.5), 1))

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class DatasetError(RuntimeError):
    """Raised when a dataset root does not follow the documented layout."""


@dataclass(frozen=True)
class SampleRecord:
    image_path: Path
    mask_path: Path
    split: str
    difficulty: str = "none"


def canonical_split(split):
    split = SPLIT_ALIASES.get(split, split)
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    return split


def _stem(path):
    name = Path(path).name
    if name.endswith(MASK_SUFFIX):
        return name[: -len(MASK_SUFFIX)]
    return Path(name).stem


def _scan_pairs(split_dir):
    image_dir, mask_dir = split_dir / "images", split_dir / "masks"
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise DatasetError(f"missing directory: {d}")
    images = {_stem(p): p for p in image_dir.iterdir()
              if p.suffix.lower() in IMAGE_EXTENSIONS}
    masks = {_stem(p): p for p in mask_dir.iterdir() if p.name.endswith(MASK_SUFFIX)}
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        raise DatasetError(
            f"image/mask basename mismatch in {split_dir}: {orphans[0]!r}"
            + (f" (+{len(orphans) - 1} more)" if len(orphans) > 1 else ""))
    return {k: (images[k], masks[k]) for k in images}


def _read_manifest(path, split_dir, default_difficulty):
    pairs = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        image = split_dir / fields[0] if not Path(fields[0]).is_absolute() else Path(fields[0])
        if len(fields) == 1:
            image = split_dir / "images" / Path(fields[0]).name
            mask = split_dir / "masks" / (_stem(fields[0]) + MASK_SUFFIX)
        else:
            mask = split_dir / fields[1] if not Path(fields[1]).is_absolute() else Path(fields[1])
        difficulty = fields[2] if len(fields) > 2 else default_difficulty
        if _stem(image) != _stem(mask):
            raise DatasetError(f"image/mask basename mismatch at {path}:{lineno}: "
                               f"{image.name!r} vs {mask.name!r}")
        for p in (image, mask):
            if not p.is_file():
                raise DatasetError(f"{path}:{lineno}: file not found: {p}")
        pairs[_stem(image)] = (image, mask, difficulty)
    return pairs


def load_manifest(root, split, difficulty="all"):
    """Records of one split, sorted by image path.

    ``difficulty`` is ``"easy"``, ``"hard"`` or ``"all"``; train records carry
    difficulty ``"none"`` and are returned for ``"all"`` only.
    """
    root = Path(root)
    split = canonical_split(split)
    if difficulty not in ("all", *DIFFICULTIES):
        raise ValueError(f"unknown difficulty {difficulty!r}")
    split_dir = root / split
    if not split_dir.is_dir():
        raise DatasetError(f"missing directory: {split_dir}")

    records = []
    if split == "train":
        manifest = split_dir / "train.txt"
        if manifest.is_file():
            pairs = _read_manifest(manifest, split_dir, "none")
        else:
            pairs = {k: (*v, "none") for k, v in _scan_pairs(split_dir).items()}
        if difficulty != "all":
            return []
        records = [SampleRecord(i, m, split, "none") for i, m, _ in pairs.values()]
    else:
        wanted = DIFFICULTIES if difficulty == "all" else (difficulty,)
        seen = {}
        for level in DIFFICULTIES:
            manifest = split_dir / f"{level}.txt"
            if manifest.is_file():
                pairs = _read_manifest(manifest, split_dir, level)
            elif (split_dir / level).is_dir():
                # released layout: <split>/<level>/{images,masks}
                pairs = {k: (*v, level) for k, v in _scan_pairs(split_dir / level).items()}
            else:
                raise DatasetError(f"missing manifest: {manifest} (and no {level}/ directory)")
            for stem, (image, mask, _) in pairs.items():
                if stem in seen:
                    raise DatasetError(f"{stem!r} listed as both easy and hard in {split_dir}")
                seen[stem] = level
                if level in wanted:
                    records.append(SampleRecord(image, mask, split, level))
    return sorted(records, key=lambda r: str(r.image_path))


def decode_mask(mask_path):
    """Read a mask PNG into a ``uint8`` (H, W) array of class ids {0, 1, 2}."""
    with Image.open(mask_path) as im:
        if im.mode in ("P", "L", "I", "I;16"):
            arr = np.array(im)
        elif im.mode in ("RGB", "RGBA", "LA"):
            arr = np.array(im)[..., :3] if im.mode != "LA" else np.array(im)[..., :1]
            if not (arr == arr[..., :1]).all():
                raise ValueError(f"{mask_path}: expected a single-channel indexed mask, "
                                 f"got multi-channel {im.mode} with differing channels")
            arr = arr[..., 0]
        else:
            raise ValueError(f"{mask_path}: unsupported mask mode {im.mode}")
    illegal = sorted(set(np.unique(arr).tolist()) - {0, 1, 2})
    if illegal:
        raise ValueError(f"{mask_path}: illegal class id {{{', '.join(map(str, illegal))}}}")
    return arr.astype(np.uint8)


def encode_mask(mask, mask_path):
    mask = np.asarray(mask)
    if mask.ndim != 2 or not np.isin(mask, (0, 1, 2)).all():
        raise ValueError("mask must be a 2-D array over {0, 1, 2}")
    Image.fromarray(mask.astype(np.uint8), mode="L").save(mask_path)


def load_image(image_path):
    with Image.open(image_path) as im:
        return np.array(im.convert("RGB"))


# ---------------------------------------------------------------------------
# synthetic desk-scale data


def _background(rng, size):
    """Smooth colored texture: low-frequency noise plus a gradient and stripes."""
    coarse = rng.uniform(0, 255, size=(3, 6, 6))
    base = np.stack([ndimage.zoom(c, size / 6, order=3, mode="nearest")[:size, :size]
                     for c in coarse], axis=-1)
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, np.pi)
    freq = rng.uniform(3, 10)
    stripes = 25 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    img = base + stripes[..., None] + rng.normal(0, 4, size=(size, size, 3))
    return np.clip(img, 0, 255)


def _blend(img, region, rng, size):
    """Alpha-blend a transparent-looking object over ``img`` inside ``region``.

    The object interior is the (slightly shifted, i.e. refracted) background
    mixed with a pale tint; a thin bright rim marks its edge.
    """
    alpha = rng.uniform(0.15, 0.5)
    tint = rng.uniform(180, 255, size=3)
    shift = rng.integers(-max(1, size // 32), max(1, size // 32) + 1, size=2)
    refracted = np.roll(img, shift=tuple(shift), axis=(0, 1))
    inside = (1 - alpha) * refracted + alpha * tint
    rim = region & ~ndimage.binary_erosion(region, iterations=max(1, size // 96))
    out = img.copy()
    out[region] = inside[region]
    out[rim] = (1 - 2 * alpha) * out[rim] + 2 * alpha * 255
    return out


def _render_sample(rng, size, hard=False):
    img = _background(rng, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]

    n_stuff = int(rng.integers(0, 2 + hard))
    for _ in range(n_stuff):
        h, w = rng.uniform(0.35, 0.8, size=2) * size
        y0, x0 = rng.uniform(0, size - h), rng.uniform(0, size - w)
        region = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        img = _blend(img, region, rng, size)
        mask[region] = 2

    n_things = int(rng.integers(1 if n_stuff == 0 else 0, 3 + 2 * hard))
    for _ in range(n_things):
        ry, rx = rng.uniform(0.06, 0.18, size=2) * size
        cy, cx = rng.uniform(0.15, 0.85, size=2) * size
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        region = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        img = _blend(img, region, rng, size)
        mask[region] = 1

    img = np.clip(img + rng.normal(0, 3, size=img.shape), 0, 255)
    return img.astype(np.uint8), mask


def _write_split(split_dir, names, rng, size, difficulties):
    (split_dir / "images").mkdir(parents=True, exist_ok=True)
    (split_dir / "masks").mkdir(parents=True, exist_ok=True)
    lines = {}
    for name, level in zip(names, difficulties):
        img, mask = _render_sample(rng, size, hard=(level == "hard"))
        Image.fromarray(img).save(split_dir / "images" / f"{name}.png")
        encode_mask(mask, split_dir / "masks" / f"{name}{MASK_SUFFIX}")
        lines.setdefault(level, []).append(
            f"images/{name}.png\tmasks/{name}{MASK_SUFFIX}\t{level}")
    return lines


def make_synthetic(out_root, n_images, image_size=256, seed=0, n_val=0):
    """Write a synthetic Trans10K-format dataset and return its root.

    ``n_images`` train pairs go to ``train/``; ``n_val`` extra pairs go to
    ``validation/`` split evenly into easy and hard (hard scenes hold more,
    overlapping objects). Output is byte-identical for equal arguments.
    """
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    if n_val < 0:
        raise ValueError(f"n_val must be >= 0, got {n_val}")
    out_root = Path(out_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {out_root}: {exc}") from exc
    if not os.access(out_root, os.W_OK):
        raise DatasetError(f"output root is not writable: {out_root}")

    rng = np.random.default_rng(seed)
    lines = _write_split(out_root / "train", [f"syn_{i:05d}" for i in range(n_images)],
                         rng, image_size, ["none"] * n_images)
    (out_root / "train" / "train.txt").write_text("\n".join(lines["none"]) + "\n")

    if n_val:
        levels = ["easy" if i % 2 == 0 else "hard" for i in range(n_val)]
        lines = _write_split(out_root / "validation", [f"val_{i:05d}" for i in range(n_val)],
                             rng, image_size, levels)
        for level in DIFFICULTIES:
            entries = lines.get(level, [])
            (out_root / "validation" / f"{level}.txt").write_text(
                "\n".join(entries) + ("\n" if entries else ""))
    return out_root


# ---------------------------------------------------------------------------
# statistics


def connected_components(mask, class_id):
    """8-connected components of ``class_id`` as a list of (K, 2) row/col arrays."""
    labels, n = ndimage.label(np.asarray(mask) == class_id, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    order = np.argsort(labels, axis=None, kind="stable")
    flat = labels.ravel()[order]
    bounds = np.searchsorted(flat, np.arange(1, n + 2))
    coords = np.stack(np.unravel_index(order, labels.shape), axis=1)
    return [coords[bounds[i]:bounds[i + 1]] for i in range(n)]


@dataclass
class StatsAccumulator:
    """Additive partial statistics; ``merge`` is associative and commutative."""

    n_images: int = 0
    n_components: int = 0
    area_counts: np.ndarray = field(default_factory=lambda: np.zeros(AREA_BINS, np.int64))
    resolution_counts: np.ndarray = field(
        default_factory=lambda: np.zeros(len(RESOLUTION_EDGES_MP) - 1, np.int64))
    heat: np.ndarray = field(
        default_factory=lambda: np.zeros((2, HEATMAP_SIZE, HEATMAP_SIZE), np.int64))
    class_counts: dict = field(
        default_factory=lambda: {"only_things": 0, "only_stuff": 0, "both": 0, "none": 0})

    def add_mask(self, mask):
        h, w = mask.shape
        self.n_images += 1
        mp = h * w / 1e6
        edges = RESOLUTION_EDGES_MP
        self.resolution_counts[min(np.searchsorted(edges, mp, side="right") - 1,
                                   len(edges) - 2)] += 1
        present = []
        for k, class_id in enumerate((1, 2)):
            comps = connected_components(mask, class_id)
            present.append(bool(comps))
            self.n_components += len(comps)
            for comp in comps:
                ratio = len(comp) / (h * w)
                self.area_counts[min(int(ratio * AREA_BINS), AREA_BINS - 1)] += 1
                cy, cx = comp.mean(axis=0)
                gy = min(int((cy + 0.5) / h * HEATMAP_SIZE), HEATMAP_SIZE - 1)
                gx = min(int((cx + 0.5) / w * HEATMAP_SIZE), HEATMAP_SIZE - 1)
                self.heat[k, gy, gx] += 1
        key = {(True, False): "only_things", (False, True): "only_stuff",
               (True, True): "both", (False, False): "none"}[tuple(present)]
        self.class_counts[key] += 1
        return self

    def merge(self, other):
        return StatsAccumulator(
            n_images=self.n_images + other.n_images,
            n_components=self.n_components + other.n_components,
            area_counts=self.area_counts + other.area_counts,
            resolution_counts=self.resolution_counts + other.resolution_counts,
            heat=self.heat + other.heat,
            class_counts={k: self.class_counts[k] + other.class_counts[k]
                          for k in self.class_counts},
        )

    def finalize(self):
        if self.n_images == 0:
            raise ValueError("no images accumulated")
        heat = self.heat.astype(np.float64)
        peak = heat.reshape(2, -1).max(axis=1)
        heat = heat / np.where(peak > 0, peak, 1.0)[:, None, None]
        return DatasetStats(
            mcc=self.n_components / self.n_images,
            area_ratio_hist=self.area_counts.copy(),
            resolution_hist=self.resolution_counts.copy(),
            location_heatmap={"things": heat[0], "stuff": heat[1]},
            per_class_image_counts=dict(self.class_counts),
            n_images=self.n_images,
            n_components=self.n_components,
        )


@dataclass
class DatasetStats:
    mcc: float
    area_ratio_hist: np.ndarray
    resolution_hist: np.ndarray
    location_heatmap: dict
    per_class_image_counts: dict
    n_images: int
    n_components: int

    def to_json(self, include_heatmap=False):
        out = {
            "mcc": self.mcc,
            "n_images": self.n_images,
            "n_components": self.n_components,
            "area_ratio_hist": {
                "edges": np.linspace(0.0, 1.0, AREA_BINS + 1).tolist(),
                "counts": self.area_ratio_hist.tolist(),
            },
            "resolution_hist_mp": {
                "edges": list(RESOLUTION_EDGES_MP),
                "counts": self.resolution_hist.tolist(),
            },
            "per_class_image_counts": self.per_class_image_counts,
        }
        if include_heatmap:
            out["location_heatmap"] = {k: v.tolist() for k, v in self.location_heatmap.items()}
        return json.dumps(out, indent=2)


def compute_stats(records):
    """Dataset complexity statistics: MCC, area-ratio/resolution histograms,
    per-class location heatmaps and thing/stuff image counts.

    MCC counts 8-connected components per class and sums over both classes.
    """
    records = list(records)
    if not records:
        raise ValueError("compute_stats needs a nonempty record list")
    acc = StatsAccumulator()
    for rec in records:
        acc = acc.merge(StatsAccumulator().add_mask(decode_mask(rec.mask_path)))
    return acc.finalize()


# ---------------------------------------------------------------------------
# torch dataset


def normalize_image(img):
    """uint8 (H, W, 3) -> float tensor (3, H, W) with ImageNet mean/std."""
    t = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).float() / 255.0
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (t - mean) / std


def resize_pair(img, mask, size):
    """Resize image (bilinear) and mask (nearest) to ``size`` x ``size``."""
    img = np.array(Image.fromarray(img).resize((size, size), Image.BILINEAR))
    if mask is not None:
        mask = np.array(Image.fromarray(mask).resize((size, size), Image.NEAREST))
    return img, mask


class SegmentationDataset(Dataset):
    """Resized, normalized samples with boundary ground truth built after resize."""

    def __init__(self, records, input_size=512, thickness=DEFAULT_THICKNESS,
                 hflip=False, seed=0):
        self.records = list(records)
        self.input_size = input_size
        self.thickness = thickness
        self.hflip = hflip
        self.seed = seed
        self.epoch = 0

    def __len__(self):
        return len(self.records)

    def __getitem__(self, index):
        rec = self.records[index]
        img, mask = resize_pair(load_image(rec.image_path), decode_mask(rec.mask_path),
                                self.input_size)
        if self.hflip:
            rng = np.random.default_rng((self.seed, self.epoch, index))
            if rng.random() < 0.5:
                img, mask = img[:, ::-1], mask[:, ::-1]
        boundary = generate_boundary(mask, self.thickness)
        return {
            "image": normalize_image(img),
            "mask": torch.from_numpy(np.ascontiguousarray(mask)).long(),
            "boundary": torch.from_numpy(boundary).float()[None],
            "index": index,
        }
