"""Synthetic shape scenes with joint box + mask ground truth.

On-disk layout::

    <dir>/manifest.json
    <dir>/images/<id>.ppm   binary P6, 8-bit RGB
    <dir>/masks/<id>.pgm    binary P5, one label byte per pixel

Manifest schema (``version`` 1)::

    {
      "format": "triplenet-synth",
      "version": 1,
      "image_size": [H, W],
      "class_names": ["rectangle", ...],        # classes 1..K in order
      "samples": [
        {"id": "...", "image": "images/<id>.ppm", "mask": "masks/<id>.pgm",
         "boxes": [{"class": k, "cx": .., "cy": .., "w": .., "h": ..}, ...]}
      ]
    }

Box coordinates are normalized center form. Boxes are amodal (full shape
extent); masks are modal (visible pixels only, front shape wins).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from triplenet.anchors import Box

SHAPES = ("rectangle", "disk", "triangle", "diamond", "cross")
MANIFEST_VERSION = 1
MAX_OCCLUSION = 0.7
MAX_REJECTIONS = 100
MIN_BOX_PX = 4
IGNORE = 255  # mask label excluded from losses and metrics


class DatasetError(ValueError):
    pass


@dataclass
class GenConfig:
    image_size: tuple = (96, 96)
    num_classes: int = 3
    min_size: float = 0.15  # shape extent as a fraction of the shorter image side
    max_size: float = 0.6
    max_objects: int = 3
    noise: float = 0.04

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in 2..{len(SHAPES)}, got {self.num_classes}")
        if not 0 < self.min_size <= self.max_size <= 1:
            raise ValueError(f"need 0 < min_size <= max_size <= 1, got {self.min_size}, {self.max_size}")
        if self.min_size * min(self.image_size) < MIN_BOX_PX + 1:
            raise ValueError(f"min_size {self.min_size} gives shapes under {MIN_BOX_PX + 1} px")
        if self.max_objects < 1:
            raise ValueError("max_objects must be >= 1")

    def class_names(self) -> list:
        return list(SHAPES[: self.num_classes])


@dataclass
class SceneSample:
    image: np.ndarray  # (3, H, W) float in [0, 1]
    boxes: list  # [(Box, class)]
    class_mask: np.ndarray  # (H, W) uint8
    sample_id: str = ""

    def box_array(self) -> np.ndarray:
        return np.array([b.as_array() for b, _ in self.boxes]).reshape(-1, 4)

    def class_array(self) -> np.ndarray:
        return np.array([k for _, k in self.boxes], dtype=np.int64)


def render_shape(kind: str, cx: float, cy: float, size: float, shape_hw: tuple, aspect: float = 1.0) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the shape (pixel units)."""
    H, W = shape_hw
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    dx, dy = xx - cx, yy - cy
    r = size / 2
    if kind == "rectangle":
        return (np.abs(dx) < r) & (np.abs(dy) < r * aspect)
    if kind == "disk":
        return dx * dx + dy * dy < r * r
    if kind == "triangle":
        t = (dy + r) / size  # 0 at apex, 1 at base
        return (t > 0) & (t < 1) & (np.abs(dx) < t * r)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) < r
    if kind == "cross":
        bar = r / 3
        return ((np.abs(dx) < r) & (np.abs(dy) < bar)) | ((np.abs(dy) < r) & (np.abs(dx) < bar))
    raise ValueError(f"unknown shape {kind!r}")


def mask_box(mask: np.ndarray) -> Box:
    """Tight normalized box around the True pixels of ``mask``."""
    H, W = mask.shape
    ys, xs = np.nonzero(mask)
    return Box.from_corners(xs.min() / W, ys.min() / H, (xs.max() + 1) / W, (ys.max() + 1) / H)


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _contrast_color(rng, bg: float) -> np.ndarray:
    for _ in range(50):
        col = rng.uniform(0.0, 1.0, 3)
        if abs(col.mean() - bg) > 0.2:
            return col
    return np.full(3, 1.0 if bg < 0.5 else 0.0)


def generate_scene(rng_seed: int, gen: GenConfig, sample_id: str | None = None) -> SceneSample:
    rng = np.random.default_rng(rng_seed)
    H, W = gen.image_size
    side = min(H, W)
    n_target = int(rng.integers(1, gen.max_objects + 1))
    placed = []  # (class, full mask)
    while len(placed) < n_target:
        ok = False
        for _ in range(MAX_REJECTIONS):
            k = int(rng.integers(1, gen.num_classes + 1))
            size = rng.uniform(gen.min_size, gen.max_size) * side
            aspect = rng.uniform(0.6, 1.0)
            cx = rng.uniform(size / 2, W - size / 2)
            cy = rng.uniform(size / 2, H - size / 2)
            m = render_shape(SHAPES[k - 1], cx, cy, size, (H, W), aspect)
            if m.sum() == 0:
                continue
            b = mask_box(m)
            if min(b.w * W, b.h * H) < MIN_BOX_PX:
                continue
            # every earlier shape must keep >= 30% of its area visible under the shapes above it
            fine = True
            above = m.copy()
            for _, prev in reversed(placed):
                if (prev & above).sum() > MAX_OCCLUSION * prev.sum():
                    fine = False
                    break
                above |= prev
            if fine:
                placed.append((k, m))
                ok = True
                break
        if not ok:
            break  # fewer objects than planned; the first placement never fails

    bg = rng.uniform(0.25, 0.75)
    image = np.full((3, H, W), bg) + rng.normal(0.0, gen.noise, (3, H, W))
    class_mask = np.zeros((H, W), dtype=np.uint8)
    boxes = []
    for k, m in placed:
        col = _contrast_color(rng, bg)
        image[:, m] = col[:, None] + rng.normal(0.0, gen.noise / 2, (3, int(m.sum())))
        class_mask[m] = k
        boxes.append((mask_box(m), k))
    image = np.clip(image, 0.0, 1.0)
    return SceneSample(image, boxes, class_mask, sample_id or f"{rng_seed:010d}")


def generate_dataset(num: int, seed: int, gen: GenConfig) -> list:
    return [generate_scene(sample_seed(seed, i), gen, f"{i:06d}") for i in range(num)]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def save_dataset(samples: list, out_dir, class_names: list) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    if not samples:
        raise DatasetError("refusing to write an empty dataset")
    H, W = samples[0].class_mask.shape
    records = []
    for s in samples:
        if s.class_mask.shape != (H, W):
            raise DatasetError(f"sample {s.sample_id}: size {s.class_mask.shape} differs from {(H, W)}")
        img_rel, mask_rel = f"images/{s.sample_id}.ppm", f"masks/{s.sample_id}.pgm"
        Image.fromarray(quantize(s.image).transpose(1, 2, 0), mode="RGB").save(out / img_rel, format="PPM")
        Image.fromarray(s.class_mask.astype(np.uint8), mode="L").save(out / mask_rel, format="PPM")
        records.append({
            "id": s.sample_id,
            "image": img_rel,
            "mask": mask_rel,
            "boxes": [{"class": int(k), "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h} for b, k in s.boxes],
        })
    manifest = {
        "format": "triplenet-synth",
        "version": MANIFEST_VERSION,
        "image_size": [H, W],
        "class_names": list(class_names),
        "samples": records,
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp, out / "manifest.json")
    return out


def _read_netpbm(path: Path, mode: str, field_name: str, size: tuple) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"{field_name} file missing: {path}")
    try:
        with Image.open(path) as im:
            if im.format not in ("PPM", "PGM") or im.mode != mode:
                raise DatasetError(f"{field_name} file {path}: expected {mode} netpbm, got {im.format}/{im.mode}")
            arr = np.asarray(im)
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"{field_name} file {path} is corrupt: {exc}") from exc
    if arr.shape[:2] != tuple(size):
        raise DatasetError(f"{field_name} file {path}: size {arr.shape[:2]} differs from manifest {tuple(size)}")
    return arr


def read_manifest(data_dir) -> dict:
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"manifest missing: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest {mpath} is not valid JSON: {exc}") from exc
    for key in ("version", "image_size", "class_names", "samples"):
        if key not in manifest:
            raise DatasetError(f"manifest {mpath}: missing field {key!r}")
    if manifest["version"] != MANIFEST_VERSION:
        raise DatasetError(f"manifest {mpath}: unsupported version {manifest['version']}")
    return manifest


def load_dataset(data_dir) -> tuple:
    """Return ``(samples, class_names)``. Raises :class:`DatasetError` naming the bad file/field."""
    root = Path(data_dir)
    manifest = read_manifest(root)
    size = tuple(manifest["image_size"])
    names = manifest["class_names"]
    k = len(names)
    samples = []
    for i, rec in enumerate(manifest["samples"]):
        for key in ("id", "image", "mask", "boxes"):
            if key not in rec or rec[key] in (None, ""):
                raise DatasetError(f"manifest sample {i}: missing field {key!r}")
        img = _read_netpbm(root / rec["image"], "RGB", "image", size)
        mask = _read_netpbm(root / rec["mask"], "L", "mask", size)
        labels = mask[mask != IGNORE]
        if labels.size and labels.max() > k:
            raise DatasetError(f"mask file {root / rec['mask']}: label {int(labels.max())} exceeds class count {k}")
        boxes = []
        for j, b in enumerate(rec["boxes"]):
            try:
                cls = int(b["class"])
                box = Box(float(b["cx"]), float(b["cy"]), float(b["w"]), float(b["h"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"manifest sample {rec['id']}: box {j} invalid ({exc})") from exc
            if not 1 <= cls <= k:
                raise DatasetError(f"manifest sample {rec['id']}: box {j} class {cls} outside 1..{k}")
            boxes.append((box, cls))
        samples.append(SceneSample(img.transpose(2, 0, 1).astype(np.float64) / 255.0, boxes,
                                   mask.astype(np.uint8), rec["id"]))
    return samples, names
