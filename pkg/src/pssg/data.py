"""Synthetic paired photo/sketch generation, directory loading, and preprocessing.

Photos are procedurally rendered face-like compositions (head ellipse, hair
blob, eyes, nose, mouth over a gradient background) drawn at 2x resolution
and box-downsampled. Sketches are derived from the photo per style:
thresholded edge maps, difference-of-Gaussians lines with shading, or edges
with hatched fill. Everything is deterministic per seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from io import BytesIO
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DataError

log = logging.getLogger(__name__)

STYLE_IDS = (0, 1, 2)
META_NAME = "meta.json"
META_VERSION = 1


@dataclass(frozen=True)
class PairedSample:
    photo: torch.Tensor
    sketch: torch.Tensor
    style_id: int
    sample_id: str


@dataclass
class PairedDataset:
    photos: torch.Tensor  # (N, 3, R, R) in [-1, 1]
    sketches: torch.Tensor
    style_ids: torch.Tensor  # (N,) int64
    sample_ids: list[str]

    def __len__(self) -> int:
        return self.photos.shape[0]

    def __getitem__(self, i: int) -> PairedSample:
        return PairedSample(
            self.photos[i], self.sketches[i], int(self.style_ids[i]), self.sample_ids[i]
        )

    @property
    def resolution(self) -> int:
        return int(self.photos.shape[-1])


def _ellipse_mask(yy, xx, cx, cy, rx, ry, angle=0.0):
    dx = xx - cx
    dy = yy - cy
    ct, st = np.cos(angle), np.sin(angle)
    u = (dx * ct + dy * st) / rx
    v = (-dx * st + dy * ct) / ry
    return u * u + v * v <= 1.0


def _paint(canvas, mask, color):
    canvas[mask] = color


def _render_photo(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """One face-like composition, (H, W, 3) float in [0, 1]."""
    s = resolution * 2
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    canvas = np.zeros((s, s, 3))

    top = rng.uniform(0.55, 0.95, size=3)
    bottom = rng.uniform(0.35, 0.8, size=3)
    canvas[:] = top[None, None, :] * (1 - yy[..., None]) + bottom[None, None, :] * yy[..., None]

    cx = 0.5 + rng.uniform(-0.04, 0.04)
    cy = 0.54 + rng.uniform(-0.03, 0.03)
    rx = rng.uniform(0.22, 0.3)
    ry = rng.uniform(0.3, 0.38)
    tilt = rng.uniform(-0.08, 0.08)
    skin = np.array(
        [rng.uniform(0.72, 0.95), rng.uniform(0.55, 0.75), rng.uniform(0.42, 0.62)]
    )
    hair = rng.uniform(0.05, 0.38, size=3)

    _paint(canvas, _ellipse_mask(yy, xx, cx, cy - 0.55 * ry, rx * 1.3, ry * 0.85, tilt), hair)
    _paint(canvas, _ellipse_mask(yy, xx, cx, cy, rx, ry, tilt), skin)
    fringe = rng.uniform(0.25, 0.5)
    _paint(
        canvas,
        _ellipse_mask(yy, xx, cx, cy - ry * (1 - fringe * 0.4), rx * 1.05, ry * fringe, tilt),
        hair,
    )

    eye_dx = rx * rng.uniform(0.38, 0.5)
    eye_y = cy - 0.12 * ry + rng.uniform(-0.01, 0.01)
    iris = rng.uniform(0.05, 0.45, size=3)
    for side in (-1, 1):
        ex = cx + side * eye_dx
        _paint(canvas, _ellipse_mask(yy, xx, ex, eye_y, rx * 0.18, ry * 0.07), np.array([0.95, 0.95, 0.95]))
        _paint(canvas, _ellipse_mask(yy, xx, ex, eye_y, rx * 0.08, ry * 0.05), iris)
        _paint(
            canvas,
            _ellipse_mask(yy, xx, ex, eye_y - 0.09 * ry, rx * 0.2, ry * 0.02, tilt * 2), hair * 0.7,
        )

    _paint(
        canvas,
        _ellipse_mask(yy, xx, cx, cy + 0.12 * ry, rx * 0.09, ry * 0.1),
        skin * rng.uniform(0.8, 0.92),
    )
    mouth = np.array([rng.uniform(0.55, 0.8), rng.uniform(0.2, 0.35), rng.uniform(0.25, 0.4)])
    _paint(
        canvas,
        _ellipse_mask(yy, xx, cx, cy + 0.45 * ry, rx * rng.uniform(0.2, 0.32), ry * 0.06),
        mouth,
    )

    down = canvas.reshape(resolution, 2, resolution, 2, 3).mean(axis=(1, 3))
    return np.clip(down, 0.0, 1.0)


def _to_gray(photo: np.ndarray) -> np.ndarray:
    return 0.299 * photo[..., 0] + 0.587 * photo[..., 1] + 0.114 * photo[..., 2]


def _edge_map(gray: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def _render_sketch(photo: np.ndarray, style_id: int) -> np.ndarray:
    """Grayscale sketch (H, W) in [0, 1] for one of the three styles."""
    gray = _to_gray(photo)
    edges = _edge_map(gray)
    if style_id == 0:
        lines = edges > 0.55
        sketch = np.where(lines, 0.08, 1.0)
    elif style_id == 1:
        dog = ndimage.gaussian_filter(gray, 0.8) - ndimage.gaussian_filter(gray, 2.2)
        lines = dog < -0.015
        shade = 0.72 + 0.28 * np.round(gray * 2) / 2
        sketch = np.where(lines, 0.15, shade)
    elif style_id == 2:
        lines = edges > 0.55
        h, w = gray.shape
        yy, xx = np.mgrid[0:h, 0:w]
        hatch = ((yy + xx) % 6 < 2) & (gray < 0.45)
        sketch = np.where(lines, 0.08, np.where(hatch, 0.35, 1.0))
    else:
        raise ValueError(f"style_id must be one of {STYLE_IDS}, got {style_id}")
    return np.clip(sketch, 0.0, 1.0)


def generate_synthetic_pairs(
    n: int, resolution: int, style_id: int, seed: int
) -> PairedDataset:
    """Render n photo/sketch pairs for one style, deterministic per seed."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if style_id not in STYLE_IDS:
        raise ValueError(f"style_id must be one of {STYLE_IDS}, got {style_id}")
    if resolution < 16 or resolution & (resolution - 1):
        raise ValueError(f"resolution must be a power of two >= 16, got {resolution}")
    photos = np.empty((n, resolution, resolution, 3), dtype=np.float32)
    sketches = np.empty((n, resolution, resolution), dtype=np.float32)
    for i in range(n):
        rng = np.random.default_rng([seed, style_id, i])
        photo = _render_photo(rng, resolution)
        photos[i] = photo
        sketches[i] = _render_sketch(photo, style_id)
    photos_t = torch.from_numpy(photos).permute(0, 3, 1, 2) * 2 - 1
    sketch_gray = torch.from_numpy(sketches)[:, None] * 2 - 1
    sketches_t = sketch_gray.expand(-1, 3, -1, -1).contiguous()
    ids = [f"s{style_id}_{i:04d}" for i in range(n)]
    return PairedDataset(photos_t, sketches_t, torch.full((n,), style_id, dtype=torch.int64), ids)


def edge_pixel_fraction(sketch: torch.Tensor) -> float:
    """Fraction of dark (line) pixels in a [-1, 1] sketch."""
    return float((sketch < 0).float().mean())


def tensor_to_image(t: torch.Tensor) -> Image.Image:
    arr = ((t.detach().clamp(-1, 1) + 1) * 127.5).round().byte().permute(1, 2, 0).cpu().numpy()
    return Image.fromarray(arr, mode="RGB")


def save_image(t: torch.Tensor, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensor_to_image(t).save(path, format="PNG")
    return path


def save_dataset(dataset: PairedDataset, root) -> Path:
    """Write the canonical directory layout: photos/, sketches/, meta.json."""
    root = Path(root)
    for i in range(len(dataset)):
        name = f"{dataset.sample_ids[i]}.png"
        save_image(dataset.photos[i], root / "photos" / name)
        save_image(dataset.sketches[i], root / "sketches" / name)
    meta = {
        "version": META_VERSION,
        "style_ids": {sid: int(dataset.style_ids[i]) for i, sid in enumerate(dataset.sample_ids)},
    }
    (root / META_NAME).write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    return root


def preprocess(img_bytes: bytes, resolution: int) -> torch.Tensor:
    """Decode, center-crop square, bilinear-resize, scale to [-1, 1] RGB."""
    try:
        with Image.open(BytesIO(img_bytes)) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DataError(f"undecodable image: {exc}") from exc
    h, w = arr.shape[:2]
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    arr = arr[top : top + side, left : left + side]
    t = torch.from_numpy(arr).permute(2, 0, 1)[None]
    if side != resolution:
        t = F.interpolate(t, size=(resolution, resolution), mode="bilinear", align_corners=False)
    return t[0] * 2 - 1


def load_paired_dataset(photo_dir, sketch_dir, resolution: int | None = None) -> PairedDataset:
    """Pair photos and sketches by basename, in sorted order.

    Unmatched files are reported as warnings; zero matches is an error.
    """
    photo_dir, sketch_dir = Path(photo_dir), Path(sketch_dir)
    photo_files = {p.stem: p for p in sorted(photo_dir.glob("*.png"))}
    sketch_files = {p.stem: p for p in sorted(sketch_dir.glob("*.png"))}
    common = sorted(photo_files.keys() & sketch_files.keys())
    if not common:
        raise DataError(
            "no photo/sketch basename matches; "
            f"photos: {sorted(photo_files)[:10]}, sketches: {sorted(sketch_files)[:10]}"
        )
    for stem in sorted(photo_files.keys() ^ sketch_files.keys()):
        side = "photo" if stem in photo_files else "sketch"
        log.warning("unmatched %s file: %s", side, stem)

    style_map = {}
    meta_path = photo_dir.parent / META_NAME
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        style_map = {k: int(v) for k, v in meta.get("style_ids", {}).items()}

    photos, sketches = [], []
    first_res = resolution
    for stem in common:
        for container, path in ((photos, photo_files[stem]), (sketches, sketch_files[stem])):
            raw = path.read_bytes()
            if first_res is None:
                with Image.open(BytesIO(raw)) as im:
                    first_res = min(im.size)
            container.append(preprocess(raw, first_res))
    style_ids = torch.tensor([style_map.get(stem, 0) for stem in common], dtype=torch.int64)
    return PairedDataset(torch.stack(photos), torch.stack(sketches), style_ids, common)
