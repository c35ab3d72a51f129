"""Image IO, bicubic rescaling, luma conversion, patches, dataset prep.

Images travel through the pipeline as float arrays shaped [3, H, W] with
values in [0, 1]. Files are 8-bit PNG; quantization on save rounds half
away from zero, and metrics are computed on arrays that went through the
same quantization, so file-based and in-memory evaluation agree exactly.

The bicubic resampler matches the widely used convention for producing
benchmark low-resolution inputs: Catmull-Rom kernel (a = -0.5), centers
aligned via u = (i + 0.5) * (n_in / n_out) - 0.5, kernel stretched by the
scale factor when downscaling (antialiasing), edges replicated, weights
renormalized per output pixel, all accumulation in float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "DataError",
    "load_image",
    "save_image",
    "quantize",
    "bicubic_resize",
    "degrade",
    "upscale_bicubic",
    "rgb_to_y",
    "PatchMeta",
    "PatchPair",
    "extract_patch_pair",
    "augment_pair",
    "random_augment",
    "AUGMENT_OPS",
    "DatasetIndex",
    "prepare_degraded_set",
    "load_pairs",
]

log = logging.getLogger("aldsr.data")


class DataError(ValueError):
    """Unusable input data: wrong format, bad geometry, unreadable file."""


# ---------------------------------------------------------------------------
# PNG IO


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG into a [3,H,W] float32 array scaled to [0,1]."""
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise DataError(f"{path}: only PNG files are supported")
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise DataError(f"{path}: cannot read image ({e})") from e
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] and snap to the 8-bit grid (round half away from zero).

    Returns float of the same rank; this is exactly the value a PNG save
    and reload would produce.
    """
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5)
    return (q / 255.0).astype(img.dtype if img.dtype == np.float64 else np.float32)


def save_image(path, img: np.ndarray):
    """Write a [3,H,W] float array in [0,1] as an 8-bit PNG."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"expected [3,H,W] image, got {img.shape}")
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# bicubic resampling


def _cubic(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom cubic kernel (a = -0.5), support |t| < 2."""
    at = np.abs(t)
    at2 = at * at
    at3 = at2 * at
    near = 1.5 * at3 - 2.5 * at2 + 1.0
    far = -0.5 * at3 + 2.5 * at2 - 4.0 * at + 2.0
    return np.where(at <= 1.0, near, np.where(at < 2.0, far, 0.0))


def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense [n_out, n_in] resampling matrix for one axis."""
    scale = n_in / n_out
    f = max(scale, 1.0)  # kernel stretch: antialias on downscale only
    u = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    width = int(np.ceil(4.0 * f)) + 2
    left = np.floor(u - 2.0 * f).astype(np.int64)
    js = left[:, None] + np.arange(width, dtype=np.int64)[None, :]
    w = _cubic((js - u[:, None]) / f)
    w /= w.sum(axis=1, keepdims=True)
    # edge replication: clamp sample positions, duplicates accumulate
    jc = np.clip(js, 0, n_in - 1)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.repeat(np.arange(n_out), width)
    np.add.at(mat, (rows, jc.ravel()), w.ravel())
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resize of [C,H,W] or [H,W] to (out_h, out_w).

    Accumulates in float64 and returns float64, unclamped (cubic ringing
    may leave [0,1]; quantize() or save_image() clamps).
    """
    if out_h < 1 or out_w < 1:
        raise DataError(f"output size must be positive, got {out_h}x{out_w}")
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    if img.ndim != 3:
        raise DataError(f"expected [C,H,W] or [H,W], got shape {img.shape}")
    c, h, w = img.shape
    mv = _axis_weights(h, out_h)
    mh = _axis_weights(w, out_w)
    t = np.matmul(mv, img.astype(np.float64))  # [C, out_h, W]
    out = np.matmul(t, mh.T)  # [C, out_h, out_w]
    return out[0] if squeeze else out


def degrade(img: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic-downscale by an integer factor; dims must divide evenly."""
    c, h, w = img.shape
    if h % scale or w % scale:
        raise DataError(f"image {h}x{w} not divisible by scale {scale}")
    return bicubic_resize(img, h // scale, w // scale)


def upscale_bicubic(img: np.ndarray, scale: int) -> np.ndarray:
    c, h, w = img.shape
    return bicubic_resize(img, h * scale, w * scale)


# ---------------------------------------------------------------------------
# luma


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Studio-swing luma of a [3,H,W] array in [0,1], returned in [0,1].

    Y = (16 + 65.481 R + 128.553 G + 24.966 B) / 255, so pure white maps
    to 235/255 and black to 16/255.
    """
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"expected [3,H,W] image, got {img.shape}")
    r, g, b = img[0], img[1], img[2]
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0


# ---------------------------------------------------------------------------
# patches and augmentation

AUGMENT_OPS = ("hflip", "vflip", "rot90")


@dataclass
class PatchMeta:
    image_id: str
    x0: int  # LR column of the patch origin
    y0: int  # LR row
    aug: tuple = ()


@dataclass
class PatchPair:
    lr: np.ndarray  # [3, p, p]
    hr: np.ndarray  # [3, s*p, s*p]
    meta: PatchMeta


def extract_patch_pair(hr, lr, patch: int, scale: int, rng, image_id="") -> PatchPair:
    """Crop an aligned (LR, HR) patch pair at a uniformly random origin.

    The HR crop covers exactly the scale-times-larger footprint of the LR
    crop, so pair alignment survives: hr_patch = hr[:, s*y0:s*(y0+p), ...].
    """
    if hr.shape[1] != lr.shape[1] * scale or hr.shape[2] != lr.shape[2] * scale:
        raise DataError(
            f"HR {hr.shape} is not {scale}x the LR {lr.shape}"
        )
    if patch > lr.shape[1] or patch > lr.shape[2]:
        raise DataError(f"patch {patch} exceeds LR size {lr.shape[1]}x{lr.shape[2]}")
    y0 = int(rng.integers(0, lr.shape[1] - patch + 1))
    x0 = int(rng.integers(0, lr.shape[2] - patch + 1))
    lrp = np.ascontiguousarray(lr[:, y0 : y0 + patch, x0 : x0 + patch])
    s = scale
    hrp = np.ascontiguousarray(
        hr[:, s * y0 : s * (y0 + patch), s * x0 : s * (x0 + patch)]
    )
    return PatchPair(lrp, hrp, PatchMeta(image_id, x0, y0))


def _apply_ops(arr: np.ndarray, ops) -> np.ndarray:
    for op in ops:
        if op == "hflip":
            arr = arr[:, :, ::-1]
        elif op == "vflip":
            arr = arr[:, ::-1, :]
        elif op == "rot90":
            arr = np.rot90(arr, k=1, axes=(1, 2))
        else:
            raise ValueError(f"unknown augmentation {op!r}, options: {AUGMENT_OPS}")
    return np.ascontiguousarray(arr)


def augment_pair(pair: PatchPair, ops) -> PatchPair:
    """Apply the same geometric ops to both halves of the pair."""
    ops = tuple(ops)
    return PatchPair(
        _apply_ops(pair.lr, ops),
        _apply_ops(pair.hr, ops),
        PatchMeta(pair.meta.image_id, pair.meta.x0, pair.meta.y0, pair.meta.aug + ops),
    )


def random_augment(pair: PatchPair, rng) -> PatchPair:
    """Each of hflip/vflip/rot90 independently with probability 1/2."""
    ops = tuple(op for op in AUGMENT_OPS if rng.random() < 0.5)
    return augment_pair(pair, ops) if ops else pair


# ---------------------------------------------------------------------------
# dataset preparation


@dataclass
class DatasetIndex:
    """Pairs of (hr, lr) paths; serialized as tab-separated lines."""

    entries: list = field(default_factory=list)  # [(hr_path, lr_path)]

    def write(self, path):
        path = Path(path)
        base = path.parent
        lines = []
        for hr, lr in self.entries:
            lines.append(f"{_relativize(hr, base)}\t{_relativize(lr, base)}")
        path.write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def read(cls, path) -> "DatasetIndex":
        path = Path(path)
        if not path.exists():
            raise DataError(f"index file not found: {path}")
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected '<hr>\\t<lr>', got {line!r}")
            entries.append((str(path.parent / parts[0]), str(path.parent / parts[1])))
        return cls(entries)


def _relativize(p, base: Path) -> str:
    p = Path(p)
    try:
        return str(p.relative_to(base))
    except ValueError:
        return str(p)


def prepare_degraded_set(hr_dir, out_dir, scale: int) -> DatasetIndex:
    """Materialize a degraded dataset from a directory of HR PNGs.

    Each image is edge-cropped to dimensions divisible by scale, saved to
    out_dir/HR, bicubic-downscaled, quantized to 8 bits, and saved to
    out_dir/LR_x{scale}. Unreadable files are logged and skipped. Returns
    (and writes, as index_x{scale}.txt) the pairing index.
    """
    hr_dir, out_dir = Path(hr_dir), Path(out_dir)
    if scale < 1:
        raise DataError(f"scale must be >= 1, got {scale}")
    files = sorted(hr_dir.glob("*.png")) + sorted(hr_dir.glob("*.PNG"))
    if not files:
        raise DataError(f"no PNG files in {hr_dir}")
    hr_out = out_dir / "HR"
    lr_out = out_dir / f"LR_x{scale}"
    hr_out.mkdir(parents=True, exist_ok=True)
    lr_out.mkdir(parents=True, exist_ok=True)
    index = DatasetIndex()
    for f in files:
        try:
            img = load_image(f)
        except DataError as e:
            log.warning("skipping %s: %s", f.name, e)
            continue
        h, w = img.shape[1], img.shape[2]
        hc, wc = (h // scale) * scale, (w // scale) * scale
        if hc < scale or wc < scale:
            log.warning("skipping %s: %dx%d too small for scale %d", f.name, h, w, scale)
            continue
        img = img[:, :hc, :wc]
        lr = quantize(degrade(img, scale))
        hr_path = hr_out / f.name
        lr_path = lr_out / f.name
        save_image(hr_path, img)
        save_image(lr_path, lr)
        index.entries.append((str(hr_path), str(lr_path)))
    index.write(out_dir / f"index_x{scale}.txt")
    return index


def load_pairs(index: DatasetIndex) -> list:
    """Load every (hr, lr) pair of an index into memory as float32 arrays."""
    return [(load_image(hr), load_image(lr)) for hr, lr in index.entries]
