"""Desk-scale datasets.

The synthetic set draws the same textured disc for every class; what changes
per class is the stripe orientation inside the disc (fine local detail) and a
small shift of the disc's anchor position (weak global layout cue).  The
background is a random colour gradient plus noise, and the disc mask is kept
as ground truth for localization checks.

Images live in memory as float32 arrays [3, H, W] in [0, 1], quantized to
multiples of 1/255 so that the PPM round trip is lossless.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from dcnn.autograd import Tensor
from dcnn.autograd.functional import bilinear_matrix
from dcnn.errors import ConfigError, DataError, DatasetError

NATIVE_SUFFIXES = (".ppm", ".pgm", ".pnm")
PILLOW_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp")

OBJECT_RADIUS = 0.3  # fraction of image side
ANCHOR_RADIUS = 0.12
JITTER = 0.15
STRIPE_PERIOD = 4.0  # pixels at 32x32, scaled with image size
NOISE_STD = 0.03


@dataclass
class Sample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    label: int
    mask: Optional[np.ndarray] = None  # bool [H, W]
    path: str = ""


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    num_classes: int = 4
    samples_per_class: int = 16
    image_size: int = 32
    seed: int = 31
    root_path: Optional[str] = None

    def validate(self) -> "DatasetSpec":
        if self.kind not in ("synthetic", "image_folder"):
            raise ConfigError(f"data.kind={self.kind!r} not in ('synthetic', 'image_folder')")
        if self.image_size < 1:
            raise ConfigError("data.image_size must be positive")
        if self.kind == "synthetic":
            if self.image_size < 16:
                raise ConfigError(f"synthetic images need image_size >= 16, got {self.image_size}")
            if self.num_classes < 1 or self.samples_per_class < 1:
                raise ConfigError("data.num_classes and data.samples_per_class must be positive")
        elif not self.root_path:
            raise ConfigError("data.root_path is required for kind=image_folder")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown data config key(s): {', '.join(sorted(unknown))}")
        return cls(**d).validate()


def _quantize(x: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _render(rng: np.random.Generator, label: int, num_classes: int, s: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5

    # background: random two-colour linear gradient plus noise
    c0, c1 = rng.uniform(0.0, 1.0, 3), rng.uniform(0.0, 1.0, 3)
    ang = rng.uniform(0, 2 * math.pi)
    ramp = ((xx * math.cos(ang) + yy * math.sin(ang)) / s + 1.0) / 2.0
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    # object: disc anchored per class, jittered per sample
    phi = 2 * math.pi * label / num_classes
    cx = s / 2 + ANCHOR_RADIUS * s * math.cos(phi) + rng.uniform(-JITTER, JITTER) * s
    cy = s / 2 + ANCHOR_RADIUS * s * math.sin(phi) + rng.uniform(-JITTER, JITTER) * s
    r = OBJECT_RADIUS * s
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r

    # class-specific stripe orientation, random phase
    theta = math.pi * label / num_classes
    period = STRIPE_PERIOD * s / 32.0
    wave = np.sin(2 * math.pi * ((xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)) / period + rng.uniform(0, 2 * math.pi))
    base = rng.uniform(0.35, 0.65)
    tex = base + 0.35 * wave
    tint = rng.uniform(0.85, 1.0, 3)
    for ch in range(3):
        img[ch][mask] = (tex * tint[ch])[mask]

    img = img + rng.normal(0.0, NOISE_STD, img.shape)
    return _quantize(img), mask


def generate_synthetic(spec: DatasetSpec) -> list[Sample]:
    """Deterministic in ``spec``; samples ordered class by class."""
    spec.validate()
    if spec.kind != "synthetic":
        raise ConfigError("generate_synthetic needs kind='synthetic'")
    out = []
    for k in range(spec.num_classes):
        for i in range(spec.samples_per_class):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, k, i])))
            img, mask = _render(rng, k, spec.num_classes, spec.image_size)
            out.append(Sample(img, k, mask, f"class_{k}/img_{i}.ppm"))
    return out


# -- portable any-map I/O ------------------------------------------------------


def _to_uint8_hwc(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[-1] not in (1, 3):
        arr = arr.transpose(1, 2, 0)
    return np.ascontiguousarray(arr)


def write_ppm(path, image: np.ndarray) -> None:
    """P6 for 3-channel images ([3,H,W] floats or [H,W,3] uint8), P5 for 2-D."""
    arr = _to_uint8_hwc(image)
    path = Path(path)
    if arr.ndim == 2:
        header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n"
    else:
        raise DataError(f"cannot write image of shape {arr.shape} as PNM")
    path.write_bytes(header.encode("ascii") + arr.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read binary P5/P6 into float32 [C,H,W] in [0,1]."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PNM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported PNM magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PNM header") from None
    if not 0 < maxval < 65536:
        raise DataError(f"{path}: bad maxval {maxval}")
    ch = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * ch * dtype.itemsize
    body = raw[pos : pos + need]
    if len(body) != need:
        raise DataError(f"{path}: expected {need} bytes of pixel data, got {len(body)}")
    arr = np.frombuffer(body, dtype=dtype).reshape(h, w, ch).astype(np.float32) / maxval
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_image(path) -> np.ndarray:
    """Decode to float32 [3,H,W]; PNM natively, other formats through Pillow."""
    path = Path(path)
    if path.suffix.lower() in NATIVE_SUFFIXES:
        arr = read_pnm(path)
    else:
        try:
            from PIL import Image
        except ImportError:
            raise DataError(f"{path}: reading {path.suffix} files requires Pillow") from None
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
        except OSError as exc:
            raise DataError(f"{path}: {exc}") from None
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    return np.ascontiguousarray(arr, dtype=np.float32)


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of [C,H,W] to [C,size,size]."""
    c, h, w = image.shape
    if (h, w) == (size, size):
        return image.astype(np.float32)
    rh, rw = bilinear_matrix(h, size), bilinear_matrix(w, size)
    out = np.einsum("ih,chw,jw->cij", rh, image.astype(np.float64), rw)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# -- on-disk datasets ---------------------------------------------------------


def write_synthetic(samples: Sequence[Sample], root) -> None:
    """Layout: class_<k>/img_<i>.ppm, masks/class_<k>/img_<i>.pgm, labels.csv (path,label)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for n, s in enumerate(samples):
        rel = s.path or f"class_{s.label}/img_{n}.ppm"
        dst = root / rel
        dst.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(dst, s.image)
        if s.mask is not None:
            mdst = (root / "masks" / rel).with_suffix(".pgm")
            mdst.parent.mkdir(parents=True, exist_ok=True)
            write_ppm(mdst, s.mask.astype(np.uint8) * 255)
        rows.append((rel, s.label))
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        w.writerows(rows)


def read_synthetic(root) -> list[Sample]:
    root = Path(root)
    manifest = root / "labels.csv"
    if not manifest.is_file():
        raise DatasetError(f"{root}: no labels.csv manifest")
    out = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            rel = row["path"]
            img = read_pnm(root / rel)
            mpath = (root / "masks" / rel).with_suffix(".pgm")
            mask = read_pnm(mpath)[0] > 0.5 if mpath.is_file() else None
            out.append(Sample(img, int(row["label"]), mask, rel))
    if not out:
        raise DatasetError(f"{root}: labels.csv lists no samples")
    return out


def load_image_folder(spec: DatasetSpec) -> list[Sample]:
    """One sub-directory per class; labels follow sorted directory names."""
    spec.validate()
    root = Path(spec.root_path)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root}: no class sub-directories")
    suffixes = NATIVE_SUFFIXES + PILLOW_SUFFIXES
    out = []
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in suffixes)
        if not files:
            raise DatasetError(f"{d}: class directory has no supported images")
        for f in files:
            try:
                img = read_image(f)
            except DataError as exc:
                warnings.warn(f"skipping unreadable image: {exc}", stacklevel=2)
                continue
            out.append(Sample(resize_bilinear(img, spec.image_size), label, None, str(f.relative_to(root))))
    if not out:
        raise DatasetError(f"{root}: no readable images")
    return out


def load_dataset(spec: DatasetSpec) -> list[Sample]:
    """Synthetic specs with a root_path holding labels.csv are read from disk."""
    spec.validate()
    if spec.kind == "image_folder":
        return load_image_folder(spec)
    if spec.root_path and (Path(spec.root_path) / "labels.csv").is_file():
        return read_synthetic(spec.root_path)
    return generate_synthetic(spec)


# -- batching -----------------------------------------------------------------


def permutation(n: int, seed: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed))).permutation(n)


def batches(
    data: Sequence[Sample], batch_size: int, seed: int = 0, shuffle: bool = True
) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield (images [N,3,H,W], labels int64[N]); the last partial batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = permutation(len(data), seed) if shuffle else np.arange(len(data))
    for start in range(0, len(data), batch_size):
        idx = order[start : start + batch_size]
        images = np.stack([data[i].image for i in idx]).astype(np.float32)
        labels = np.array([data[i].label for i in idx], dtype=np.int64)
        yield Tensor(images), labels
