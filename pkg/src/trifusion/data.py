"""Dataset ingestion, minimal image IO, and the synthetic desk-scale set.

Directory layout: ``<root>/{train,val,test}/<CLASS_NAME>/*.{ppm,pgm,rawt}``.
Class names sort lexicographically and define the label order. Binary
netpbm (P5/P6) files and the raw tensor container are decoded natively;
anything else should be converted externally, e.g.::

    mogrify -format ppm path/to/images/*.jpeg

The ``.rawt`` container is: magic "RAWT", u8 rank, rank little-endian u32
dims, then float32 little-endian row-major data.

The synthetic set has two linearly separable classes: a bright centered
disk on dark noise (class 0, "disk") and a dark image with a bright
horizontal band (class 1, "stripe").
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestError

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".ppm", ".pgm", ".rawt")


# ---------------------------------------------------------------------------
# Decoders
# ---------------------------------------------------------------------------

def _pnm_header(data: bytes) -> tuple[list[int], int]:
    """Parse w/h/maxval after the magic, honoring '#' comments."""
    fields: list[int] = []
    i = 2
    while len(fields) < 3:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(data) and data[i:i + 1].isdigit():
            i += 1
        if i == start:
            raise IngestError("malformed netpbm header")
        fields.append(int(data[start:i]))
    if i >= len(data) or not data[i:i + 1].isspace():
        raise IngestError("malformed netpbm header")
    return fields, i + 1


def read_pnm(data: bytes) -> np.ndarray:
    """Decode binary P5 (gray) or P6 (rgb) bytes to [c,h,w] in [0,1]."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise IngestError(f"unsupported netpbm magic {magic!r}")
    (w, h, maxval), offset = _pnm_header(data)
    if maxval <= 0 or maxval > 65535:
        raise IngestError(f"bad netpbm maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    count = w * h * channels
    itemsize = 1 if maxval < 256 else 2
    if len(data) - offset < count * itemsize:
        raise IngestError("truncated netpbm payload")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    img = raw.astype(np.float64) / maxval
    if channels == 3:
        return img.reshape(h, w, 3).transpose(2, 0, 1)
    return img.reshape(1, h, w)


def read_rawt(data: bytes) -> np.ndarray:
    """Decode the raw tensor container to a float64 array."""
    if data[:4] != b"RAWT":
        raise IngestError("bad rawt magic")
    if len(data) < 5:
        raise IngestError("truncated rawt header")
    rank = data[4]
    need = 5 + 4 * rank
    if len(data) < need:
        raise IngestError("truncated rawt dims")
    dims = struct.unpack_from(f"<{rank}I", data, 5)
    count = int(np.prod(dims)) if rank else 1
    if len(data) - need < 4 * count:
        raise IngestError("truncated rawt payload")
    payload = np.frombuffer(data, dtype="<f4", count=count, offset=need)
    return payload.astype(np.float64).reshape(dims)


def write_ppm(path: Path, image: np.ndarray) -> None:
    """Write [3,h,w] floats in [0,1] as binary P6, maxval 255."""
    c, h, w = image.shape
    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(quantized.transpose(1, 2, 0).tobytes())


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Write [h,w] floats in [0,1] as binary P5, maxval 255."""
    h, w = image.shape
    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(quantized.tobytes())


def write_rawt(path: Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    with open(path, "wb") as f:
        f.write(b"RAWT")
        f.write(struct.pack("B", array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(array.astype("<f4").tobytes())


def decode_image_file(path: Path) -> np.ndarray:
    """Read any supported file to [3,h,w] float64, gray replicated to rgb."""
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".rawt":
        arr = read_rawt(data)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise IngestError(f"rawt image must be [h,w] or [c,h,w] with "
                              f"1 or 3 channels, got {arr.shape}")
    elif path.suffix in (".ppm", ".pgm"):
        arr = read_pnm(data)
    else:
        raise IngestError(f"unsupported image format {path.suffix!r}")
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    return arr


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize [c,h,w] with bilinear interpolation (half-pixel centers)."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bottom = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bottom * wy


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    """Decoded images with integer labels; label i <-> class_names[i]."""

    samples: list[tuple[np.ndarray, int]]
    class_names: list[str]
    split_name: str

    def __len__(self) -> int:
        return len(self.samples)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        images = np.stack([s[0] for s in self.samples])
        labels = np.array([s[1] for s in self.samples], dtype=np.int64)
        return images, labels

    def class_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in self.class_names}
        for _, label in self.samples:
            counts[self.class_names[label]] += 1
        return counts


@dataclass
class IngestResult:
    splits: dict[str, LabeledDataset]
    class_names: list[str]
    counts: dict[str, dict[str, int]]
    skipped: list[str] = field(default_factory=list)


def ingest_directory(root, image_size: int) -> IngestResult:
    """Load the train/val/test tree, resizing everything to ``image_size``.

    Undecodable files are skipped with a warning entry; missing split
    directories are an error; empty class directories only warn.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"dataset root not found: {root}")
    for split in SPLITS:
        if not (root / split).is_dir():
            raise IngestError(f"missing split directory: {root / split}")
    names = sorted({p.name for split in SPLITS
                    for p in (root / split).iterdir() if p.is_dir()})
    if not names:
        raise IngestError(f"no class directories under {root}")
    label_of = {name: i for i, name in enumerate(names)}

    splits: dict[str, LabeledDataset] = {}
    counts: dict[str, dict[str, int]] = {}
    skipped: list[str] = []
    for split in SPLITS:
        samples: list[tuple[np.ndarray, int]] = []
        split_counts = {name: 0 for name in names}
        for name in names:
            class_dir = root / split / name
            if not class_dir.is_dir():
                skipped.append(f"{split}/{name}: class directory missing")
                continue
            files = sorted(p for p in class_dir.iterdir()
                           if p.suffix in IMAGE_SUFFIXES)
            if not files:
                skipped.append(f"{split}/{name}: empty class directory")
            for f in files:
                try:
                    img = decode_image_file(f)
                except IngestError as exc:
                    skipped.append(f"{split}/{name}/{f.name}: {exc}")
                    continue
                img = bilinear_resize(img, image_size, image_size)
                samples.append((img, label_of[name]))
                split_counts[name] += 1
        splits[split] = LabeledDataset(samples, names, split)
        counts[split] = split_counts
    return IngestResult(splits, names, counts, skipped)


SYNTH_CLASS_NAMES = ["disk", "stripe"]


def synth_dataset(n_per_class: int, size: int, seed: int,
                  split_name: str = "synth") -> LabeledDataset:
    """Two-class separable synthetic images, reproducible from the seed.

    Class 0 ("disk"): bright centered disk on dark noise. Class 1
    ("stripe"): dark image with a bright horizontal band. The per-image
    pixel means of the two classes are far apart, so even a threshold on
    the mean classifies them almost perfectly.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    samples: list[tuple[np.ndarray, int]] = []
    for _ in range(n_per_class):
        img = rng.uniform(0.0, 0.2, size=(size, size))
        cy = size / 2 + rng.uniform(-size * 0.05, size * 0.05)
        cx = size / 2 + rng.uniform(-size * 0.05, size * 0.05)
        r = size * rng.uniform(0.24, 0.3)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[mask] = rng.uniform(0.8, 0.95)
        samples.append((np.repeat(img[None], 3, axis=0), 0))
    for _ in range(n_per_class):
        img = rng.uniform(0.0, 0.15, size=(size, size))
        band = max(1, size // 8)
        top = rng.integers(0, size - band + 1)
        img[top:top + band, :] = rng.uniform(0.85, 0.95)
        samples.append((np.repeat(img[None], 3, axis=0), 1))
    return LabeledDataset(samples, list(SYNTH_CLASS_NAMES), split_name)


def synth_to_directory(root, n_train: int, n_val: int, n_test: int,
                       size: int, seed: int) -> None:
    """Write a synthetic train/val/test tree of P6 files under ``root``."""
    root = Path(root)
    seeds = np.random.SeedSequence(seed).spawn(3)
    for split, n, ss in zip(SPLITS, (n_train, n_val, n_test), seeds):
        ds = synth_dataset(n, size, int(ss.generate_state(1)[0]), split)
        for name in ds.class_names:
            (root / split / name).mkdir(parents=True, exist_ok=True)
        index = {name: 0 for name in ds.class_names}
        for img, label in ds.samples:
            name = ds.class_names[label]
            write_ppm(root / split / name / f"{name}_{index[name]:05d}.ppm",
                      img)
            index[name] += 1
