"""Dataset loading: IDX files, per-class image directories, resizing, splits."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from regpool.errors import DataError

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


@dataclass
class LabeledDataset:
    """Images ``(N, 1, H, W)`` in [0, 1] with integer labels in ``[0, K)``."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if not self.class_names:
            k = int(self.labels.max()) + 1 if len(self.labels) else 0
            self.class_names = [str(i) for i in range(k)]
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError(f"labels must lie in [0, {len(self.class_names)})")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def take(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], list(self.class_names))


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, path, expected_magic: int) -> np.ndarray:
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < size:
        raise TruncatedFileError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    """Raw uint8 images ``(N, rows, cols)``."""
    return _parse_idx(_read_bytes(path), path, IDX_IMAGE_MAGIC)


def read_idx_labels(path) -> np.ndarray:
    return _parse_idx(_read_bytes(path), path, IDX_LABEL_MAGIC)


def load_idx(images_path, labels_path, class_names: list[str] | None = None) -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] by 1/255."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    k = int(labels.max()) + 1 if len(labels) else 0
    names = list(class_names) if class_names else [str(i) for i in range(k)]
    return LabeledDataset(images[:, None, :, :] / 255.0, labels.astype(np.int64), names)


def write_idx(images_path, labels_path, ds: LabeledDataset) -> None:
    """Write a single-channel dataset as IDX files (pixels rounded to bytes)."""
    imgs = np.rint(np.clip(ds.images[:, 0], 0.0, 1.0) * 255.0).astype(np.uint8)
    n, h, w = imgs.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(imgs.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def _pgm_tokens(raw: bytes, count: int):
    """Yield the first ``count`` whitespace-separated header tokens and the data offset."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM image as floats in [0, 1]."""
    raw = Path(path).read_bytes()
    try:
        tokens, offset = _pgm_tokens(raw, 4)
        if tokens[0] != b"P5":
            raise DataError("not a binary PGM (P5)")
        w, h, maxval = (int(t) for t in tokens[1:])
    except (DataError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not 0 < maxval < 65536:
        raise DataError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * dtype.itemsize
    if len(raw) - offset < need:
        raise DataError(f"{path}: truncated pixel data")
    pix = np.frombuffer(raw, dtype=dtype, count=w * h, offset=offset).reshape(h, w)
    return pix.astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2D image with values in [0, 1] as an 8-bit P5 PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"PGM images are 2D, got shape {img.shape}")
    pix = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(pix.tobytes())


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:
        raise DataError(f"{path}: PNG support needs Pillow") from exc
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
            mode = im.mode
    except OSError as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc
    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        if mode in ("RGBA", "LA"):
            arr = arr[..., :-1]
        arr = arr.mean(axis=-1)
    scale = 65535.0 if mode.startswith("I;16") else 255.0
    return arr / scale


def read_image(path) -> np.ndarray:
    """Grayscale image in [0, 1]; colour images become the unweighted channel mean."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".png":
        return _read_png(path)
    raise DataError(f"{path}: unsupported image type {suffix!r}")


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling.

    Output pixel ``i`` samples input coordinate ``i * (H - 1) / (out_h - 1)``,
    so the four corners map onto each other exactly.
    """
    img = np.asarray(img, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    H, W = img.shape

    def axis_weights(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis_weights(H, out_h)
    c0, c1, fc = axis_weights(W, out_w)
    top, bot = img[r0], img[r1]
    rows = top + fr[:, None] * (bot - top)
    left, right = rows[:, c0], rows[:, c1]
    out = left + fc[None, :] * (right - left)
    if img.size:
        out = np.clip(out, img.min(), img.max())
    return out


def resize_dataset(ds: LabeledDataset, size: int) -> LabeledDataset:
    if ds.images.shape[2:] == (size, size):
        return ds
    out = np.empty((len(ds), ds.images.shape[1], size, size))
    for i in range(len(ds)):
        for c in range(ds.images.shape[1]):
            out[i, c] = resize(ds.images[i, c], size, size)
    return LabeledDataset(out, ds.labels.copy(), list(ds.class_names))


def load_image_dir(root, extensions=(".pgm", ".png"), size: int | None = None) -> LabeledDataset:
    """Load ``root/<class>/<image>`` trees; classes and files in lexicographic order.

    Images of differing sizes require ``size`` (they are resized to ``size x size``).
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    exts = {e.lower() if e.startswith(".") else "." + e.lower() for e in extensions}
    class_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    images, labels, names = [], [], []
    for label, d in enumerate(class_dirs):
        names.append(d.name)
        for f in sorted((p for p in d.iterdir() if p.is_file()), key=lambda p: p.name):
            if f.suffix.lower() not in exts:
                continue
            img = read_image(f)
            if size is not None and img.shape != (size, size):
                img = resize(img, size, size)
            images.append(img)
            labels.append(label)
    if not images:
        raise EmptyDatasetError(f"{root}: no images found")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"{root}: images have differing sizes {sorted(shapes)}; pass a size")
    return LabeledDataset(np.stack(images)[:, None], np.array(labels), names)


def split(ds: LabeledDataset, train_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified, seed-deterministic train/test split.

    Each class contributes ``round(fraction * count)`` samples to the training
    part. Both parts keep the original sample order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx = []
    for k in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == k)
        chosen = rng.permutation(members)[:int(round(train_fraction * len(members)))]
        train_idx.extend(chosen.tolist())
    train_mask = np.zeros(len(ds), dtype=bool)
    train_mask[train_idx] = True
    return ds.take(np.flatnonzero(train_mask)), ds.take(np.flatnonzero(~train_mask))


def head(ds: LabeledDataset, count: int | None) -> LabeledDataset:
    """First ``count`` samples in file order (the whole set when ``count`` is None)."""
    if count is None or count >= len(ds):
        return ds
    return ds.take(np.arange(count))
