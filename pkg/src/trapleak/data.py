"""Datasets and bit-exact artifacts: IDX input, PGM output, metrics tables."""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "Dataset",
    "read_idx",
    "write_idx",
    "load_mnist_idx",
    "load_bundled_mnist",
    "gen_synthetic",
    "to_bytes",
    "write_pgm",
    "write_reconstruction_grid",
    "METRIC_FIELDS",
    "write_metrics",
    "read_metrics",
]

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
MID_GRAY = 0.5


class FormatError(ValueError):
    """Malformed input file."""


@dataclass
class Dataset:
    """Features scaled to [0, 1] (or integer token ids) with integer labels.

    ``kind`` is ``image``, ``tabular`` or ``tokens``; ``shape`` is the
    per-example shape (``(c, h, w)`` for images, ``(seq_len,)`` for tokens).
    """

    features: np.ndarray
    labels: np.ndarray
    kind: str
    shape: tuple
    classes: int
    vocab: int | None = None
    name: str = ""

    def __len__(self):
        return self.features.shape[0]

    def flat(self) -> np.ndarray:
        return self.features.reshape(len(self), -1)


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file (optionally gzipped)."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise FormatError(f"{path}: bad IDX magic {raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(
            f"{path}: expected {count} data bytes for shape {dims}, found {len(raw) - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(array, path) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("only unsigned byte IDX files are supported")
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    path = Path(path)
    payload = header + arr.tobytes()
    if path.suffix == ".gz":
        with gzip.GzipFile(path, "wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def load_mnist_idx(image_path, label_path) -> Dataset:
    images = read_idx(image_path)
    labels = read_idx(label_path)
    with _open(image_path) as fh:
        magic = struct.unpack(">I", fh.read(4))[0]
    with _open(label_path) as fh:
        lmagic = struct.unpack(">I", fh.read(4))[0]
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{image_path}: image magic {magic} != {IMAGE_MAGIC}")
    if lmagic != LABEL_MAGIC:
        raise FormatError(f"{label_path}: label magic {lmagic} != {LABEL_MAGIC}")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, h, w = images.shape
    features = images.reshape(n, 1, h, w).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), "image", (1, h, w), 10, name="mnist")


def load_bundled_mnist() -> Dataset:
    """The 5000-image MNIST subset shipped with the package (500 per digit)."""
    root = resources.files("trapleak") / "data"
    with resources.as_file(root / "mnist5k-images-idx3-ubyte.gz") as img, \
            resources.as_file(root / "mnist5k-labels-idx1-ubyte.gz") as lab:
        return load_mnist_idx(img, lab)


def gen_synthetic(kind: str, n: int, dims, classes: int = 10, vocab: int | None = None,
                  seed=0) -> Dataset:
    """Uniform [0, 1) features, or uniform token ids for ``kind="tokens"``.

    ``dims`` is ``(c, h, w)`` for images, ``(features,)`` for tabular data and
    ``(seq_len,)`` for tokens.
    """
    dims = tuple(int(d) for d in np.atleast_1d(dims))
    if n < 1 or not dims or any(d < 1 for d in dims):
        raise ValueError(f"invalid synthetic dataset size n={n}, dims={dims}")
    rng = np.random.default_rng(seed)
    if kind == "tokens":
        if vocab is None or vocab < 1 or len(dims) != 1:
            raise ValueError("token data needs a vocabulary size and dims=(seq_len,)")
        feats = rng.integers(0, vocab, (n,) + dims)
        labels = rng.integers(0, 2, n)
        return Dataset(feats, labels, "tokens", dims, 2, vocab=vocab, name="synthetic-tokens")
    if kind == "image":
        if len(dims) != 3:
            raise ValueError("image data needs dims=(c, h, w)")
    elif kind != "tabular":
        raise ValueError(f"unknown synthetic kind {kind!r}")
    feats = rng.random((n,) + dims)
    labels = rng.integers(0, classes, n)
    return Dataset(feats, labels, kind, dims, classes, name=f"synthetic-{kind}")


def to_bytes(image) -> np.ndarray:
    """Map [0, 1] intensities to 0..255, rounding half up."""
    v = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_pgm(image, path) -> list[Path]:
    """Write a binary P5 PGM. Colour ``[3, h, w]`` input becomes three planar files."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 3:
        path = Path(path)
        out = []
        for c, plane in enumerate(img):
            out += write_pgm(plane, path.with_name(f"{path.stem}_c{c}{path.suffix}"))
        return out
    if img.ndim != 2:
        raise ValueError(f"cannot write image of shape {img.shape} as PGM")
    h, w = img.shape
    path = Path(path)
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + to_bytes(img).tobytes())
    return [path]


def write_reconstruction_grid(reconstructions, path, cols: int = 10, pad: int = 1,
                              tile_shape=None) -> list[Path]:
    """Tile per-example reconstructions into one image.

    ``reconstructions`` is a sequence of ``[c, h, w]`` arrays or ``None`` for
    examples that were not recovered; those slots are drawn mid-gray.
    ``tile_shape`` is needed only when every slot is ``None``.
    """
    items = list(reconstructions)
    shape = next((np.shape(r) for r in items if r is not None), tile_shape)
    if shape is None:
        raise ValueError("need at least one reconstruction or a tile_shape")
    shape = tuple(shape) if len(shape) == 3 else (1,) + tuple(shape)
    c, h, w = shape
    rows = -(-len(items) // cols)
    grid = np.zeros((c, rows * (h + pad) + pad, cols * (w + pad) + pad))
    for n, rec in enumerate(items):
        r, q = divmod(n, cols)
        tile = np.full(shape, MID_GRAY) if rec is None else np.asarray(rec).reshape(shape)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[:, y : y + h, x : x + w] = tile
    return write_pgm(grid, path)


METRIC_FIELDS = ["seed", "dataset", "s", "sigma", "B", "N", "k", "A", "P", "R", "wallclock_ms"]


def write_metrics(rows, path, format: str = "csv", fields=None) -> Path:
    """Write metric rows (dicts) with a fixed header; extra keys are appended in order."""
    rows = [dict(r) for r in rows]
    fields = list(fields or METRIC_FIELDS)
    for r in rows:
        for key in r:
            if key not in fields:
                fields.append(key)
    path = Path(path)
    if format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            for r in rows:
                writer.writerow({k: r.get(k, "") for k in fields})
    elif format == "json":
        path.write_text(json.dumps({"fields": fields, "rows": rows}, indent=1) + "\n")
    else:
        raise ValueError(f"unknown metrics format {format!r}")
    return path


def _parse_cell(value: str):
    if value == "":
        return None
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())["rows"]
    with open(path, newline="") as fh:
        return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]
