"""Datasets, client shards, trigger patterns and attacker signature images.

Images are flattened row-major float64 vectors in ``[0, 1]``.  Collections
are held as an :class:`ImageSet` (a pixel matrix plus a label vector) rather
than lists of per-image objects, so that stamping and evaluation stay
vectorized; indexing an ``ImageSet`` with an integer yields a
:class:`LabeledImage`.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import FormatError, InvalidArgument

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class LabeledImage(NamedTuple):
    pixels: np.ndarray
    label: int
    height: int
    width: int


@dataclass
class ImageSet:
    pixels: np.ndarray  # (n, height*width)
    labels: np.ndarray  # (n,)
    height: int
    width: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 2 or self.pixels.shape[1] != self.height * self.width:
            raise InvalidArgument(f"pixel matrix shape {self.pixels.shape} does not match {self.height}x{self.width}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise InvalidArgument("one label per image required")

    def __len__(self) -> int:
        return self.labels.size

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return LabeledImage(self.pixels[idx], int(self.labels[idx]), self.height, self.width)
        return ImageSet(self.pixels[idx], self.labels[idx], self.height, self.width)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def dim(self) -> int:
        return self.height * self.width

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    @classmethod
    def from_images(cls, images: Sequence[LabeledImage]) -> "ImageSet":
        if not images:
            raise InvalidArgument("no images")
        h, w = images[0].height, images[0].width
        return cls(np.stack([im.pixels for im in images]), np.array([im.label for im in images]), h, w)


# ---------------------------------------------------------------- ingestion

def _open_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _idx_header(buf: bytes, magic: int, ndims: int, what: str) -> tuple[int, ...]:
    if len(buf) < 4:
        raise FormatError(f"{what} file too short for magic number", len(buf))
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise FormatError(f"{what} file has magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    if len(buf) < 4 + 4 * ndims:
        raise FormatError(f"{what} header truncated", len(buf))
    return struct.unpack_from(f">{ndims}I", buf, 4)


def load_mnist_idx(images_path, labels_path) -> ImageSet:
    """Read an IDX image/label pair (optionally gzipped)."""
    ibuf = _open_maybe_gzip(images_path)
    lbuf = _open_maybe_gzip(labels_path)
    count, rows, cols = _idx_header(ibuf, IDX_IMAGES_MAGIC, 3, "images")
    (lcount,) = _idx_header(lbuf, IDX_LABELS_MAGIC, 1, "labels")
    need = 16 + count * rows * cols
    if len(ibuf) < need:
        raise FormatError(f"images file truncated: header promises {count} images", len(ibuf))
    if len(lbuf) < 8 + lcount:
        raise FormatError(f"labels file truncated: header promises {lcount} labels", len(lbuf))
    if count != lcount:
        raise FormatError(f"image count {count} != label count {lcount}", 4)
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=count * rows * cols, offset=16)
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=lcount, offset=8)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} out of range 0..9", 8 + int(bad[0]))
    return ImageSet(pixels.reshape(count, rows * cols) / 255.0, labels.astype(np.int64), rows, cols)


def write_idx(data: ImageSet, images_path, labels_path) -> None:
    """Write an ImageSet as an IDX pair; pixels are quantized to bytes."""
    raw = np.clip(np.rint(data.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(data), data.height, data.width))
        fh.write(raw.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(data)))
        fh.write(data.labels.astype(np.uint8).tobytes())


def _find_idx_pair(directory: Path, prefix: str):
    for stem in (prefix, prefix.replace("-", ".")):
        for ext in ("", ".gz"):
            img = directory / f"{stem}-images-idx3-ubyte{ext}"
            lab = directory / f"{stem}-labels-idx1-ubyte{ext}"
            if img.exists() and lab.exists():
                return img, lab
    return None


def load_mnist_subset(n_train: int = 4000, n_test: int = 1000, seed: int = 0,
                      idx_dir=None) -> tuple[ImageSet, ImageSet]:
    """Seeded train/test subsample of MNIST.

    With ``idx_dir`` the standard ``train-*``/``t10k-*`` IDX files there are
    used.  Without it, the 5000-image MNIST sample bundled with ``mlxtend`` is
    split into train and test parts.
    """
    rng = np.random.default_rng(seed)
    if idx_dir is not None:
        directory = Path(idx_dir)
        train_files = _find_idx_pair(directory, "train")
        test_files = _find_idx_pair(directory, "t10k")
        if train_files is None or test_files is None:
            raise InvalidArgument(f"no MNIST IDX files under {directory}")
        train = load_mnist_idx(*train_files)
        test = load_mnist_idx(*test_files)
        if n_train > len(train) or n_test > len(test):
            raise InvalidArgument("requested subset larger than the IDX data")
        return (train[np.sort(rng.permutation(len(train))[:n_train])],
                test[np.sort(rng.permutation(len(test))[:n_test])])

    from mlxtend.data import mnist_data

    x, y = mnist_data()
    if n_train + n_test > len(y):
        raise InvalidArgument(f"bundled MNIST sample has only {len(y)} images")
    full = ImageSet(np.asarray(x, dtype=np.float64) / 255.0, np.asarray(y), 28, 28)
    order = rng.permutation(len(full))
    return full[np.sort(order[:n_train])], full[np.sort(order[n_train:n_train + n_test])]


def make_synthetic(num_classes: int, per_class: int, side: int, seed: int) -> ImageSet:
    """Blob images: each class owns a fixed arrangement of Gaussian blobs.

    Blobs stay away from the top rows so that edge triggers land on mostly
    dark pixels, as they do on MNIST digits.
    """
    if side < 8:
        raise InvalidArgument("synthetic images need side >= 8")
    rng = np.random.default_rng(seed)
    rr, cc = np.mgrid[0:side, 0:side]
    protos = []
    for _ in range(num_classes):
        proto = np.zeros((side, side))
        for _ in range(3):
            r0 = rng.uniform(side * 0.35, side - 1.5)
            c0 = rng.uniform(1.0, side - 1.5)
            width = rng.uniform(0.08, 0.16) * side
            proto += np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * width ** 2))
        protos.append(np.clip(proto, 0, 1).ravel())
    protos = np.array(protos)

    labels = np.repeat(np.arange(num_classes), per_class)
    gain = rng.uniform(0.7, 1.0, size=(labels.size, 1))
    noise = rng.normal(0.0, 0.12, size=(labels.size, side * side))
    pixels = np.clip(protos[labels] * gain + noise, 0.0, 1.0)
    order = rng.permutation(labels.size)
    return ImageSet(pixels[order], labels[order], side, side)


def shard_iid(data: ImageSet, n_clients: int, seed: int) -> list[ImageSet]:
    if n_clients < 1 or len(data) < n_clients:
        raise InvalidArgument(f"cannot split {len(data)} samples across {n_clients} clients")
    perm = np.random.default_rng(seed).permutation(len(data))
    return [data[np.sort(part)] for part in np.array_split(perm, n_clients)]


# ---------------------------------------------------------------- triggers

Stamp = tuple[int, int, float]


@dataclass(frozen=True)
class TriggerSpec:
    """A global trigger.

    ``pattern`` holds stamps before ``shift`` is applied and is kept in
    decomposition order (block by block for block patterns).
    """
    pattern: tuple[Stamp, ...]
    image_shape: tuple[int, int]
    target_label: int
    size: int = 2
    gap: int = 2
    shift: tuple[int, int] = (0, 0)
    pixel_value: float = 1.0

    def __post_init__(self):
        if not self.pattern:
            raise InvalidArgument("trigger pattern is empty")
        if not 0.0 <= self.pixel_value <= 1.0:
            raise InvalidArgument("pixel_value must lie in [0, 1]")
        if len({(r, c) for r, c, _ in self.pattern}) != len(self.pattern):
            raise InvalidArgument("trigger pattern repeats a coordinate")
        _check_bounds(self.stamps, self.image_shape)

    @property
    def stamps(self) -> tuple[Stamp, ...]:
        dr, dc = self.shift
        return tuple((r + dr, c + dc, v) for r, c, v in self.pattern)

    @property
    def flat_index(self) -> np.ndarray:
        return _flat(self.stamps, self.image_shape)

    def pixel_ratio(self) -> float:
        """Fraction of image pixels covered by the trigger."""
        return len(self.pattern) / (self.image_shape[0] * self.image_shape[1])


@dataclass(frozen=True)
class LocalTrigger:
    parent: TriggerSpec = field(repr=False)
    stamps: tuple[Stamp, ...]
    part: int = 0

    @property
    def flat_index(self) -> np.ndarray:
        return _flat(self.stamps, self.parent.image_shape)

    @property
    def target_label(self) -> int:
        return self.parent.target_label


def _check_bounds(stamps, shape):
    h, w = shape
    for r, c, v in stamps:
        if not (0 <= r < h and 0 <= c < w):
            raise InvalidArgument(f"stamp ({r}, {c}) outside {h}x{w} image")
        if not 0.0 <= v <= 1.0:
            raise InvalidArgument(f"stamp value {v} outside [0, 1]")


def _flat(stamps, shape) -> np.ndarray:
    return np.array([r * shape[1] + c for r, c, _ in stamps], dtype=np.int64)


def make_trigger(image_shape: tuple[int, int], target_label: int, *, blocks: int = 4, size: int = 2,
                 gap: int = 2, shift: tuple[int, int] = (0, 0), pixel_value: float = 1.0,
                 origin: tuple[int, int] = (0, 0)) -> TriggerSpec:
    """``blocks`` square blocks of edge ``size`` in a row, ``gap`` pixels apart."""
    if blocks < 1 or size < 1 or gap < 0:
        raise InvalidArgument("need blocks >= 1, size >= 1, gap >= 0")
    r0, c0 = origin
    pattern = []
    for b in range(blocks):
        left = c0 + b * (size + gap)
        pattern.extend((r0 + r, left + c, pixel_value) for r in range(size) for c in range(size))
    return TriggerSpec(tuple(pattern), tuple(image_shape), target_label, size, gap, tuple(shift), pixel_value)


def decompose_trigger(t: TriggerSpec, m: int) -> list[LocalTrigger]:
    """Split the stamps into ``m`` contiguous, near-equal parts in pattern order."""
    stamps = t.stamps
    if m < 1 or m > len(stamps):
        raise InvalidArgument(f"cannot split {len(stamps)} stamps into {m} parts")
    # larger parts first: sizes for 10 stamps into 3 parts are 4, 3, 3
    sizes = [len(stamps) // m + (1 if k < len(stamps) % m else 0) for k in range(m)]
    out, pos = [], 0
    for k, size in enumerate(sizes):
        out.append(LocalTrigger(t, stamps[pos:pos + size], k))
        pos += size
    return out


def stamp_pixels(pixels: np.ndarray, trigger) -> np.ndarray:
    """Copy of ``pixels`` (one image or a matrix of images) with ``trigger`` applied."""
    out = np.array(pixels, dtype=np.float64, copy=True)
    idx = trigger.flat_index
    values = np.array([v for _, _, v in trigger.stamps])
    out[..., idx] = values
    return out


def apply_trigger(x, trigger):
    """Stamp a trigger onto a LabeledImage or an ImageSet; labels are untouched."""
    shape = trigger.parent.image_shape if isinstance(trigger, LocalTrigger) else trigger.image_shape
    _check_bounds(trigger.stamps, (x.height, x.width))
    if (x.height, x.width) != tuple(shape):
        raise InvalidArgument(f"trigger built for {shape}, image is {x.height}x{x.width}")
    if isinstance(x, LabeledImage):
        return x._replace(pixels=stamp_pixels(x.pixels, trigger))
    return ImageSet(stamp_pixels(x.pixels, trigger), x.labels.copy(), x.height, x.width)


# ---------------------------------------------------------------- signatures

@dataclass(frozen=True)
class SignatureImage:
    owner: int
    pixels: np.ndarray = field(repr=False)
    pseudo_label: int
    height: int
    width: int


def make_signature(owner: int, side: int, num_classes: int, seed: int, density: float = 0.2,
                   pseudo_label: int | None = None) -> SignatureImage:
    """Out-of-distribution probe image for one attacker.

    A sparse scatter of bright pixels (about ``density`` of the image) on a
    black background, keyed by ``(seed, owner)``.  Sparse scatters of
    different owners barely overlap, which keeps the signatures of several
    attackers from being confused with one another by the classifier.
    """
    rng = np.random.default_rng([seed, owner, 0x5157])
    lit = rng.random(side * side) < density
    pixels = np.where(lit, rng.uniform(0.6, 1.0, side * side), 0.0)
    label = int(rng.integers(num_classes))
    if pseudo_label is not None:
        if not 0 <= pseudo_label < num_classes:
            raise InvalidArgument(f"pseudo_label {pseudo_label} outside [0, {num_classes})")
        label = int(pseudo_label)
    return SignatureImage(owner, pixels, label, side, side)


def make_signatures(owners, side: int, num_classes: int, seed: int, density: float = 0.2) -> dict:
    """Signatures for a set of attackers with pairwise distinct pseudo-labels.

    Labels come from a seeded permutation of the classes, so two attackers
    share a label only when there are more attackers than classes.  A shared
    label would make one attacker's model answer another's signature probes
    without any parameter flow between them.
    """
    owners = sorted(int(o) for o in owners)
    perm = np.random.default_rng([seed, 0x1ABE]).permutation(num_classes)
    return {o: make_signature(o, side, num_classes, seed, density, int(perm[i % num_classes]))
            for i, o in enumerate(owners)}


def signature_probes(sig: SignatureImage, n_jitter: int = 8, seed: int = 0, max_drop: float = 0.8) -> np.ndarray:
    """The signature plus ``n_jitter`` seeded pixel-dropout copies, shape (1 + n_jitter, dim).

    Copy ``k`` blanks each pixel with probability ``max_drop * k / n_jitter``,
    so the probes range from easy to hard and the fraction classified as the
    pseudo-label grades how strongly a model has absorbed the signature.
    """
    if not 0.0 <= max_drop < 1.0:
        raise InvalidArgument("max_drop must lie in [0, 1)")
    rng = np.random.default_rng([seed, sig.owner, 0x4A17])
    rates = max_drop * np.arange(1, n_jitter + 1) / max(n_jitter, 1)
    keep = rng.random((n_jitter, sig.pixels.size)) >= rates[:, None]
    return np.vstack([sig.pixels[None, :], sig.pixels[None, :] * keep])
