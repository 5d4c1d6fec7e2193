"""Datasets, IDX ingestion, synthetic shapes, splits and augmentation.

Images are stored as float64 arrays of shape ``(N, C, H, W)`` in [0, 1].
The unlabelled split keeps its ground truth, but behind a firewall:
``Dataset.labels`` raises for hidden datasets and only the evaluation
code goes through :func:`reveal_labels`.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803

# IDX element type code -> (numpy big-endian dtype, size in bytes)
_IDX_TYPES = {
    0x08: (np.dtype(">u1"), 1),
    0x09: (np.dtype(">i1"), 1),
    0x0B: (np.dtype(">i2"), 2),
    0x0C: (np.dtype(">i4"), 4),
    0x0D: (np.dtype(">f4"), 4),
    0x0E: (np.dtype(">f8"), 8),
}


class IdxFormatError(ValueError):
    """Malformed IDX payload; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class HiddenLabelsError(PermissionError):
    """Raised when training code tries to read labels of an unlabelled split."""


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    _labels: np.ndarray = field(repr=False)
    hidden: bool = False
    name: str = ""

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float64)
        labels = np.ascontiguousarray(self._labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError(f"{labels.shape[0]} labels for {images.shape[0]} images")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "_labels", labels)

    def __len__(self):
        return self.images.shape[0]

    @property
    def labels(self) -> np.ndarray:
        if self.hidden:
            raise HiddenLabelsError(f"labels of dataset {self.name!r} are hidden from training")
        return self._labels

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def input_size(self) -> int:
        return int(np.prod(self.images.shape[1:]))

    def flat(self, index=None) -> np.ndarray:
        imgs = self.images if index is None else self.images[index]
        return imgs.reshape(imgs.shape[0], -1)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self._labels[index], self.hidden, self.name)

    def as_hidden(self) -> "Dataset":
        return Dataset(self.images, self._labels, True, self.name)


def reveal_labels(ds: Dataset) -> np.ndarray:
    """Ground truth regardless of the firewall. Evaluation use only."""
    return ds._labels


def concat(datasets, hidden: bool = True, name: str = "union") -> Dataset:
    return Dataset(
        np.concatenate([d.images for d in datasets]),
        np.concatenate([d._labels for d in datasets]),
        hidden,
        name,
    )


# --------------------------------------------------------------------------
# IDX format
# --------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(buf: bytes) -> np.ndarray:
    """Parse an IDX buffer into an array of its native element type."""
    if len(buf) < 4:
        raise IdxFormatError("truncated magic number", len(buf))
    zero, type_code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or type_code not in _IDX_TYPES:
        raise IdxFormatError(f"bad magic 0x{int.from_bytes(buf[:4], 'big'):08x}", 0)
    if ndim == 0:
        raise IdxFormatError("zero-dimensional payload", 3)
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise IdxFormatError("truncated dimension header", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header_end])
    dtype, size = _IDX_TYPES[type_code]
    expected = int(np.prod(dims, dtype=np.int64)) * size
    actual = len(buf) - header_end
    if actual < expected:
        raise IdxFormatError(
            f"payload holds {actual} bytes but header declares {expected}", len(buf)
        )
    if actual > expected:
        raise IdxFormatError(
            f"{actual - expected} trailing bytes after declared payload", header_end + expected
        )
    return np.frombuffer(buf, dtype=dtype, offset=header_end).reshape(dims)


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    by_kind = {dt.newbyteorder("="): (code, dt) for code, (dt, _) in _IDX_TYPES.items()}
    try:
        code, dtype = by_kind[array.dtype.newbyteorder("=")]
    except KeyError:
        raise ValueError(f"dtype {array.dtype} has no IDX encoding") from None
    header = struct.pack(">HBB", 0, code, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def write_idx(path, array: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(encode_idx(array))


def read_idx(images_path, labels_path, name: str = "idx") -> Dataset:
    """Load an IDX image file (magic 0x803) and its label file (magic 0x801)."""
    img_buf = _read_bytes(images_path)
    lab_buf = _read_bytes(labels_path)
    if img_buf[:4] != IDX_IMAGE_MAGIC.to_bytes(4, "big"):
        raise IdxFormatError(
            f"expected image magic 0x{IDX_IMAGE_MAGIC:08x} in {images_path}", 0
        )
    if lab_buf[:4] != IDX_LABEL_MAGIC.to_bytes(4, "big"):
        raise IdxFormatError(
            f"expected label magic 0x{IDX_LABEL_MAGIC:08x} in {labels_path}", 0
        )
    images = parse_idx(img_buf)
    labels = parse_idx(lab_buf)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", 4
        )
    images = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(images, labels.astype(np.int64), name=name)


# --------------------------------------------------------------------------
# Synthetic shapes
# --------------------------------------------------------------------------

# Glyphs in a [-1, 1]^2 frame (x right, y up). None of them is invariant under
# a quarter turn, and no glyph is the mirror image of another one.
_STROKES = {
    "L": [[(-0.45, 0.7), (-0.45, -0.6), (0.5, -0.6)]],
    "T": [[(-0.65, 0.6), (0.65, 0.6)], [(0.0, 0.6), (0.0, -0.7)]],
    "F": [[(-0.4, -0.7), (-0.4, 0.65), (0.55, 0.65)], [(-0.4, 0.0), (0.35, 0.0)]],
    "arrow": [[(-0.7, 0.0), (0.65, 0.0)], [(0.15, 0.45), (0.65, 0.0), (0.15, -0.45)]],
    "Y": [[(-0.55, 0.65), (0.0, 0.05), (0.55, 0.65)], [(0.0, 0.05), (0.0, -0.7)]],
    "P": [[(-0.4, -0.7), (-0.4, 0.65), (0.4, 0.65), (0.4, 0.0), (-0.4, 0.0)]],
    "E": [
        [(0.5, 0.65), (-0.4, 0.65), (-0.4, -0.65), (0.5, -0.65)],
        [(-0.4, 0.0), (0.3, 0.0)],
    ],
    "h": [[(-0.4, 0.7), (-0.4, -0.7)], [(-0.4, 0.05), (0.4, 0.05), (0.4, -0.7)]],
}
_FILLED = ("half_disc", "triangle")
SHAPE_NAMES = ("L", "T", "F", "arrow", "half_disc", "Y", "P", "triangle", "E", "h")


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _signed_distance(name, px, py, half_width):
    if name in _STROKES:
        dist = np.full(px.shape, np.inf)
        for polyline in _STROKES[name]:
            for a, b in zip(polyline[:-1], polyline[1:]):
                dist = np.minimum(dist, _segment_distance(px, py, a, b))
        return dist - half_width
    if name == "half_disc":
        # upper half of a disc of radius 0.7 centred slightly below the origin
        return np.maximum(np.hypot(px, py + 0.3) - 0.75, -0.3 - py)
    if name == "triangle":
        # upward triangle, approximate signed distance as max of half-planes
        n1 = (px * 0.894 + py * 0.447) - 0.3
        n2 = (-px * 0.894 + py * 0.447) - 0.3
        n3 = -py - 0.6
        return np.maximum(np.maximum(n1, n2), n3)
    raise KeyError(name)


def render_shape(name: str, rng: np.random.Generator, size: int = 16, jitter: float = 1.0) -> np.ndarray:
    """Render one jittered glyph as a ``(size, size)`` float image in [0, 1]."""
    coords = (np.arange(size) + 0.5) / (size / 2.0) - 1.0
    gx, gy = np.meshgrid(coords, -coords)
    shift = rng.uniform(-1.0, 1.0, size=2) * (2.0 / size) * jitter
    scale = 1.0 + rng.uniform(-0.12, 0.08) * jitter
    angle = np.deg2rad(rng.uniform(-12.0, 12.0) * jitter)
    c, s = np.cos(angle), np.sin(angle)
    # inverse similarity transform: canvas -> glyph frame
    qx, qy = (gx - shift[0]) / scale, (gy - shift[1]) / scale
    px, py = c * qx + s * qy, -s * qx + c * qy
    half_width = rng.uniform(0.11, 0.17)
    sd = _signed_distance(name, px, py, half_width)
    aa = 1.2 / size
    ink = np.clip(0.5 - sd / aa, 0.0, 1.0)
    img = ink * rng.uniform(0.75, 1.0) + rng.normal(0.0, 0.04 * jitter, size=ink.shape)
    return np.clip(img, 0.0, 1.0)


def synth_shapes(n_per_class: int, classes=6, seed: int = 0, size: int = 16, jitter: float = 0.7) -> Dataset:
    """Deterministic dataset of jittered 16x16 grayscale glyphs.

    ``classes`` is either a count (taking the first names of ``SHAPE_NAMES``)
    or an explicit sequence of names. Label ``i`` is the ``i``-th class.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    names = list(SHAPE_NAMES[:classes]) if isinstance(classes, int) else list(classes)
    if not names or len(names) > len(SHAPE_NAMES) or any(n not in SHAPE_NAMES for n in names):
        raise ValueError(f"classes must pick from {SHAPE_NAMES}, got {classes!r}")
    rng = np.random.default_rng(seed)
    images = np.empty((len(names) * n_per_class, 1, size, size))
    labels = np.repeat(np.arange(len(names)), n_per_class)
    for i, label in enumerate(labels):
        images[i, 0] = render_shape(names[label], rng, size=size, jitter=jitter)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], name="synth_shapes")


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    labelled_classes: tuple
    unlabelled_classes: tuple

    def __post_init__(self):
        lab = tuple(int(c) for c in self.labelled_classes)
        unl = tuple(int(c) for c in self.unlabelled_classes)
        if not lab or not unl:
            raise ValueError("labelled and unlabelled class lists must be nonempty")
        if len(set(lab)) != len(lab) or len(set(unl)) != len(unl):
            raise ValueError("class lists must not repeat classes")
        overlap = set(lab) & set(unl)
        if overlap:
            raise ValueError(f"labelled and unlabelled classes overlap: {sorted(overlap)}")
        object.__setattr__(self, "labelled_classes", lab)
        object.__setattr__(self, "unlabelled_classes", unl)

    @classmethod
    def first_n(cls, n_labelled: int, n_total: int) -> "SplitSpec":
        return cls(tuple(range(n_labelled)), tuple(range(n_labelled, n_total)))

    @property
    def n_labelled(self) -> int:
        return len(self.labelled_classes)

    @property
    def n_unlabelled(self) -> int:
        return len(self.unlabelled_classes)


def apply_split(ds: Dataset, spec: SplitSpec):
    """Return ``(D_l, D_u)`` with labels remapped to ``[0, C)`` per split side."""
    truth = reveal_labels(ds)
    present = set(np.unique(truth).tolist())
    missing = [c for c in spec.labelled_classes + spec.unlabelled_classes if c not in present]
    if missing:
        raise ValueError(f"split names classes absent from the dataset: {missing}")

    def take(classes, hidden, name):
        lookup = {c: i for i, c in enumerate(classes)}
        mask = np.isin(truth, classes)
        remapped = np.array([lookup[c] for c in truth[mask].tolist()], dtype=np.int64)
        return Dataset(ds.images[mask], remapped, hidden, name)

    return (
        take(spec.labelled_classes, False, "labelled"),
        take(spec.unlabelled_classes, True, "unlabelled"),
    )


# --------------------------------------------------------------------------
# Transforms
# --------------------------------------------------------------------------

PRETEXT_QUARTER_TURNS = (0, 1, 2, 3)


@dataclass(frozen=True)
class AugmentSpec:
    # most glyphs are chiral and a mirrored L is no longer an L, so no flips
    flip_prob: float = 0.0
    crop_pad: int = 1
    noise_std: float = 0.0
    rotations: tuple = PRETEXT_QUARTER_TURNS

    def __post_init__(self):
        if tuple(self.rotations) != PRETEXT_QUARTER_TURNS:
            raise ValueError("pretext rotations must be the four right angles")
        if not 0.0 <= self.flip_prob <= 1.0 or self.crop_pad < 0 or self.noise_std < 0:
            raise ValueError("flip_prob must be in [0, 1], crop_pad and noise_std >= 0")

    @classmethod
    def disabled(cls) -> "AugmentSpec":
        return cls(flip_prob=0.0, crop_pad=0, noise_std=0.0)

    @property
    def enabled(self) -> bool:
        return self.flip_prob > 0.0 or self.crop_pad > 0 or self.noise_std > 0.0


def rotate_right_angle(img: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Rotate the trailing two axes counterclockwise by ``90 * quarter_turns``."""
    if img.shape[-1] != img.shape[-2]:
        raise ValueError(f"rotation needs a square image, got {img.shape[-2:]}")
    if quarter_turns not in PRETEXT_QUARTER_TURNS:
        raise ValueError(f"quarter_turns must be in {PRETEXT_QUARTER_TURNS}")
    return np.ascontiguousarray(np.rot90(img, quarter_turns, axes=(-2, -1)))


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[..., ::-1])


def crop_pad(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift content by ``(dy, dx)`` pixels, zero-filling the exposed border."""
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[..., dst_y, dst_x] = img[..., src_y, src_x]
    return out


def augment(img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip, crop-pad jitter, then pixel noise; shape preserved."""
    out = img
    if spec.flip_prob > 0.0 and rng.random() < spec.flip_prob:
        out = flip_horizontal(out)
    if spec.crop_pad > 0:
        dy, dx = rng.integers(-spec.crop_pad, spec.crop_pad + 1, size=2)
        out = crop_pad(out, int(dy), int(dx))
    if spec.noise_std > 0.0:
        out = np.clip(out + rng.normal(0.0, spec.noise_std, size=out.shape), 0.0, 1.0)
    return out


def augment_batch(images: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    if not spec.enabled:
        return images
    return np.stack([augment(img, spec, rng) for img in images])


def rotate_batch(images: np.ndarray, rng: np.random.Generator):
    """Rotate every image by a uniformly drawn quarter turn; return images and turns."""
    turns = rng.integers(0, 4, size=images.shape[0])
    out = np.empty_like(images)
    for q in PRETEXT_QUARTER_TURNS:
        sel = turns == q
        if sel.any():
            out[sel] = rotate_right_angle(images[sel], q)
    return out, turns


def make_batches(n: int, batch_size: int, rng: np.random.Generator):
    """One epoch of shuffled index batches; the last short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


class CyclingBatches:
    """Endless stream of index batches, reshuffled each time it wraps."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._queue = []

    def next(self) -> np.ndarray:
        if not self._queue:
            self._queue = make_batches(self.n, self.batch_size, self.rng)
        return self._queue.pop(0)
