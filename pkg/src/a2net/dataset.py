"""Dataset files, synthetic generators and the simple/complex concat builder.

On disk a dataset is a directory::

    manifest.json     count, image shape, class table, split tags, metadata
    images.a2ds       "A2DS", version u32, count u32, C u32, H u32, W u32,
                      then count*C*H*W float32 little-endian values in [0, 1]
    labels.u32        count little-endian u32 class ids
    attributes.bin    optional: count u32, then per item (len u32, ids u32...)
"""

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = b"A2DS"
FORMAT_VERSION = 1
SPLITS = ("train", "database", "query")
_HEADER = struct.Struct("<4sIIIII")


class DatasetError(ValueError):
    pass


@dataclass
class DatasetManifest:
    images: np.ndarray  # (count, C, H, W) float32, possibly a read-only memmap
    labels: np.ndarray  # (count,) uint32
    classes: list
    splits: list
    attributes: list = None  # per item sorted tuple of attribute ids
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def count(self):
        return int(self.images.shape[0])

    @property
    def image_shape(self):
        return tuple(int(s) for s in self.images.shape[1:])

    @property
    def num_classes(self):
        return len(self.classes)

    def validate(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (count, C, H, W), got shape {self.images.shape}")
        if any(s < 1 for s in self.images.shape[1:]):
            raise DatasetError(f"degenerate image shape {self.images.shape[1:]}")
        n = self.count
        if len(self.labels) != n or len(self.splits) != n:
            raise DatasetError(f"count mismatch: {n} images, {len(self.labels)} labels, {len(self.splits)} split tags")
        if self.attributes is not None and len(self.attributes) != n:
            raise DatasetError(f"count mismatch: {n} images, {len(self.attributes)} attribute sets")
        if n and int(np.max(self.labels)) >= len(self.classes):
            raise DatasetError(f"label id {int(np.max(self.labels))} >= class count {len(self.classes)}")
        bad = set(self.splits) - set(SPLITS)
        if bad:
            raise DatasetError(f"unknown split tags {sorted(bad)}")

    def image(self, i):
        return np.asarray(self.images[i], dtype=np.float64)

    def batch(self, ids):
        return np.asarray(self.images[np.asarray(ids, dtype=np.int64)], dtype=np.float64)

    def indices(self, *splits):
        want = set(splits)
        return np.array([i for i, s in enumerate(self.splits) if s in want], dtype=np.int64)

    def subset(self, ids, splits=None):
        ids = np.asarray(ids, dtype=np.int64)
        return DatasetManifest(
            images=np.ascontiguousarray(self.images[ids]),
            labels=self.labels[ids].copy(),
            classes=list(self.classes),
            splits=list(splits) if splits is not None else [self.splits[i] for i in ids],
            attributes=None if self.attributes is None else [self.attributes[i] for i in ids],
            meta=dict(self.meta),
        )


def save_manifest(ds, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    c, h, w = ds.image_shape
    with open(path / "images.a2ds", "wb") as f:
        f.write(_HEADER.pack(IMAGE_MAGIC, FORMAT_VERSION, ds.count, c, h, w))
        f.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    (path / "labels.u32").write_bytes(np.asarray(ds.labels, dtype="<u4").tobytes())
    attr_path = path / "attributes.bin"
    if ds.attributes is not None:
        parts = [struct.pack("<I", ds.count)]
        for ids in ds.attributes:
            parts.append(struct.pack("<I", len(ids)))
            parts.append(np.asarray(ids, dtype="<u4").tobytes())
        attr_path.write_bytes(b"".join(parts))
    elif attr_path.exists():
        attr_path.unlink()
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": ds.count,
        "image_shape": [c, h, w],
        "classes": list(ds.classes),
        "splits": list(ds.splits),
        "has_attributes": ds.attributes is not None,
        "meta": ds.meta,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def _read_images(path, lazy):
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, count, c, h, w = _HEADER.unpack(head)
    if magic != IMAGE_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}, expected {IMAGE_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * count * c * h * w
    actual = path.stat().st_size
    if actual != expected:
        raise DatasetError(f"{path}: size {actual} bytes, expected {expected} for {count}x{c}x{h}x{w}")
    if count == 0:
        return np.zeros((0, c, h, w), dtype=np.float32)
    if lazy:
        return np.memmap(path, dtype="<f4", mode="r", offset=_HEADER.size, shape=(count, c, h, w))
    with open(path, "rb") as f:
        f.seek(_HEADER.size)
        return np.frombuffer(f.read(), dtype="<f4").reshape(count, c, h, w).astype(np.float32)


def _read_attributes(path, count):
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated")
    (n,) = struct.unpack_from("<I", raw, 0)
    if n != count:
        raise DatasetError(f"{path}: {n} attribute sets for {count} items")
    out, off = [], 4
    for _ in range(n):
        if off + 4 > len(raw):
            raise DatasetError(f"{path}: truncated")
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + 4 * ln > len(raw):
            raise DatasetError(f"{path}: truncated")
        out.append(tuple(int(v) for v in np.frombuffer(raw, dtype="<u4", count=ln, offset=off)))
        off += 4 * ln
    if off != len(raw):
        raise DatasetError(f"{path}: {len(raw) - off} trailing bytes")
    return out


def load_manifest(path, lazy=True):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"{path}: no manifest.json") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported manifest version {manifest.get('format_version')}")
    images = _read_images(path / "images.a2ds", lazy)
    count = manifest["count"]
    if images.shape[0] != count or list(images.shape[1:]) != manifest["image_shape"]:
        raise DatasetError(f"{path}: image blob {images.shape} disagrees with manifest")
    labels = np.frombuffer((path / "labels.u32").read_bytes(), dtype="<u4").astype(np.uint32)
    if labels.shape[0] != count:
        raise DatasetError(f"{path}: {labels.shape[0]} labels for {count} items")
    attributes = _read_attributes(path / "attributes.bin", count) if manifest["has_attributes"] else None
    return DatasetManifest(images, labels, manifest["classes"], manifest["splits"], attributes, manifest["meta"])


# ----------------------------------------------------------------- generators


def _class_tints(classes, rng):
    # spread hues around the color wheel so mean colors stay separable
    hues = (np.arange(classes) + rng.uniform(0, 0.3)) / classes
    k = (np.arange(3)[None, :] / 3.0 + hues[:, None]) * 2 * np.pi
    return 0.5 * np.cos(k)


def _pattern_bank(n_patterns, channels, rng):
    kinds = rng.integers(0, 3, size=n_patterns)
    colors = rng.uniform(-1.0, 1.0, size=(n_patterns, channels))
    colors /= np.abs(colors).max(axis=1, keepdims=True)
    return kinds, colors


def _stamp(kind, size):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:
        return np.ones((size, size))
    if kind == 1:
        mid = size // 2
        return ((yy == mid) | (xx == mid) | (yy == mid - 1) | (xx == mid - 1)).astype(float)
    return ((yy + xx) % 2 == 0).astype(float)


def make_synthetic(classes=8, per_class=50, shape=(3, 16, 16), difficulty=0.5, seed=0,
                   query_per_class=0, attrs_per_class=3, jitter=1, drop_prob=0.25):
    """Class-conditional images: noisy background, class tint, localized patterns.

    ``difficulty`` in [0, 1] fades the class tint and pattern contrast and
    raises background noise; at 0 the per-class tint alone separates classes
    by mean color. Each class owns ``attrs_per_class`` patterns from a
    shared bank; the first is always drawn, the rest drop out with
    ``drop_prob``. The attribute ids of an item are the patterns it shows.
    """
    c, h, w = (int(s) for s in shape)
    if classes < 2:
        raise DatasetError("need at least 2 classes")
    if c < 1 or h < 4 or w < 4:
        raise DatasetError(f"degenerate shape {shape}")
    if not 0.0 <= difficulty <= 1.0:
        raise DatasetError("difficulty must be in [0, 1]")
    rng = np.random.default_rng(seed)
    cell = max(2, min(h, w) // 4)
    grid = [(r, q) for r in range(0, h - cell + 1, cell) for q in range(0, w - cell + 1, cell)]
    n_patterns = max(attrs_per_class * 2, classes + attrs_per_class)
    kinds, colors = _pattern_bank(n_patterns, c, rng)
    places = [grid[i] for i in rng.integers(0, len(grid), size=n_patterns)]
    owned = [rng.choice(n_patterns, size=attrs_per_class, replace=False) for _ in range(classes)]
    for ci in range(classes):  # distinct core pattern per class
        owned[ci][0] = ci % n_patterns
    tints = _class_tints(classes, rng)[:, :c]

    tint_amp = 0.3 * (1.0 - difficulty)
    contrast = 0.45 * (1.0 - 0.7 * difficulty)
    noise = 0.05 + 0.25 * difficulty

    n = classes * per_class
    images = np.empty((n, c, h, w), dtype=np.float32)
    labels = np.repeat(np.arange(classes, dtype=np.uint32), per_class)
    attributes, splits = [], []
    for idx in range(n):
        cls = int(labels[idx])
        img = 0.5 + noise * rng.standard_normal((c, h, w))
        ramp = rng.uniform(-0.1, 0.1) * np.linspace(-1, 1, w)[None, None, :]
        img += ramp + tint_amp * tints[cls][:, None, None]
        present = [int(owned[cls][0])]
        present += [int(p) for p in owned[cls][1:] if rng.random() >= drop_prob]
        for p in present:
            r0, q0 = places[p]
            dr, dq = rng.integers(-jitter, jitter + 1, size=2) if jitter else (0, 0)
            r0 = int(np.clip(r0 + dr, 0, h - cell))
            q0 = int(np.clip(q0 + dq, 0, w - cell))
            img[:, r0:r0 + cell, q0:q0 + cell] += contrast * colors[p][:, None, None] * _stamp(kinds[p], cell)[None]
        images[idx] = np.clip(img, 0.0, 1.0)
        attributes.append(tuple(sorted(set(present))))
        splits.append("query" if idx % per_class < query_per_class else "database")
    return DatasetManifest(
        images, labels, [f"class_{i}" for i in range(classes)], splits, attributes,
        meta={"kind": "synthetic", "difficulty": float(difficulty), "seed": int(seed)},
    )


def make_simple_shapes(classes=10, per_class=50, shape=(1, 16, 16), seed=0, query_per_class=0, noise=0.05):
    """Digit-like stand-in: one bright class-specific glyph on a dark field."""
    c, h, w = (int(s) for s in shape)
    if classes < 2:
        raise DatasetError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    glyphs = (rng.random((classes, 4, 4)) < 0.5).astype(float)
    for g in glyphs:
        g[rng.integers(0, 4), rng.integers(0, 4)] = 1.0
    sy, sx = max(1, (h - 2) // 4), max(1, (w - 2) // 4)
    n = classes * per_class
    images = np.empty((n, c, h, w), dtype=np.float32)
    labels = np.repeat(np.arange(classes, dtype=np.uint32), per_class)
    splits = []
    for idx in range(n):
        big = np.kron(glyphs[labels[idx]], np.ones((sy, sx)))
        img = noise * rng.random((h, w))
        oy = rng.integers(0, h - big.shape[0] + 1)
        ox = rng.integers(0, w - big.shape[1] + 1)
        img[oy:oy + big.shape[0], ox:ox + big.shape[1]] += 0.9 * big
        images[idx] = np.clip(img, 0, 1)[None]
        splits.append("query" if idx % per_class < query_per_class else "database")
    return DatasetManifest(images, labels, [f"glyph_{i}" for i in range(classes)], splits,
                           meta={"kind": "simple_shapes", "seed": int(seed)})


@dataclass
class ConcatSpec:
    simple: DatasetManifest
    complex: DatasetManifest


def _resize_nearest(images, out_h, out_w):
    _, _, h, w = images.shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return images[:, :, rows][:, :, :, cols]


def make_concat_dataset(spec, seed=0):
    """Stack a simple-part image above a complex-part image of the same class.

    Every complex item is kept, in order, with its split tag; its partner
    is drawn uniformly from the simple items of the same class. The simple
    part is resized to the complex width (height scaled to keep aspect) and
    replicated across channels if it is single-channel.
    """
    simple, cplx = spec.simple, spec.complex
    if simple.num_classes != cplx.num_classes:
        raise DatasetError(f"class count mismatch: simple {simple.num_classes} vs complex {cplx.num_classes}")
    cs, hs, ws = simple.image_shape
    cc, hc, wc = cplx.image_shape
    if cs not in (1, cc):
        raise DatasetError(f"cannot match {cs} simple channels to {cc} complex channels")
    out_hs = max(1, round(hs * wc / ws))
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(simple.labels == k) for k in range(simple.num_classes)]
    if any(len(b) == 0 for b in by_class):
        raise DatasetError("simple source lacks items for some class")
    partners = np.array([rng.choice(by_class[int(lbl)]) for lbl in cplx.labels], dtype=np.int64)
    top = np.asarray(simple.images[partners], dtype=np.float32) if len(partners) else np.zeros((0, cs, hs, ws), np.float32)
    top = _resize_nearest(top, out_hs, wc)
    if cs == 1 and cc > 1:
        top = np.repeat(top, cc, axis=1)
    images = np.concatenate([top, np.asarray(cplx.images, dtype=np.float32)], axis=2)
    names = [f"{a}+{b}" for a, b in zip(simple.classes, cplx.classes)]
    meta = {"kind": "concat", "simple_height": int(out_hs), "complex_height": int(hc), "seed": int(seed),
            "masked": "none"}
    return DatasetManifest(np.ascontiguousarray(images), cplx.labels.copy(), names, list(cplx.splits),
                           None if cplx.attributes is None else list(cplx.attributes), meta)


def mask_part(ds, part):
    """Zero the pixels of ``part`` ('simple' or 'complex'); shape is unchanged.

    ``mask_part(ds, "simple")`` is the complex-only test view.
    """
    if ds.meta.get("kind") != "concat":
        raise DatasetError("mask_part needs a dataset built by make_concat_dataset")
    if part not in ("simple", "complex"):
        raise DatasetError(f"part must be 'simple' or 'complex', got {part!r}")
    hs = ds.meta["simple_height"]
    images = np.array(ds.images, dtype=np.float32, copy=True)
    if part == "simple":
        images[:, :, :hs, :] = 0.0
    else:
        images[:, :, hs:, :] = 0.0
    masked = sorted(set(ds.meta.get("masked", "none").split("+")) - {"none"} | {part})
    meta = dict(ds.meta, masked="+".join(masked))
    return DatasetManifest(images, ds.labels.copy(), list(ds.classes), list(ds.splits),
                           None if ds.attributes is None else list(ds.attributes), meta)


def from_arrays(images, labels, classes=None, splits=None, attributes=None, meta=None):
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[:, None]
    labels = np.asarray(labels, dtype=np.uint32)
    if classes is None:
        classes = [str(i) for i in range(int(labels.max()) + 1 if len(labels) else 0)]
    if splits is None:
        splits = ["database"] * len(labels)
    return DatasetManifest(images, labels, list(classes), list(splits), attributes, meta or {})


# ------------------------------------------------------- real-data ingestion


def read_idx(path):
    """Read an IDX file (the MNIST container) into an ndarray."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DatasetError(f"{path}: not an IDX file")
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    if raw[2] not in dtypes:
        raise DatasetError(f"{path}: unknown IDX type 0x{raw[2]:02x}")
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=dtypes[raw[2]], offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise DatasetError(f"{path}: payload size {data.size} != {dims}")
    return data.reshape(dims)


def read_cifar_batch(path):
    """Read a CIFAR-10 binary batch: rows of (label u8, 3072 pixel bytes)."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size % 3073:
        raise DatasetError(f"{path}: size is not a multiple of 3073")
    rows = raw.reshape(-1, 3073)
    return rows[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0, rows[:, 0].astype(np.uint32)


# ------------------------------------------------------------------ heatmaps


def write_pgm(path, heat):
    heat = np.asarray(heat, dtype=np.float64)
    pix = np.clip(np.rint(heat * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pix.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    # header is four whitespace-separated tokens, then exactly one whitespace byte;
    # splitting the whole file would also eat pixel bytes that look like whitespace
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise DatasetError(f"{path}: not a binary PGM")
    w, h = int(m[1]), int(m[2])
    pix = raw[m.end(): m.end() + w * h]
    if len(pix) != w * h:
        raise DatasetError(f"{path}: truncated PGM")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w)


def activation_heatmap(model, image, out_path=None):
    """Channel-summed |backbone activation|, upsampled and min-max scaled to [0, 1].

    Writes ``<out_path>.pgm`` and ``<out_path>.csv`` when ``out_path`` is given.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != tuple(model.config.image_shape):
        raise DatasetError(f"image shape {image.shape} != model input {tuple(model.config.image_shape)}")
    t = model.backbone_forward(image[None]).data[0]
    act = np.abs(t).sum(axis=0)
    h, w = image.shape[1:]
    up = act[(np.arange(h) * act.shape[0]) // h][:, (np.arange(w) * act.shape[1]) // w]
    lo, hi = up.min(), up.max()
    heat = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(out_path.with_suffix(".pgm"), heat)
        np.savetxt(out_path.with_suffix(".csv"), heat, delimiter=",", fmt="%.6f")
    return heat


def region_energy(heat, rows):
    """Mean heatmap value over a row slice, e.g. the complex half of a concat image."""
    return float(np.mean(np.asarray(heat)[rows]))
