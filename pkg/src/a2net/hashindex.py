"""Bit-packed binary codes, exact Hamming scan and the ``A2HX`` index file.

Bit ``i`` of a k-bit code lives at bit ``i % 64`` of word ``i // 64``; a set
bit means the code component is +1. Padding bits past ``k`` are zero.

Index file (all little-endian)::

    "A2HX"  version u32  k u32  m u64
    m records of: id u64, ceil(k/64) words u64
    has_labels u8, then m u32 labels when has_labels == 1
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernels import hamming_matrix, hamming_scan

INDEX_MAGIC = b"A2HX"
INDEX_VERSION = 1


class HashIndexError(ValueError):
    """Malformed codes or index files."""


def n_words(k):
    return (k + 63) // 64


@dataclass(frozen=True)
class PackedCode:
    k: int
    words: np.ndarray  # (n_words(k),) uint64

    def __eq__(self, other):
        return isinstance(other, PackedCode) and self.k == other.k and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.k, self.words.tobytes()))


def pack_codes(U):
    """(m, k) matrix of +/-1 -> (m, ceil(k/64)) uint64 words."""
    U = np.asarray(U)
    if U.ndim != 2:
        raise HashIndexError(f"expected a (m, k) code matrix, got shape {U.shape}")
    if not np.all((U == 1) | (U == -1)):
        raise HashIndexError("code entries must be +1 or -1")
    m, k = U.shape
    w = n_words(k)
    bits = np.zeros((m, w * 64), dtype=np.uint8)
    bits[:, :k] = U > 0
    packed = np.packbits(bits, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64).reshape(m, w)


def unpack_codes(words, k):
    words = np.ascontiguousarray(np.asarray(words, dtype="<u8"))
    m = words.shape[0]
    bits = np.unpackbits(words.view(np.uint8).reshape(m, -1), axis=1, bitorder="little")[:, :k]
    return np.where(bits == 1, 1, -1).astype(np.int8)


def pack(u):
    u = np.asarray(u).reshape(1, -1)
    return PackedCode(u.shape[1], pack_codes(u)[0])


def unpack(code):
    return unpack_codes(code.words[None, :], code.k)[0]


def hamming(a, b):
    if a.k != b.k:
        raise HashIndexError(f"code lengths differ: {a.k} vs {b.k}")
    return int(np.bitwise_count(a.words ^ b.words).sum())


class HashIndex:
    """Immutable store of packed codes with parallel ids and optional labels."""

    def __init__(self, k, codes, ids=None, labels=None):
        codes = np.ascontiguousarray(np.asarray(codes, dtype=np.uint64).reshape(-1, n_words(k)))
        m = codes.shape[0]
        ids = np.arange(m, dtype=np.uint64) if ids is None else np.asarray(ids, dtype=np.uint64)
        if ids.shape != (m,):
            raise HashIndexError(f"{m} codes but {ids.shape[0]} ids")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.uint32)
            if labels.shape != (m,):
                raise HashIndexError(f"{m} codes but {labels.shape[0]} labels")
            labels.setflags(write=False)
        if k % 64 and m:
            pad_mask = ~np.uint64((1 << (k % 64)) - 1)
            if np.any(codes[:, -1] & pad_mask):
                raise HashIndexError("padding bits beyond k must be zero")
        codes.setflags(write=False)
        ids.setflags(write=False)
        self.k, self.codes, self.ids, self.labels = int(k), codes, ids, labels

    @classmethod
    def build(cls, U, ids=None, labels=None):
        U = np.asarray(U)
        return cls(U.shape[1], pack_codes(U), ids, labels)

    def __len__(self):
        return self.codes.shape[0]

    def __eq__(self, other):
        if not isinstance(other, HashIndex):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None and np.array_equal(self.labels, other.labels))
        return (self.k == other.k and np.array_equal(self.codes, other.codes)
                and np.array_equal(self.ids, other.ids) and same_labels)

    def code(self, row):
        return PackedCode(self.k, self.codes[row].copy())

    def distances(self, query):
        if query.k != self.k:
            raise HashIndexError(f"query has {query.k} bits, index has {self.k}")
        return hamming_scan(self.codes, query.words)

    def distance_matrix(self, queries_words):
        return hamming_matrix(queries_words, self.codes)

    def tobytes(self):
        m = len(self)
        head = INDEX_MAGIC + struct.pack("<IIQ", INDEX_VERSION, self.k, m)
        rec = np.empty((m, 1 + n_words(self.k)), dtype="<u8")
        rec[:, 0] = self.ids
        rec[:, 1:] = self.codes
        tail = b"\x00" if self.labels is None else b"\x01" + self.labels.astype("<u4").tobytes()
        return head + rec.tobytes() + tail

    @classmethod
    def frombytes(cls, raw):
        if len(raw) < 20:
            raise HashIndexError("truncated index header")
        if raw[:4] != INDEX_MAGIC:
            raise HashIndexError(f"bad index magic {raw[:4]!r}")
        version, k, m = struct.unpack_from("<IIQ", raw, 4)
        if version != INDEX_VERSION:
            raise HashIndexError(f"unsupported index version {version}")
        if k < 1:
            raise HashIndexError("index k must be positive")
        w = n_words(k)
        off = 20
        body = 8 * m * (1 + w)
        if len(raw) < off + body + 1:
            raise HashIndexError(f"truncated index: {len(raw)} bytes for m={m}, k={k}")
        rec = np.frombuffer(raw, dtype="<u8", count=m * (1 + w), offset=off).reshape(m, 1 + w)
        off += body
        flag = raw[off]
        off += 1
        labels = None
        if flag == 1:
            if len(raw) != off + 4 * m:
                raise HashIndexError("label block size mismatch")
            labels = np.frombuffer(raw, dtype="<u4", count=m, offset=off).astype(np.uint32)
        elif flag != 0 or len(raw) != off:
            raise HashIndexError("malformed label block")
        return cls(k, rec[:, 1:].astype(np.uint64), rec[:, 0].astype(np.uint64), labels)

    def save(self, path):
        Path(path).write_bytes(self.tobytes())

    @classmethod
    def load(cls, path):
        return cls.frombytes(Path(path).read_bytes())


def stable_order(dist, ids):
    """Row order by (distance, id) ascending."""
    return np.lexsort((ids, dist))


def search_topk(query, index, K):
    """Exact top-K by Hamming distance, ties broken by ascending item id."""
    if K < 1:
        raise HashIndexError("K must be at least 1")
    dist = index.distances(query)
    m = len(dist)
    if K < m:
        # every row at or below the K-th smallest distance, then exact order
        cut = np.partition(dist, K - 1)[K - 1]
        cand = np.flatnonzero(dist <= cut)
        rows = cand[stable_order(dist[cand], index.ids[cand])][:K]
    else:
        rows = stable_order(dist, index.ids)
    return [(int(index.ids[r]), int(dist[r])) for r in rows]


def save(index, path):
    index.save(path)


def load(path):
    return HashIndex.load(path)
