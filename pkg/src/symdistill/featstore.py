"""SYMF feature files: precomputed teacher tokens per sample and augmented view.

Layout (little-endian)::

    "SYMF" | u32 version | u32 N | u32 V | u32 grid_h | u32 grid_w | u32 d_t
    | u8 dtype | u8 has_labels | u16 reserved
    | [u32 n_classes | u32 label * N]
    | f32 payload [N][V][P][d_t], P = 1 + grid_h * grid_w

Token 0 of every view is the global (pooled) token; the rest are patch tokens.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MAGIC = b"SYMF"
VERSION = 1
DTYPE_F32 = 0

_HEADER = struct.Struct("<4sIIIIIIBBH")


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureSet:
    tokens: np.ndarray  # float32 [N, V, P, d_t]
    grid_h: int
    grid_w: int
    labels: Optional[np.ndarray] = None  # int64 [N]
    n_classes: Optional[int] = None
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.float32)
        if self.tokens.ndim != 4:
            raise ValueError(f"tokens must be rank 4 [N,V,P,d_t], got shape {self.tokens.shape}")
        if self.tokens.shape[2] != 1 + self.grid_h * self.grid_w:
            raise ValueError(
                f"token count {self.tokens.shape[2]} != 1 + {self.grid_h}*{self.grid_w}"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n_samples,):
                raise ValueError("labels must have one entry per sample")
            if self.n_classes is None:
                self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 0
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise ValueError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n_samples(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_views(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[2]

    @property
    def d_t(self) -> int:
        return self.tokens.shape[3]

    def view(self, i: int, v: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(global_token [d_t], patch_tokens [P-1, d_t])`` for sample ``i``, view ``v``.

        Both are views into the stored tensor, not copies.
        """
        if not 0 <= i < self.n_samples:
            raise IndexError(f"sample index {i} out of range [0, {self.n_samples})")
        if not 0 <= v < self.n_views:
            raise IndexError(f"view index {v} out of range [0, {self.n_views})")
        row = self.tokens[i, v]
        return row[0], row[1:]

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx)
        return FeatureSet(
            tokens=self.tokens[idx],
            grid_h=self.grid_h,
            grid_w=self.grid_w,
            labels=None if self.labels is None else self.labels[idx],
            n_classes=self.n_classes,
            class_names=list(self.class_names),
        )


def view(fs: FeatureSet, i: int, v: int) -> tuple[np.ndarray, np.ndarray]:
    return fs.view(i, v)


def write_features(fs: FeatureSet, path) -> None:
    if fs.n_samples == 0:
        raise FeatureFormatError("empty set")
    if not np.isfinite(fs.tokens).all():
        raise FeatureFormatError("refusing to write non-finite feature values")
    has_labels = fs.labels is not None
    header = _HEADER.pack(
        MAGIC, VERSION, fs.n_samples, fs.n_views, fs.grid_h, fs.grid_w, fs.d_t,
        DTYPE_F32, int(has_labels), 0,
    )
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        if has_labels:
            f.write(struct.pack("<I", fs.n_classes))
            f.write(fs.labels.astype("<u4").tobytes())
        f.write(fs.tokens.astype("<f4", copy=False).tobytes(order="C"))
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f)


def _read_header(f) -> dict:
    raw = f.read(_HEADER.size)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FeatureFormatError("bad magic")
    if len(raw) < _HEADER.size:
        raise FeatureFormatError("truncated header")
    _, version, n, v, gh, gw, d_t, dtype, has_labels, _reserved = _HEADER.unpack(raw)
    if version != VERSION:
        raise FeatureFormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FeatureFormatError(f"unsupported dtype code {dtype}")
    return dict(n=n, v=v, grid_h=gh, grid_w=gw, d_t=d_t, has_labels=bool(has_labels))


def read_features(path) -> FeatureSet:
    with open(path, "rb") as f:
        h = _read_header(f)
        n = h["n"]
        if n == 0:
            raise FeatureFormatError("empty set")
        labels = n_classes = None
        if h["has_labels"]:
            raw = f.read(4 + 4 * n)
            if len(raw) < 4 + 4 * n:
                raise FeatureFormatError("truncated label block")
            (n_classes,) = struct.unpack_from("<I", raw)
            labels = np.frombuffer(raw, dtype="<u4", offset=4).astype(np.int64)
            if labels.size and labels.max() >= n_classes:
                raise FeatureFormatError("label out of range")
        p = 1 + h["grid_h"] * h["grid_w"]
        count = n * h["v"] * p * h["d_t"]
        payload = f.read(4 * count)
        if len(payload) < 4 * count:
            raise FeatureFormatError(f"truncated payload: expected {4 * count} bytes, got {len(payload)}")
        if f.read(1):
            raise FeatureFormatError("trailing bytes after payload")
    tokens = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(n, h["v"], p, h["d_t"])
    if not np.isfinite(tokens).all():
        raise FeatureFormatError("non-finite value (NaN/Inf) in payload")
    return FeatureSet(tokens=tokens, grid_h=h["grid_h"], grid_w=h["grid_w"], labels=labels, n_classes=n_classes)
