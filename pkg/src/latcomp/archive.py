"""Directory store of latent representations with CRC-checked files.

File layout (little-endian)::

    b"LATC" | u16 version | u32 header length | header JSON | payload | u32 CRC-32

The header records a CRC-32 of the payload; the trailing CRC covers every
byte before it, so any single-byte corruption is caught on read.
"""
from __future__ import annotations

import json
import os
import re
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .codec import LatentRepr
from .errors import ChecksumError, DataError, StructuralError

MAGIC = b"LATC"
VERSION = 1
MODES = ("mu_only", "mu_sigma")
DTYPES = ("float32", "float16")
MANIFEST = "manifest.json"

# 8.61 TB -> 204 GB, decimal units
REFERENCE_SOURCE_BYTES = 8.61e12
REFERENCE_ARCHIVE_BYTES = 204e9
REFERENCE_RATIO = REFERENCE_SOURCE_BYTES / REFERENCE_ARCHIVE_BYTES


class ModeError(DataError):
    """Archive content mode differs from the one requested."""


@dataclass(frozen=True)
class ArchiveHeader:
    key: str
    variable: str
    timestamp: str
    source_dims: tuple
    latent_dims: tuple
    dtype: str
    mode: str
    norm_stats_hash: str
    codec_fingerprint: str
    payload_crc: int
    version: int = VERSION
    magic: str = MAGIC.decode()

    def __post_init__(self):
        object.__setattr__(self, "source_dims", tuple(int(d) for d in self.source_dims))
        object.__setattr__(self, "latent_dims", tuple(int(d) for d in self.latent_dims))
        if self.dtype not in DTYPES:
            raise StructuralError(f"unsupported latent dtype {self.dtype!r}")
        if self.mode not in MODES:
            raise StructuralError(f"unknown archive mode {self.mode!r}")
        (H, W), (_, h, w) = self.source_dims, self.latent_dims
        if h * 8 != H or w * 8 != W:
            raise StructuralError(f"latent dims {self.latent_dims} inconsistent with source {self.source_dims}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["source_dims"] = list(self.source_dims)
        d["latent_dims"] = list(self.latent_dims)
        return d

    @property
    def payload_bytes(self) -> int:
        n = int(np.prod(self.latent_dims)) * np.dtype(self.dtype).itemsize
        return n * (2 if self.mode == "mu_sigma" else 1)


def _safe_name(key: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", key) + ".latc"


def _pack(header: ArchiveHeader, payload: bytes) -> bytes:
    hjson = json.dumps(header.to_json(), sort_keys=True).encode()
    body = MAGIC + struct.pack("<HI", header.version, len(hjson)) + hjson + payload
    return body + struct.pack("<I", zlib.crc32(body))


def _unpack(blob: bytes, where="archive"):
    if len(blob) < 14 or blob[:4] != MAGIC:
        raise ChecksumError(f"{where}: bad magic bytes")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{where}: file checksum mismatch (corrupted)")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != VERSION:
        raise StructuralError(f"{where}: unsupported version {version}")
    try:
        header = ArchiveHeader(**json.loads(blob[10:10 + hlen]))
    except (ValueError, TypeError) as exc:
        raise ChecksumError(f"{where}: unreadable header ({exc})") from None
    payload = blob[10 + hlen:-4]
    if zlib.crc32(payload) != header.payload_crc or len(payload) != header.payload_bytes:
        raise ChecksumError(f"{where}: payload checksum mismatch (corrupted)")
    return header, payload


class LatentStore:
    """One ``.latc`` file per key plus a JSON manifest, updated by write-rename."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @property
    def manifest_path(self):
        return self.root / MANIFEST

    def manifest(self) -> list:
        if not self.manifest_path.exists():
            return []
        return json.loads(self.manifest_path.read_text())

    def keys(self) -> list:
        return [h["key"] for h in self.manifest()]

    def __contains__(self, key):
        return (self.root / _safe_name(key)).exists()

    def path(self, key) -> Path:
        return self.root / _safe_name(key)

    def _write_manifest(self, entries):
        tmp = self.manifest_path.with_name(MANIFEST + ".tmp")
        tmp.write_text(json.dumps(entries, indent=1, sort_keys=True))
        os.replace(tmp, self.manifest_path)


def write_latent(store: LatentStore, key: str, latent: LatentRepr, mode: str = "mu_only",
                 dtype: str = "float16", *, variable="", timestamp="", norm_stats_hash="",
                 codec_fingerprint="") -> ArchiveHeader:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {DTYPES}")
    target = store.path(key)
    if key in store.keys() or target.exists():
        raise DataError(f"key {key!r} already present in {store.root}")
    mu = np.asarray(latent.mu, dtype=np.float64)
    arrays = [mu] if mode == "mu_only" else [mu, np.asarray(latent.log_var, dtype=np.float64)]
    for a in arrays:
        if not np.isfinite(a).all():
            raise DataError("latent contains non-finite values")
        if dtype == "float16" and np.abs(a).max() > np.finfo(np.float16).max:
            raise DataError("latent exceeds float16 range")
    # numpy's float16 cast rounds to nearest, ties to even
    payload = b"".join(a.astype("<" + np.dtype(dtype).str[1:]).tobytes() for a in arrays)
    c, h, w = mu.shape
    header = ArchiveHeader(key=key, variable=variable, timestamp=str(timestamp),
                           source_dims=(h * 8, w * 8), latent_dims=(c, h, w), dtype=dtype, mode=mode,
                           norm_stats_hash=norm_stats_hash, codec_fingerprint=codec_fingerprint,
                           payload_crc=zlib.crc32(payload))
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_bytes(_pack(header, payload))
    os.replace(tmp, target)
    store._write_manifest(store.manifest() + [header.to_json()])
    return header


def read_latent(store: LatentStore, key: str, expect_mode: str | None = None):
    """Return ``(LatentRepr | mu, header)`` after verifying both checksums.

    ``mu_only`` archives return the mu array; ``mu_sigma`` return a LatentRepr.
    """
    path = store.path(key)
    if not path.exists():
        raise DataError(f"key {key!r} not found in {store.root}")
    header, payload = _unpack(path.read_bytes(), str(path))
    if expect_mode is not None and expect_mode != header.mode:
        raise ModeError(f"{key!r} was stored as {header.mode!r}, requested {expect_mode!r}")
    n = int(np.prod(header.latent_dims))
    flat = np.frombuffer(payload, dtype="<" + np.dtype(header.dtype).str[1:])
    mu = flat[:n].reshape(header.latent_dims).astype(np.float32)
    if header.mode == "mu_only":
        return mu, header
    lv = flat[n:].reshape(header.latent_dims).astype(np.float32)
    return LatentRepr(mu, lv), header


@dataclass(frozen=True)
class RatioReport:
    source_bytes: int
    archived_bytes: int
    ratio: float
    assumptions: str

    def to_json(self):
        return asdict(self)


@dataclass(frozen=True)
class SourceMeta:
    """Raw size of the fields behind ``count`` latents, ``channels`` each."""

    dims: tuple
    channels: int = 1
    dtype: str = "float32"
    count: int = 1

    @property
    def nbytes(self) -> int:
        H, W = self.dims
        return H * W * self.channels * np.dtype(self.dtype).itemsize * self.count


@dataclass(frozen=True)
class ArchiveMeta:
    latent_dims: tuple
    dtype: str = "float16"
    mode: str = "mu_only"
    count: int = 1
    overhead_bytes: int = 0

    @classmethod
    def from_header(cls, header: ArchiveHeader, count=1, overhead_bytes=0):
        return cls(header.latent_dims, header.dtype, header.mode, count, overhead_bytes)

    @property
    def nbytes(self) -> int:
        c, h, w = self.latent_dims
        per = c * h * w * np.dtype(self.dtype).itemsize * (2 if self.mode == "mu_sigma" else 1)
        return (per + self.overhead_bytes) * self.count


def compression_ratio(source: SourceMeta, archive: ArchiveMeta) -> RatioReport:
    """Byte-count ratio of raw source arrays to stored latents."""
    c, h, w = archive.latent_dims
    H, W = source.dims
    if h * 8 != H or w * 8 != W:
        raise StructuralError(f"latent dims {archive.latent_dims} inconsistent with source {source.dims}")
    if source.count != archive.count:
        raise StructuralError(f"{source.count} source fields vs {archive.count} archived latents")
    note = (f"source {source.dtype} {source.channels}x{H}x{W} per field; archive "
            f"{archive.mode} {archive.dtype} {c}x{h}x{w} per field; "
            f"container overhead {archive.overhead_bytes} B/entry; "
            f"reference end-to-end figure {REFERENCE_RATIO:.1f}x depends on unstated "
            f"source-container overheads")
    src, arc = source.nbytes, archive.nbytes
    return RatioReport(src, arc, src / arc, note)
