"""Identity keys, codes, and the hash primitives shared by every scheme.

Codes and keys are raw ``bytes`` of length ``code_bits // 8``; labels are
plain ints in ``[0, n_classes)``. Everything here is a pure function of its
inputs, so results are bit-identical across runs and platforms.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np


class DimensionMismatchError(ValueError):
    """An image does not match the configured (height, width)."""


@dataclass(frozen=True)
class SchemeParams:
    """Security and geometry parameters shared by all schemes.

    code_bits        length of keys and codes in bits (multiple of 8)
    n_triggers       number of triggers, must be a power of two
    n_classes        size of the label space
    image_dims       (height, width) of every trigger and dataset image
    two_class_labels reduce labels to two equivalence classes (label mod 2)
    """

    code_bits: int = 256
    n_triggers: int = 64
    n_classes: int = 10
    image_dims: tuple[int, int] = (16, 16)
    two_class_labels: bool = False

    def __post_init__(self) -> None:
        if self.code_bits < 64 or self.code_bits % 8 != 0:
            raise ValueError(f"code_bits must be >= 64 and a multiple of 8, got {self.code_bits}")
        if self.n_triggers < 1 or self.n_triggers & (self.n_triggers - 1):
            raise ValueError(f"n_triggers must be a power of two, got {self.n_triggers}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        h, w = self.image_dims
        if h < 8 or w < 8:
            raise ValueError(f"image_dims must be at least 8x8, got {self.image_dims}")

    @property
    def code_bytes(self) -> int:
        return self.code_bits // 8

    @property
    def merkle_depth(self) -> int:
        return self.n_triggers.bit_length() - 1

    @property
    def label_classes(self) -> int:
        """Effective label-space size (2 in two-equivalence-class mode)."""
        return 2 if self.two_class_labels else self.n_classes


@dataclass(frozen=True)
class IdentityKey:
    """An owner identity: ``code_bits`` pseudorandom bits plus the seed that made them."""

    bits: bytes
    seed: int

    @property
    def hex(self) -> str:
        return self.bits.hex()


def hash_r(data: bytes, code_bits: int) -> bytes:
    """One-way hash of ``data`` truncated to ``code_bits`` bits.

    SHA-256 truncated from the most-significant end; for widths beyond 256
    bits the digest is extended in counter mode.
    """
    n = code_bits // 8
    if n <= 32:
        return hashlib.sha256(data).digest()[:n]
    out = bytearray()
    ctr = 0
    while len(out) < n:
        out += hashlib.sha256(data + struct.pack("<I", ctr)).digest()
        ctr += 1
    return bytes(out[:n])


def keygen(seed: int, params: SchemeParams) -> IdentityKey:
    """Derive an identity key from a 64-bit seed by hashing it."""
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    bits = hash_r(b"identity-key" + struct.pack("<Q", seed), params.code_bits)
    return IdentityKey(bits=bits, seed=seed)


def encode_chain(key: IdentityKey, params: SchemeParams) -> list[bytes]:
    """Expand a key into its code chain: c1 = H(key), c_n = H(c_{n-1})."""
    codes: list[bytes] = []
    cur = hash_r(key.bits, params.code_bits)
    for _ in range(params.n_triggers):
        codes.append(cur)
        cur = hash_r(cur, params.code_bits)
    return codes


def serialize_image(img: np.ndarray) -> bytes:
    """Canonical image bytes: u32-LE height, u32-LE width, then row-major f32-LE pixels."""
    if img.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    return struct.pack("<II", h, w) + np.ascontiguousarray(img, dtype="<f4").tobytes()


def deserialize_image(blob: bytes) -> np.ndarray:
    """Inverse of :func:`serialize_image`."""
    if len(blob) < 8:
        raise ValueError("image blob shorter than its header")
    h, w = struct.unpack("<II", blob[:8])
    body = np.frombuffer(blob[8:], dtype="<f4")
    if body.size != h * w:
        raise ValueError(f"image blob has {body.size} pixels, header says {h}x{w}")
    return body.reshape(h, w).copy()


def image_digest(img: np.ndarray) -> bytes:
    """SHA-256 of the canonical serialization; the exact-match fingerprint of an image."""
    return hashlib.sha256(serialize_image(img)).digest()


def inverse_trigger_code(img: np.ndarray, params: SchemeParams) -> bytes:
    """Map a trigger image to its code by hashing the canonical serialization."""
    if img.shape != params.image_dims:
        raise DimensionMismatchError(
            f"trigger has shape {img.shape}, scheme expects {params.image_dims}"
        )
    return hash_r(serialize_image(img), params.code_bits)


def label_of(data: bytes, n_classes: int) -> int:
    """Pseudorandom label: SHA-256 of ``data`` as an unsigned integer, mod ``n_classes``."""
    if n_classes < 1:
        raise ValueError(f"n_classes must be >= 1, got {n_classes}")
    return int.from_bytes(hashlib.sha256(data).digest(), "big") % n_classes


def scheme_label(data: bytes, params: SchemeParams) -> int:
    """Label under the scheme's label space, applying the two-class reduction if set."""
    v = label_of(data, params.n_classes)
    return v % 2 if params.two_class_labels else v


def derive_seed(*parts: int | str | bytes) -> int:
    """Deterministic 63-bit sub-seed from a master seed and component names."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, int):
            h.update(b"i" + p.to_bytes(16, "little", signed=True))
        elif isinstance(p, str):
            h.update(b"s" + p.encode("utf-8"))
        else:
            h.update(b"b" + p)
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little") >> 1
