"""Trigger generators for the four baseline schemes and the reverse scheme.

Baselines map a code to an image (noise field, outranged patch, corner stamp,
parity embedding); the reverse scheme instead selects ordinary dataset samples
so triggers are distributionally indistinguishable from normal queries. Every
generator is a pure function of (code, base, params).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .scheme import SchemeParams, IdentityKey, encode_chain, scheme_label, derive_seed
from .scheme import serialize_image, deserialize_image

BASELINE_SCHEMES = ("noise", "wonder", "stamp", "stego")
ALL_SCHEMES = BASELINE_SCHEMES + ("reverse",)

_PATCH = 8  # side of the wonder/stamp block


@dataclass
class TriggerSet:
    """Ordered triggers with (optionally) their assigned labels.

    Order is significant: in the reverse scheme it defines the label chain and
    the Merkle leaf order.
    """

    triggers: list[np.ndarray]
    labels: list[int] | None
    scheme_id: str

    def __len__(self) -> int:
        return len(self.triggers)

    def pairs(self) -> list[tuple[np.ndarray, int]]:
        if self.labels is None:
            raise ValueError("trigger set has no labels assigned")
        return list(zip(self.triggers, self.labels))


def _code_bit(code: bytes, i: int) -> int:
    i %= len(code) * 8
    return (code[i // 8] >> (7 - i % 8)) & 1


def _code_bits(code: bytes, start: int, count: int) -> np.ndarray:
    return np.array([_code_bit(code, start + k) for k in range(count)], dtype=np.int64)


def noise_trigger(code: bytes, params: SchemeParams) -> np.ndarray:
    """Gaussian noise field (mean 0.5, sigma 0.25) seeded by the code, clamped to [0, 1]."""
    rng = np.random.default_rng(int.from_bytes(code, "big"))
    img = rng.normal(0.5, 0.25, size=params.image_dims)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def wonder_trigger(code: bytes, base: np.ndarray) -> np.ndarray:
    """Copy of the base with an 8x8 patch of outranged pixels at a code-derived offset.

    Offset rows/cols come from the first two code bytes; patch pixels take -1.0
    or 2.0 according to the code bits that follow.
    """
    h, w = base.shape
    if h < _PATCH or w < _PATCH:
        raise ValueError(f"base {base.shape} too small for an {_PATCH}x{_PATCH} patch")
    row = code[0] % (h - _PATCH + 1)
    col = code[1] % (w - _PATCH + 1)
    bits = _code_bits(code, 16, _PATCH * _PATCH).reshape(_PATCH, _PATCH)
    out = base.astype(np.float32).copy()
    out[row:row + _PATCH, col:col + _PATCH] = np.where(bits == 1, 2.0, -1.0)
    return out


def stamp_trigger(code: bytes, base: np.ndarray) -> np.ndarray:
    """Copy of the base with the first 64 code bits stamped as a binary corner block."""
    h, w = base.shape
    if h < _PATCH or w < _PATCH:
        raise ValueError(f"base {base.shape} too small for an {_PATCH}x{_PATCH} stamp")
    bits = _code_bits(code, 0, _PATCH * _PATCH).reshape(_PATCH, _PATCH)
    out = np.clip(base, 0.0, 1.0).astype(np.float32)
    out[:_PATCH, :_PATCH] = bits.astype(np.float32)
    return out


def stego_trigger(code: bytes, base: np.ndarray) -> np.ndarray:
    """Embed the code into pixel parities on the 1/256 quantization grid.

    The first R pixels (row-major) move to the nearest grid level whose index
    parity equals the corresponding code bit, so no pixel changes by more
    than 1/256.
    """
    r = len(code) * 8
    h, w = base.shape
    if h * w < r:
        raise ValueError(f"base has {h * w} pixels, code needs {r}")
    flat = np.asarray(base, dtype=np.float64).ravel().copy()
    bits = _code_bits(code, 0, r).astype(np.float64)
    t = flat[:r] * 256.0
    k = np.round((t - bits) / 2.0) * 2.0 + bits
    k = np.clip(k, bits, 256.0 - bits)
    flat[:r] = k / 256.0
    return flat.reshape(h, w).astype(np.float32)


def reverse_select(dataset, n: int, seed: int) -> TriggerSet:
    """Draw n distinct dataset samples in seeded random order; labels come later."""
    if n < 1 or n & (n - 1):
        raise ValueError(f"trigger count must be a power of two, got {n}")
    if n > len(dataset.images):
        raise ValueError(f"cannot select {n} triggers from {len(dataset.images)} samples")
    rng = np.random.default_rng(derive_seed(seed, "reverse-select"))
    idx = rng.choice(len(dataset.images), size=n, replace=False)
    return TriggerSet(triggers=[dataset.images[i].copy() for i in idx],
                      labels=None, scheme_id="reverse")


def _base_for_code(code: bytes, dataset) -> np.ndarray:
    idx = int.from_bytes(code[:8], "big") % len(dataset.images)
    return dataset.images[idx]


def generate_trigger(scheme_id: str, code: bytes, params: SchemeParams, dataset) -> np.ndarray:
    """Run the named baseline generator on one code; bases come from the dataset."""
    if scheme_id == "noise":
        return noise_trigger(code, params)
    if scheme_id == "wonder":
        return wonder_trigger(code, _base_for_code(code, dataset))
    if scheme_id == "stamp":
        return stamp_trigger(code, _base_for_code(code, dataset))
    if scheme_id == "stego":
        return stego_trigger(code, _base_for_code(code, dataset))
    raise ValueError(f"unknown baseline scheme {scheme_id!r}")


def build_trigger_set(scheme_id: str, key: IdentityKey, params: SchemeParams,
                      dataset) -> TriggerSet:
    """Forward-scheme backdoor set: chained codes, generated triggers, direct labels."""
    if scheme_id not in BASELINE_SCHEMES:
        raise ValueError(f"forward construction applies to {BASELINE_SCHEMES}, got {scheme_id!r}")
    codes = encode_chain(key, params)
    triggers = [generate_trigger(scheme_id, c, params, dataset) for c in codes]
    labels = [scheme_label(c, params) for c in codes]
    return TriggerSet(triggers=triggers, labels=labels, scheme_id=scheme_id)


def trigger_source(scheme_id: str, params: SchemeParams, dataset):
    """Sampler the adversary uses to collect trigger examples.

    Baselines run the public generator on fresh pseudorandom codes; the
    reverse scheme's triggers are just dataset samples. Returns a callable
    (count, seed) -> (count, h, w) float32 stack.
    """
    if scheme_id == "reverse":
        def sample_reverse(count: int, seed: int) -> np.ndarray:
            rng = np.random.default_rng(derive_seed(seed, "source", scheme_id))
            idx = rng.choice(len(dataset.images), size=count, replace=False)
            return dataset.images[idx].copy()
        return sample_reverse
    if scheme_id not in BASELINE_SCHEMES:
        raise ValueError(f"unknown scheme {scheme_id!r}")

    def sample(count: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(derive_seed(seed, "source", scheme_id))
        out = np.empty((count, *params.image_dims), dtype=np.float32)
        for i in range(count):
            code = rng.bytes(params.code_bytes)
            out[i] = generate_trigger(scheme_id, code, params, dataset)
        return out

    return sample


def save_trigger_set(ts: TriggerSet, out_dir: str) -> None:
    """Persist as one binary image per trigger plus a JSON manifest."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, img in enumerate(ts.triggers):
        name = f"trigger_{i:04d}.bin"
        with open(os.path.join(out_dir, name), "wb") as fh:
            fh.write(serialize_image(img))
        names.append(name)
    manifest = {
        "scheme_id": ts.scheme_id,
        "triggers": names,
        "labels": None if ts.labels is None else [int(v) for v in ts.labels],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_trigger_set(in_dir: str) -> TriggerSet:
    with open(os.path.join(in_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    triggers = [
        deserialize_image(open(os.path.join(in_dir, name), "rb").read()).astype(np.float32)
        for name in manifest["triggers"]
    ]
    return TriggerSet(triggers=triggers, labels=manifest["labels"],
                      scheme_id=manifest["scheme_id"])
