"""Chained label assignment, Merkle commitments, and the evidence ledger.

The owner's public evidence is (identity key, Merkle root over trigger codes);
labels come from a hash chain seeded by the key, so label n is computable only
once triggers 1..n-1 and their order are known.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass

from .scheme import IdentityKey, SchemeParams, hash_r, scheme_label


class LedgerError(Exception):
    """Base class for evidence-ledger failures."""


class DuplicateRecordError(LedgerError):
    """The same (key, root) evidence pair was already registered."""


class CorruptLedgerError(LedgerError):
    """A ledger line failed to parse; carries the 1-based line number."""

    def __init__(self, path: str, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.line_no = line_no


@dataclass(frozen=True)
class ChainResult:
    """Labels l_1..l_N plus the chain intermediates b_2..b_N."""

    labels: tuple[int, ...]
    states: tuple[bytes, ...]


@dataclass(frozen=True)
class MerkleTree:
    """All levels of the commitment tree; level 0 is the leaves, the last level the root."""

    levels: tuple[tuple[bytes, ...], ...]

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]


@dataclass(frozen=True)
class EvidenceRecord:
    """One registered ownership claim: key, Merkle root, and the append timestamp."""

    record_id: str
    key_hex: str
    root_hex: str
    timestamp: int


def chain_labels(key: IdentityKey, codes: list[bytes], params: SchemeParams) -> ChainResult:
    """Assign labels along the hash chain: l_1 = L(key||c_1), then l_n = L(b_n||c_n)
    with b_2 = h(key||c_1) and b_n = h(b_{n-1}||c_{n-1})."""
    if not codes:
        raise ValueError("chain_labels requires at least one code")
    labels = [scheme_label(key.bits + codes[0], params)]
    states: list[bytes] = []
    state = hash_r(key.bits + codes[0], params.code_bits)
    for code in codes[1:]:
        states.append(state)
        labels.append(scheme_label(state + code, params))
        state = hash_r(state + code, params.code_bits)
    return ChainResult(labels=tuple(labels), states=tuple(states))


def build_merkle(codes: list[bytes]) -> MerkleTree:
    """Build the full tree over the codes in order; N must be a power of two."""
    n = len(codes)
    if n < 1 or n & (n - 1):
        raise ValueError(f"Merkle tree needs a power-of-two leaf count, got {n}")
    code_bits = len(codes[0]) * 8
    levels = [tuple(codes)]
    while len(levels[-1]) > 1:
        prev = levels[-1]
        levels.append(tuple(
            hash_r(prev[2 * i] + prev[2 * i + 1], code_bits) for i in range(len(prev) // 2)
        ))
    return MerkleTree(levels=tuple(levels))


def merkle_root(codes: list[bytes]) -> bytes:
    """Root of the commitment tree; for a single leaf the root is the leaf itself."""
    return build_merkle(codes).root


def record_id_of(key_bits: bytes, root: bytes) -> str:
    """Deterministic ledger id for a (key, root) evidence pair."""
    return hashlib.sha256(b"evidence" + key_bits + root).hexdigest()


def _read_ledger(path: str) -> list[EvidenceRecord]:
    records: list[EvidenceRecord] = []
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except FileNotFoundError:
        return records
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(EvidenceRecord(
                record_id=obj["id"], key_hex=obj["key"],
                root_hex=obj["root"], timestamp=int(obj["ts"]),
            ))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorruptLedgerError(path, i, f"bad ledger line ({exc})") from exc
    return records


def ledger_append(key_bits: bytes, root: bytes, path: str) -> EvidenceRecord:
    """Append one evidence record with the current timestamp.

    The file is append-only NDJSON. Timestamps are whole seconds, forced to be
    strictly increasing so that registration order is always recoverable even
    for appends within the same second. Re-registering the same (key, root)
    pair raises :class:`DuplicateRecordError`.
    """
    rid = record_id_of(key_bits, root)
    existing = _read_ledger(path)
    if any(r.record_id == rid for r in existing):
        raise DuplicateRecordError(f"evidence {rid} already registered")
    last_ts = existing[-1].timestamp if existing else 0
    ts = max(int(time.time()), last_ts + 1)
    record = EvidenceRecord(record_id=rid, key_hex=key_bits.hex(), root_hex=root.hex(), timestamp=ts)
    line = json.dumps({"id": rid, "key": record.key_hex, "root": record.root_hex, "ts": ts})
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
    return record


def ledger_lookup(record_id: str, path: str) -> EvidenceRecord | None:
    """Return the record with this id, or None; absence is a normal outcome."""
    for record in _read_ledger(path):
        if record.record_id == record_id:
            return record
    return None
