"""Multi-party ownership verification and the end-to-end attack scenarios.

A verification session has three phases: the owner submits triggers in a
seeded random order and the judge records the service's answers; the owner
reveals the order; the judge recomputes codes, checks the Merkle commitment
against the ledger, rebuilds the label chain from the registered key, and
issues a verdict. Until the reveal, the permutation is unreadable by anyone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attack import Filter, RuleFilter, capsulate, fit_classifier, make_fake_labeler
from .evidence import (ChainResult, EvidenceRecord, chain_labels, ledger_append,
                       ledger_lookup, merkle_root)
from .model import (BlackBoxModel, OracleModel, SyntheticDataset, TrainHyper, TrainableModel,
                    accuracy, embed_backdoor, gen_dataset, make_dataset_labeler, train)
from .scheme import (IdentityKey, SchemeParams, derive_seed, image_digest,
                     inverse_trigger_code, keygen)
from .triggers import BASELINE_SCHEMES, TriggerSet, build_trigger_set, reverse_select, trigger_source
from .metrics import match_threshold


class ProtocolError(RuntimeError):
    """A party broke the session's phase discipline or sent malformed data."""


@dataclass(frozen=True)
class Verdict:
    merkle_ok: bool
    match_count: int
    accuracy: float
    threshold: float
    accepted: bool

    def to_json(self) -> dict:
        return {"merkle_ok": self.merkle_ok, "match_count": self.match_count,
                "accuracy": self.accuracy, "threshold": self.threshold,
                "accepted": self.accepted}


@dataclass
class OwnerState:
    """Everything the owner holds after registering: key, ordered triggers, chain, evidence."""

    key: IdentityKey
    params: SchemeParams
    trigger_set: TriggerSet
    codes: list[bytes]
    chain: ChainResult
    record: EvidenceRecord


def build_reverse_set(key: IdentityKey, dataset: SyntheticDataset, params: SchemeParams,
                      seed: int) -> tuple[TriggerSet, list[bytes], ChainResult]:
    """Select reverse triggers and assign their chained labels (no registration)."""
    ts = reverse_select(dataset, params.n_triggers, seed)
    codes = [inverse_trigger_code(t, params) for t in ts.triggers]
    chain = chain_labels(key, codes, params)
    ts.labels = list(chain.labels)
    return ts, codes, chain


def owner_register(key: IdentityKey, dataset: SyntheticDataset, params: SchemeParams,
                   seed: int, ledger_path: str) -> OwnerState:
    """Select triggers, chain their labels, and append the evidence to the ledger."""
    ts, codes, chain = build_reverse_set(key, dataset, params, seed)
    record = ledger_append(key.bits, merkle_root(codes), ledger_path)
    return OwnerState(key=key, params=params, trigger_set=ts, codes=codes,
                      chain=chain, record=record)


@dataclass
class VerificationTranscript:
    session_id: str
    record_id: str
    submitted_digests: list[str]
    responses: list[int]
    permutation: list[int]
    verdict: Verdict

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "record_id": self.record_id,
            "submitted_digests": self.submitted_digests,
            "responses": self.responses,
            "permutation": self.permutation,
            "verdict": self.verdict.to_json(),
        }


def judge_evaluate(submitted: list[np.ndarray], responses: list[int],
                   permutation: np.ndarray, record: EvidenceRecord,
                   params: SchemeParams, tau: float) -> Verdict:
    """Phase-3 logic: un-permute, recheck the commitment, recount label matches.

    The judge trusts nothing from the owner beyond the images and the revealed
    order: codes, Merkle root, and chain labels are all recomputed from the
    registered evidence.
    """
    n = len(submitted)
    if sorted(int(p) for p in permutation) != list(range(n)):
        raise ProtocolError("revealed order is not a bijection over the submissions")
    if len(responses) != n:
        raise ProtocolError(f"{len(responses)} responses for {n} submissions")
    ordered_triggers: list[np.ndarray | None] = [None] * n
    ordered_responses = [0] * n
    for i, pos in enumerate(permutation):
        ordered_triggers[pos] = submitted[i]
        ordered_responses[pos] = responses[i]
    codes = [inverse_trigger_code(t, params) for t in ordered_triggers]
    merkle_ok = merkle_root(codes).hex() == record.root_hex
    key = IdentityKey(bits=bytes.fromhex(record.key_hex), seed=-1)
    labels = chain_labels(key, codes, params).labels
    matches = sum(1 for lab, resp in zip(labels, ordered_responses) if lab == resp)
    accepted = merkle_ok and matches >= match_threshold(tau, n)
    return Verdict(merkle_ok=merkle_ok, match_count=matches, accuracy=matches / n,
                   threshold=tau, accepted=accepted)


class VerificationSession:
    """One owner/judge/service interaction with enforced phase order."""

    def __init__(self, owner: OwnerState, session_seed: int):
        self.owner = owner
        rng = np.random.default_rng(derive_seed(session_seed, "session-order"))
        self._perm = rng.permutation(len(owner.trigger_set.triggers))
        self.submitted = [owner.trigger_set.triggers[p] for p in self._perm]
        self.responses: list[int] | None = None
        self._revealed = False
        self.session_id = hashlib.sha256(
            f"{owner.record.record_id}/{session_seed}".encode()
        ).hexdigest()[:16]

    @property
    def permutation(self) -> np.ndarray:
        if not self._revealed:
            raise ProtocolError("order queried before the owner revealed it")
        return self._perm.copy()

    def run_queries(self, service: BlackBoxModel) -> None:
        if self.responses is not None:
            raise ProtocolError("queries already recorded for this session")
        self.responses = [int(service.query(t)) for t in self.submitted]

    def reveal_order(self) -> np.ndarray:
        if self.responses is None:
            raise ProtocolError("owner cannot reveal the order before the queries finish")
        self._revealed = True
        return self._perm.copy()

    def judge(self, ledger_path: str, tau: float) -> VerificationTranscript:
        if not self._revealed:
            raise ProtocolError("verdict requested before the order reveal")
        record = ledger_lookup(self.owner.record.record_id, ledger_path)
        if record is None:
            raise ProtocolError(f"evidence {self.owner.record.record_id} not in ledger")
        verdict = judge_evaluate(self.submitted, self.responses, self._perm,
                                 record, self.owner.params, tau)
        return VerificationTranscript(
            session_id=self.session_id,
            record_id=record.record_id,
            submitted_digests=[image_digest(t).hex() for t in self.submitted],
            responses=list(self.responses),
            permutation=[int(p) for p in self._perm],
            verdict=verdict,
        )


def verify_session(owner: OwnerState, service: BlackBoxModel, tau: float,
                   session_seed: int, ledger_path: str) -> VerificationTranscript:
    """Run all three phases against a suspicious service."""
    session = VerificationSession(owner, session_seed)
    session.run_queries(service)
    session.reveal_order()
    return session.judge(ledger_path, tau)


def forward_verify(key: IdentityKey, scheme_id: str, service: BlackBoxModel,
                   params: SchemeParams, dataset: SyntheticDataset) -> float:
    """Baseline-scheme check: rebuild triggers from the key, compare answers to L(c)."""
    ts = build_trigger_set(scheme_id, key, params, dataset)
    return accuracy(service, ts.pairs())


def oracle_for_owner(owner: OwnerState, dataset: SyntheticDataset,
                     trigger_fidelity: float = 1.0, clean_accuracy: float = 1.0,
                     seed: int = 0) -> OracleModel:
    """An oracle that behaves like a model with the owner's watermark embedded."""
    trigger_map = {image_digest(t): int(lab)
                   for t, lab in zip(owner.trigger_set.triggers, owner.trigger_set.labels)}
    return OracleModel(trigger_map=trigger_map, base_labeler=make_dataset_labeler(dataset),
                       n_classes=owner.params.n_classes, trigger_fidelity=trigger_fidelity,
                       clean_accuracy=clean_accuracy, seed=seed)


def clean_accuracy_of(service: BlackBoxModel, dataset: SyntheticDataset) -> float:
    """Black-box accuracy over the held-out test split."""
    pairs = list(zip(dataset.test_images, (int(v) for v in dataset.test_labels)))
    return accuracy(service, pairs)


@dataclass
class CapsulationReport:
    """Before/after metrics for one scheme under one fitted filter."""

    scheme_id: str
    filter_kind: str
    q: int
    clean_acc_plain: float
    clean_acc_watermarked: float
    trigger_acc_watermarked: float
    clean_acc_capsulated: float
    trigger_acc_capsulated: float
    filter_tpr: float
    filter_fpr: float

    def to_json(self) -> dict:
        return dict(vars(self))

    @staticmethod
    def csv_header() -> str:
        return ("scheme,filter,q,clean_plain,clean_wm,trigger_wm,"
                "clean_capsulated,trigger_capsulated,tpr,fpr")

    def to_csv_row(self) -> str:
        return (f"{self.scheme_id},{self.filter_kind},{self.q},"
                f"{self.clean_acc_plain:.4f},{self.clean_acc_watermarked:.4f},"
                f"{self.trigger_acc_watermarked:.4f},{self.clean_acc_capsulated:.4f},"
                f"{self.trigger_acc_capsulated:.4f},{self.filter_tpr:.4f},{self.filter_fpr:.4f}")


def adversary_filter(scheme_id: str, filter_kind: str, q: int, params: SchemeParams,
                     dataset: SyntheticDataset, master_seed: int,
                     filter_hyper: dict | None = None) -> Filter:
    """Fit the attack filter the way a field adversary would.

    Q trigger examples come from the public generator (for the reverse scheme
    that is just Q dataset samples) and Q normal queries from service traffic.
    """
    source = trigger_source(scheme_id, params, dataset)
    fit_triggers = source(q, derive_seed(master_seed, "adv-triggers"))
    norm_rng = np.random.default_rng(derive_seed(master_seed, "adv-normals"))
    norm_idx = norm_rng.choice(dataset.train_idx, size=q, replace=False)
    fit_normals = dataset.images[norm_idx]
    return fit_classifier(filter_kind, fit_triggers, fit_normals,
                          seed=derive_seed(master_seed, "filter"),
                          **(filter_hyper or {}))


def scenario_capsulation(scheme_id: str, filter_kind: str, q: int, params: SchemeParams,
                         master_seed: int, n_per_class: int = 200,
                         hyper: TrainHyper | None = None,
                         filter_hyper: dict | None = None) -> CapsulationReport:
    """Watermark a model, capsulate it with a fitted filter, measure both sides."""
    dataset = gen_dataset(derive_seed(master_seed, "dataset"), n_per_class, params)
    hyper = hyper or TrainHyper(seed=derive_seed(master_seed, "model"))
    base = train(dataset, hyper, params.n_classes)
    clean_plain = clean_accuracy_of(base, dataset)

    key = keygen(derive_seed(master_seed, "key"), params)
    if scheme_id == "reverse":
        ts, _, _ = build_reverse_set(key, dataset, params, derive_seed(master_seed, "select"))
    elif scheme_id in BASELINE_SCHEMES:
        ts = build_trigger_set(scheme_id, key, params, dataset)
    else:
        raise ValueError(f"unknown scheme {scheme_id!r}")
    marked = embed_backdoor(base, ts, dataset, hyper)
    clean_wm = clean_accuracy_of(marked, dataset)
    trigger_wm = accuracy(marked, ts.pairs())

    filt = adversary_filter(scheme_id, filter_kind, q, params, dataset, master_seed,
                            filter_hyper)
    service = capsulate(marked, filt, make_fake_labeler(marked, params,
                                                        derive_seed(master_seed, "fake")))
    clean_caps = clean_accuracy_of(service, dataset)
    trigger_caps = accuracy(service, ts.pairs())
    tpr = float(np.mean(filt.score_batch(np.stack(ts.triggers)) >= filt.threshold))
    fpr = float(np.mean(filt.score_batch(dataset.test_images) >= filt.threshold))
    return CapsulationReport(
        scheme_id=scheme_id, filter_kind=filter_kind, q=q,
        clean_acc_plain=clean_plain, clean_acc_watermarked=clean_wm,
        trigger_acc_watermarked=trigger_wm, clean_acc_capsulated=clean_caps,
        trigger_acc_capsulated=trigger_caps, filter_tpr=tpr, filter_fpr=fpr,
    )


@dataclass
class OverwriteReport:
    """Outcome of the two-party overwriting collusion against Carol's model."""

    alice_timestamp: int
    carol_timestamp: int
    alice_accepted: bool
    carol_accepted: bool
    alice_accuracy: float
    carol_accuracy: float
    alice_accepted_unfiltered: bool
    carol_accepted_unfiltered: bool

    def to_json(self) -> dict:
        return dict(vars(self))


def scenario_overwrite(params: SchemeParams, master_seed: int, ledger_path: str,
                       tau: float = 0.5, n_per_class: int = 200,
                       hyper: TrainHyper | None = None) -> OverwriteReport:
    """Reproduce the timestamp trilemma.

    Alice registers evidence over dataset samples at t1 without touching any
    model. Carol watermarks her own model and registers at t2 > t1. Bob then
    serves Carol's pirated model behind a rule filter that answers Alice's
    triggers with the labels her key implies. Both verifications accept, and
    only the earlier (meaningless) timestamp separates the claims; removing
    the filter exposes Alice.
    """
    dataset = gen_dataset(derive_seed(master_seed, "dataset"), n_per_class, params)
    hyper = hyper or TrainHyper(seed=derive_seed(master_seed, "model"))

    alice_key = keygen(derive_seed(master_seed, "alice-key"), params)
    alice = owner_register(alice_key, dataset, params,
                           derive_seed(master_seed, "alice-select"), ledger_path)

    carol_key = keygen(derive_seed(master_seed, "carol-key"), params)
    carol = owner_register(carol_key, dataset, params,
                           derive_seed(master_seed, "carol-select"), ledger_path)
    base = train(dataset, hyper, params.n_classes)
    carol_model = embed_backdoor(base, carol.trigger_set, dataset, hyper)

    alice_labels = {image_digest(t): int(lab)
                    for t, lab in zip(alice.trigger_set.triggers, alice.trigger_set.labels)}
    bob_filter = RuleFilter(trigger_digests=set(alice_labels))
    service = capsulate(carol_model, bob_filter, lambda img: alice_labels[image_digest(img)])

    t_alice = verify_session(alice, service, tau, derive_seed(master_seed, "alice-session"),
                             ledger_path)
    t_carol = verify_session(carol, service, tau, derive_seed(master_seed, "carol-session"),
                             ledger_path)
    t_alice_raw = verify_session(alice, carol_model, tau,
                                 derive_seed(master_seed, "alice-session-raw"), ledger_path)
    t_carol_raw = verify_session(carol, carol_model, tau,
                                 derive_seed(master_seed, "carol-session-raw"), ledger_path)
    return OverwriteReport(
        alice_timestamp=alice.record.timestamp,
        carol_timestamp=carol.record.timestamp,
        alice_accepted=t_alice.verdict.accepted,
        carol_accepted=t_carol.verdict.accepted,
        alice_accuracy=t_alice.verdict.accuracy,
        carol_accuracy=t_carol.verdict.accuracy,
        alice_accepted_unfiltered=t_alice_raw.verdict.accepted,
        carol_accepted_unfiltered=t_carol_raw.verdict.accepted,
    )


def export_transcript(transcript: VerificationTranscript, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(transcript.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
