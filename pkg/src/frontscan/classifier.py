"""Pair verdicts from the five scan outcomes."""

from __future__ import annotations

import enum
import json
from collections import defaultdict
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

from .candidate_sets import ScanPair
from .scan_engine import TECHNIQUES, CertSummary, ScanOutcome, ScanRole

LENGTH_MATCH_TOLERANCE = (1, 20)   # within 5% of baseline-0
LENGTH_REJECT_TOLERANCE = (1, 5)   # outside 20% of baseline-1


class PruneReason(str, enum.Enum):
    CERT_COVERS_BOTH = "CERT_COVERS_BOTH"
    BASELINE_ERROR = "BASELINE_ERROR"
    BASELINE_NON_200 = "BASELINE_NON_200"


class Status(str, enum.Enum):
    SUCCESS = "SUCCESS"
    FAILURE = "FAILURE"
    NOT_EVALUATED = "NOT_EVALUATED"


class Reason(str, enum.Enum):
    EXACT_LENGTH = "EXACT_LENGTH"
    LENGTH_TOLERANCE = "LENGTH_TOLERANCE"
    HEADER_ORDER = "HEADER_ORDER"
    NON_200 = "NON_200"
    LENGTH_MISMATCH = "LENGTH_MISMATCH"
    TRANSPORT_ERROR = "TRANSPORT_ERROR"
    NOT_EVALUATED = "NOT_EVALUATED"


SUCCESS_REASONS = frozenset({Reason.EXACT_LENGTH, Reason.LENGTH_TOLERANCE, Reason.HEADER_ORDER})


@dataclass(frozen=True)
class TechniqueResult:
    status: Status
    reason: Reason

    def __post_init__(self):
        if (self.status is Status.SUCCESS) != (self.reason in SUCCESS_REASONS):
            raise ValueError(f"inconsistent technique result {self.status}/{self.reason}")
        if (self.status is Status.NOT_EVALUATED) != (self.reason is Reason.NOT_EVALUATED):
            raise ValueError(f"inconsistent technique result {self.status}/{self.reason}")

    @property
    def success(self) -> bool:
        return self.status is Status.SUCCESS


NOT_EVALUATED = TechniqueResult(Status.NOT_EVALUATED, Reason.NOT_EVALUATED)


@dataclass(frozen=True)
class PairVerdict:
    pair: ScanPair
    applicable: bool
    prune_reason: PruneReason | None
    fronting: TechniqueResult
    faking: TechniqueResult
    domainless: TechniqueResult

    def result(self, role: ScanRole) -> TechniqueResult:
        return {ScanRole.FRONTING: self.fronting, ScanRole.FAKING: self.faking,
                ScanRole.DOMAINLESS: self.domainless}[role]

    def to_json(self) -> dict:
        obj = self.pair.to_json()
        obj.update({
            "applicable": self.applicable,
            "prune_reason": self.prune_reason.value if self.prune_reason else None,
        })
        for name in ("fronting", "faking", "domainless"):
            res = getattr(self, name)
            obj[name] = {"status": res.status.value, "reason": res.reason.value}
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "PairVerdict":
        def tr(d):
            return TechniqueResult(Status(d["status"]), Reason(d["reason"]))
        prune = obj.get("prune_reason")
        return cls(ScanPair.from_json(obj), obj["applicable"], PruneReason(prune) if prune else None,
                   tr(obj["fronting"]), tr(obj["faking"]), tr(obj["domainless"]))


def _name_matches(pattern: str, domain: str) -> bool:
    pattern = pattern.lower().rstrip(".")
    if pattern == domain:
        return True
    if pattern.startswith("*."):
        head, _, rest = domain.partition(".")
        return bool(head) and head != "*" and rest == pattern[2:]
    return False


def cert_covers(cert: CertSummary, domain: str) -> bool:
    """True if the certificate's subject CN or a SAN DNS name covers *domain*.

    A wildcard matches exactly one leftmost label.
    """
    domain = domain.lower().rstrip(".")
    names = list(cert.san_dns_names)
    if cert.subject_common_name:
        names.append(cert.subject_common_name)
    return any(_name_matches(n, domain) for n in names)


def _within(delta: int, base: int, tol: tuple[int, int]) -> bool:
    # delta <= base * num/den, in integers so the boundary is exact
    num, den = tol
    return delta * den <= base * num


def judge(outcome: ScanOutcome, b0: ScanOutcome, b1: ScanOutcome) -> TechniqueResult:
    if outcome.transport_error is not None:
        return TechniqueResult(Status.FAILURE, Reason.TRANSPORT_ERROR)
    if outcome.status_code != 200:
        return TechniqueResult(Status.FAILURE, Reason.NON_200)
    n, n0, n1 = outcome.content_length, b0.content_length, b1.content_length
    if n == n0 and n != n1:
        return TechniqueResult(Status.SUCCESS, Reason.EXACT_LENGTH)
    if _within(abs(n - n0), n0, LENGTH_MATCH_TOLERANCE) and not _within(abs(n - n1), n1, LENGTH_REJECT_TOLERANCE):
        return TechniqueResult(Status.SUCCESS, Reason.LENGTH_TOLERANCE)
    if outcome.header_names == b0.header_names and outcome.header_names != b1.header_names:
        return TechniqueResult(Status.SUCCESS, Reason.HEADER_ORDER)
    return TechniqueResult(Status.FAILURE, Reason.LENGTH_MISMATCH)


def _by_role(outcomes: Iterable[ScanOutcome] | Mapping[ScanRole, ScanOutcome]) -> dict[ScanRole, ScanOutcome]:
    if isinstance(outcomes, Mapping):
        outcomes = outcomes.values()
    by_role: dict[ScanRole, ScanOutcome] = {}
    for o in outcomes:
        if o.spec.role in by_role:
            raise ValueError(f"duplicate {o.spec.role.value} outcome")
        by_role[o.spec.role] = o
    missing = set(ScanRole) - set(by_role)
    if missing:
        raise ValueError(f"missing outcomes for {sorted(r.value for r in missing)}")
    return by_role


def _pruned(pair: ScanPair, reason: PruneReason) -> PairVerdict:
    return PairVerdict(pair, False, reason, NOT_EVALUATED, NOT_EVALUATED, NOT_EVALUATED)


def evaluate_pair(pair: ScanPair, outcomes: Iterable[ScanOutcome] | Mapping[ScanRole, ScanOutcome]) -> PairVerdict:
    by_role = _by_role(outcomes)
    b0, b1 = by_role[ScanRole.BASELINE_0], by_role[ScanRole.BASELINE_1]
    for base in (b0, b1):
        cert = base.leaf_cert
        if cert is not None and cert_covers(cert, pair.target.domain) and cert_covers(cert, pair.front.domain):
            return _pruned(pair, PruneReason.CERT_COVERS_BOTH)
    if b0.transport_error is not None or b1.transport_error is not None:
        return _pruned(pair, PruneReason.BASELINE_ERROR)
    if b0.status_code != 200 or b1.status_code != 200:
        return _pruned(pair, PruneReason.BASELINE_NON_200)
    fronting, faking, domainless = (judge(by_role[r], b0, b1) for r in TECHNIQUES)
    return PairVerdict(pair, True, None, fronting, faking, domainless)


def classify_all(rows: Sequence[tuple[ScanPair, ScanOutcome]]) -> list[PairVerdict]:
    """Group logged outcomes by pair id and evaluate each pair, in pair-id order of appearance."""
    pairs: dict[str, ScanPair] = {}
    grouped: dict[str, list[ScanOutcome]] = defaultdict(list)
    for pair, outcome in rows:
        pairs.setdefault(pair.pair_id, pair)
        grouped[pair.pair_id].append(outcome)
    return [evaluate_pair(pairs[pid], grouped[pid]) for pid in pairs]


def dump_verdicts(verdicts: Iterable[PairVerdict], out: IO[str]) -> None:
    for v in verdicts:
        out.write(json.dumps(v.to_json(), sort_keys=True) + "\n")


def load_verdicts(source: Iterable[str]) -> list[PairVerdict]:
    return [PairVerdict.from_json(json.loads(line)) for line in source if line.strip()]

