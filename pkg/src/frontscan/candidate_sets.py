"""Candidate sets of related (domain, ip) destinations and pair sampling."""

from __future__ import annotations

import enum
import ipaddress
import json
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

from .dns_ingest import AsnEntry, DnsCnameObservation, TlsObservation

MAX_TUPLES_PER_SET = 100_000
DEFAULT_PAIRS_PER_TUPLE = 5


class GroupKind(str, enum.Enum):
    AUTONOMOUS_SYSTEM = "AUTONOMOUS_SYSTEM"
    CNAME_DOMAIN = "CNAME_DOMAIN"
    CNAME_FQDN = "CNAME_FQDN"


@dataclass(frozen=True, order=True)
class DestinationTuple:
    domain: str
    ip: str

    def __post_init__(self):
        if not self.domain:
            raise ValueError("destination domain must be non-empty")
        ipaddress.IPv4Address(self.ip)

    def to_json(self) -> dict:
        return {"domain": self.domain, "ip": self.ip}

    @classmethod
    def from_json(cls, obj: dict) -> "DestinationTuple":
        return cls(obj["domain"], obj["ip"])


@dataclass(frozen=True, order=True)
class GroupKey:
    kind: GroupKind
    value: str

    def __post_init__(self):
        if not self.value:
            raise ValueError("group key value must be non-empty")

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.value}"


@dataclass
class CandidateSet:
    key: GroupKey
    # (tuple, prevalence) sorted by descending prevalence
    entries: list[tuple[DestinationTuple, int]] = field(default_factory=list)

    @property
    def tuples(self) -> list[DestinationTuple]:
        return [t for t, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def restrict(self, keep: Iterable[DestinationTuple]) -> "CandidateSet":
        keep = set(keep)
        return CandidateSet(self.key, [(t, n) for t, n in self.entries if t in keep])

    def to_json(self) -> dict:
        return {
            "kind": self.key.kind.value,
            "value": self.key.value,
            "tuples": [{"domain": t.domain, "ip": t.ip, "count": n} for t, n in self.entries],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CandidateSet":
        key = GroupKey(GroupKind(obj["kind"]), obj["value"])
        return cls(key, [(DestinationTuple(t["domain"], t["ip"]), int(t.get("count", 1))) for t in obj["tuples"]])


@dataclass(frozen=True)
class ScanPair:
    pair_id: str
    target: DestinationTuple
    front: DestinationTuple
    group: GroupKey

    def __post_init__(self):
        if self.target == self.front:
            raise ValueError("target and front must differ")

    def to_json(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "kind": self.group.kind.value,
            "group": self.group.value,
            "target": self.target.to_json(),
            "front": self.front.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScanPair":
        return cls(
            obj["pair_id"],
            DestinationTuple.from_json(obj["target"]),
            DestinationTuple.from_json(obj["front"]),
            GroupKey(GroupKind(obj["kind"]), obj["group"]),
        )


def _key_for(obs, kind: GroupKind) -> tuple[GroupKey, DestinationTuple] | None:
    if kind is GroupKind.AUTONOMOUS_SYSTEM:
        tls, asn = obs
        if asn is None or not tls.server_name:
            return None
        return GroupKey(kind, asn.label), DestinationTuple(tls.server_name, tls.dst_ip)
    if not isinstance(obs, DnsCnameObservation):
        raise TypeError(f"{kind.value} grouping needs DNS CNAME observations, got {type(obs).__name__}")
    value = obs.canonical_domain if kind is GroupKind.CNAME_DOMAIN else obs.canonical_fqdn
    return GroupKey(kind, value), DestinationTuple(obs.alias_fqdn, obs.resolved_ip)


def build_groups(
    observations: Iterable[DnsCnameObservation | tuple[TlsObservation, AsnEntry | None]],
    kind: GroupKind,
    max_tuples: int = MAX_TUPLES_PER_SET,
) -> list[CandidateSet]:
    """Group observations into candidate sets keyed by AS, CNAME domain or CNAME FQDN.

    Within a set, tuples are ordered by descending occurrence count with ties
    broken by (domain, ip), then truncated to ``max_tuples``.  TLS
    observations without SNI or without a tracked AS are dropped.
    """
    counts: dict[GroupKey, Counter] = defaultdict(Counter)
    for obs in observations:
        keyed = _key_for(obs, kind)
        if keyed is not None:
            counts[keyed[0]][keyed[1]] += 1
    sets = []
    for key in sorted(counts):
        ranked = sorted(counts[key].items(), key=lambda item: (-item[1], item[0].domain, item[0].ip))
        sets.append(CandidateSet(key, ranked[:max_tuples]))
    return sets


def rank_canonicals(observations: Iterable[DnsCnameObservation], level: GroupKind) -> list[tuple[str, int]]:
    """Canonical names ordered by number of unique alias names mapping to them."""
    if level not in (GroupKind.CNAME_DOMAIN, GroupKind.CNAME_FQDN):
        raise ValueError("level must be CNAME_DOMAIN or CNAME_FQDN")
    aliases: dict[str, set[str]] = defaultdict(set)
    for obs in observations:
        name = obs.canonical_domain if level is GroupKind.CNAME_DOMAIN else obs.canonical_fqdn
        aliases[name].add(obs.alias_fqdn)
    return sorted(((name, len(s)) for name, s in aliases.items()), key=lambda item: (-item[1], item[0]))


def sample_pairs(cset: CandidateSet, pairs_per_tuple: int = DEFAULT_PAIRS_PER_TUPLE, seed: int = 0) -> list[ScanPair]:
    """Sample up to ``pairs_per_tuple`` fronts per target, without replacement.

    The RNG is derived from the seed and the group key, so results for a set
    do not depend on which other sets were sampled first.  A tuple never
    fronts for a tuple with the same domain.
    """
    if pairs_per_tuple < 1:
        raise ValueError("pairs_per_tuple must be >= 1")
    rng = random.Random(f"{seed}|{cset.key.kind.value}|{cset.key.value}")
    tuples = cset.tuples
    pairs = []
    for target in tuples:
        others = [t for t in tuples if t.domain != target.domain]
        if not others:
            continue
        for front in rng.sample(others, min(pairs_per_tuple, len(others))):
            pair_id = f"{cset.key}#{len(pairs)}"
            pairs.append(ScanPair(pair_id, target, front, cset.key))
    return pairs


def dump_sets(sets: Sequence[CandidateSet], out: IO[str]) -> None:
    for cset in sets:
        out.write(json.dumps(cset.to_json(), sort_keys=True) + "\n")


def load_sets(source: Iterable[str]) -> list[CandidateSet]:
    return [CandidateSet.from_json(json.loads(line)) for line in source if line.strip()]
