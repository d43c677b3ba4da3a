"""Offline ingest of passive DNS CNAME and TLS ClientHello observations.

Inputs are line-delimited JSON.  Names are normalized (lowercased, trailing
dot removed) at parse time so every later comparison is a plain string
comparison.  Only IPv4 is handled; IPv6 rows are counted and skipped.
"""

from __future__ import annotations

import csv
import ipaddress
import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import IO, Iterable, Iterator

log = logging.getLogger(__name__)

MALFORMED_LIMIT = 0.5


class IngestFormatError(ValueError):
    """Raised when an input looks like the wrong kind of file."""


def normalize_name(name: str) -> str:
    return name.strip().rstrip(".").lower()


@dataclass(frozen=True)
class DnsCnameObservation:
    alias_fqdn: str
    canonical_fqdn: str
    canonical_domain: str
    resolved_ip: str
    observed_at: int | None = None

    def to_json(self) -> dict:
        return {
            "alias": self.alias_fqdn,
            "cname": self.canonical_fqdn,
            "cname_domain": self.canonical_domain,
            "ip": self.resolved_ip,
            "ts": self.observed_at,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DnsCnameObservation":
        return cls(
            alias_fqdn=obj["alias"],
            canonical_fqdn=obj["cname"],
            canonical_domain=obj["cname_domain"],
            resolved_ip=obj["ip"],
            observed_at=obj.get("ts"),
        )


@dataclass(frozen=True)
class TlsObservation:
    server_name: str | None
    dst_ip: str


@dataclass(frozen=True)
class AsnEntry:
    prefix: ipaddress.IPv4Network
    asn: int
    as_name: str

    @property
    def label(self) -> str:
        return self.as_name or f"AS{self.asn}"


class ParsedRecords(list):
    """A list of parsed records that also carries skip counters."""

    def __init__(self, items=(), malformed: int = 0, skipped_ipv6: int = 0):
        super().__init__(items)
        self.malformed = malformed
        self.skipped_ipv6 = skipped_ipv6


# -- public suffix handling -------------------------------------------------

class SuffixList:
    """Public-suffix rules (plain, wildcard and exception) in lookup form."""

    def __init__(self, rules: Iterable[str]):
        self.exact: set[str] = set()
        self.wildcard: set[str] = set()
        self.exception: set[str] = set()
        for raw in rules:
            rule = raw.strip().split()[0] if raw.strip() else ""
            if not rule or rule.startswith("//"):
                continue
            rule = rule.lower()
            if rule.startswith("!"):
                self.exception.add(rule[1:])
            elif rule.startswith("*."):
                self.wildcard.add(rule[2:])
            else:
                self.exact.add(rule)

    def public_suffix_len(self, labels: list[str]) -> int | None:
        """Number of trailing labels forming the public suffix, or None if no rule matches."""
        n = len(labels)
        for i in range(n):
            candidate = ".".join(labels[i:])
            if candidate in self.exception:
                return n - i - 1
            if candidate in self.exact:
                return n - i
            parent = ".".join(labels[i + 1:])
            if i + 1 < n and parent in self.wildcard:
                return n - i
        return None


@lru_cache(maxsize=1)
def default_suffix_list() -> SuffixList:
    text = resources.files("frontscan").joinpath("data/public_suffix_list.dat").read_text("utf-8")
    return SuffixList(text.splitlines())


def registrable_domain(fqdn: str, suffix_list: SuffixList | None = None) -> str:
    """Return the eTLD+1 of *fqdn*.

    Falls back to the last two labels when the name is itself a public suffix
    or when no rule matches.
    """
    name = normalize_name(fqdn)
    if not name:
        raise ValueError("empty domain name")
    labels = name.split(".")
    if any(not label for label in labels):
        raise ValueError(f"empty label in {fqdn!r}")
    psl = suffix_list or default_suffix_list()
    suffix_len = psl.public_suffix_len(labels)
    if suffix_len is None or suffix_len >= len(labels):
        return ".".join(labels[-2:])
    return ".".join(labels[-(suffix_len + 1):])


# -- record parsing ---------------------------------------------------------

def _ipv4_or_none(value) -> str | None:
    """Canonical IPv4 text, or None for IPv6.  Raises on garbage."""
    addr = ipaddress.ip_address(value)
    if addr.version == 6:
        return None
    return str(addr)


def _iter_json_lines(source: Iterable[str]) -> Iterator[dict | None]:
    for line in source:
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            yield None
            continue
        yield obj if isinstance(obj, dict) else None


def _check_malformed(total: int, bad: int, what: str) -> None:
    if total and bad / total > MALFORMED_LIMIT:
        raise IngestFormatError(f"{bad} of {total} lines malformed; is this really a {what} file?")


def parse_cname_records(source: Iterable[str], suffix_list: SuffixList | None = None) -> ParsedRecords:
    records: list[DnsCnameObservation] = []
    total = bad = v6 = 0
    for obj in _iter_json_lines(source):
        total += 1
        try:
            if obj is None:
                raise ValueError("not a JSON object")
            alias = normalize_name(obj["alias"])
            cname = normalize_name(obj["cname"])
            if not alias or not cname or alias == cname:
                raise ValueError("bad alias/cname")
            ip = _ipv4_or_none(obj["ip"])
            if ip is None:
                v6 += 1
                continue
            ts = obj.get("ts")
            if ts is not None and (isinstance(ts, bool) or not isinstance(ts, int)):
                raise ValueError("ts must be an integer")
            records.append(DnsCnameObservation(alias, cname, registrable_domain(cname, suffix_list), ip, ts))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            bad += 1
            log.debug("skipping malformed CNAME line: %s", exc)
    _check_malformed(total, bad, "CNAME JSONL")
    return ParsedRecords(records, malformed=bad, skipped_ipv6=v6)


def parse_tls_records(source: Iterable[str]) -> ParsedRecords:
    records: list[TlsObservation] = []
    total = bad = v6 = 0
    for obj in _iter_json_lines(source):
        total += 1
        try:
            if obj is None:
                raise ValueError("not a JSON object")
            sni = obj.get("sni")
            if sni is not None:
                sni = normalize_name(sni)
                if not sni:
                    raise ValueError("empty sni")
            ip = _ipv4_or_none(obj["dst_ip"])
            if ip is None:
                v6 += 1
                continue
            records.append(TlsObservation(sni, ip))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            bad += 1
            log.debug("skipping malformed TLS line: %s", exc)
    _check_malformed(total, bad, "TLS JSONL")
    return ParsedRecords(records, malformed=bad, skipped_ipv6=v6)


def dump_cname_records(records: Iterable[DnsCnameObservation], out: IO[str]) -> None:
    for rec in records:
        out.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def load_normalized_cname_records(source: Iterable[str]) -> list[DnsCnameObservation]:
    """Read the output of :func:`dump_cname_records` back."""
    return [DnsCnameObservation.from_json(json.loads(line)) for line in source if line.strip()]


# -- ASN table ---------------------------------------------------------------

class AsnTable:
    """Longest-prefix-match table over IPv4 prefixes.

    Prefixes are bucketed by length; a lookup masks the address once per
    populated length, longest first.
    """

    def __init__(self, entries: Iterable[AsnEntry] = ()):
        self._by_len: dict[int, dict[int, AsnEntry]] = {}
        self._lengths: list[int] = []
        for entry in entries:
            self.add(entry)

    def add(self, entry: AsnEntry) -> None:
        if entry.asn <= 0:
            raise ValueError(f"invalid ASN {entry.asn} for {entry.prefix}")
        plen = entry.prefix.prefixlen
        bucket = self._by_len.setdefault(plen, {})
        key = int(entry.prefix.network_address)
        if key in bucket:
            raise ValueError(f"duplicate prefix {entry.prefix}")
        bucket[key] = entry
        self._lengths = sorted(self._by_len, reverse=True)

    def __len__(self) -> int:
        return sum(len(b) for b in self._by_len.values())

    def lookup(self, ip: str) -> AsnEntry | None:
        addr = int(ipaddress.IPv4Address(ip))
        for plen in self._lengths:
            mask = (0xFFFFFFFF << (32 - plen)) & 0xFFFFFFFF
            hit = self._by_len[plen].get(addr & mask)
            if hit is not None:
                return hit
        return None

    @classmethod
    def from_csv(cls, source: Iterable[str]) -> "AsnTable":
        table = cls()
        reader = csv.DictReader(source)
        if reader.fieldnames is None or not {"prefix", "asn", "name"} <= set(reader.fieldnames):
            raise IngestFormatError("ASN CSV must have header prefix,asn,name")
        for row in reader:
            net = ipaddress.ip_network(row["prefix"].strip(), strict=True)
            if net.version != 4:
                continue
            table.add(AsnEntry(net, int(row["asn"]), row["name"].strip()))
        return table


def asn_lookup(ip: str, db: AsnTable) -> AsnEntry | None:
    return db.lookup(ip)
