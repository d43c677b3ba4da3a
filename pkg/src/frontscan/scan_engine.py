"""Five-scan matrix over (destination IP, TLS SNI, HTTP Host).

Connections are made to an explicit IPv4 address; no name resolution ever
happens.  Each scan is one HTTP/1.1 ``GET`` over TLS with certificate
validation disabled, and records the status code, response header names in
wire order, body length and a summary of the leaf certificate.
"""

from __future__ import annotations

import enum
import http.client
import ipaddress
import json
import logging
import re
import socket
import ssl
import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import IO, Callable, Iterable, Sequence

from cryptography import x509
from cryptography.x509.oid import ExtensionOID, NameOID

from .candidate_sets import DestinationTuple, ScanPair

log = logging.getLogger(__name__)

CHROME_104_WIN10_UA = (
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 "
    "(KHTML, like Gecko) Chrome/104.0.0.0 Safari/537.36"
)


class ScopeError(RuntimeError):
    """Refusing to connect to an address outside the permitted scan scope."""


class ScanRole(str, enum.Enum):
    BASELINE_0 = "BASELINE_0"
    BASELINE_1 = "BASELINE_1"
    FRONTING = "FRONTING"
    FAKING = "FAKING"
    DOMAINLESS = "DOMAINLESS"


BASELINES = (ScanRole.BASELINE_0, ScanRole.BASELINE_1)
TECHNIQUES = (ScanRole.FRONTING, ScanRole.FAKING, ScanRole.DOMAINLESS)


@dataclass(frozen=True)
class ScanSpec:
    role: ScanRole
    dst_ip: str
    sni: str | None
    host: str
    path: str = "/"

    def __post_init__(self):
        if (self.role is ScanRole.DOMAINLESS) != (self.sni is None):
            raise ValueError("sni must be absent exactly for the domainless scan")


_DNS_LABEL = re.compile(r"^[a-z0-9_]([a-z0-9_-]{0,61}[a-z0-9_])?$", re.IGNORECASE)


def is_dns_pattern(name: str) -> bool:
    """Hostname, optionally with a single ``*`` as the whole leftmost label."""
    labels = name.rstrip(".").split(".")
    if labels[0] == "*":
        labels = labels[1:]
    return bool(labels) and all(_DNS_LABEL.match(label) for label in labels)


@dataclass(frozen=True)
class CertSummary:
    subject_common_name: str | None
    san_dns_names: tuple[str, ...] = ()

    def __post_init__(self):
        bad = [n for n in self.san_dns_names if not is_dns_pattern(n)]
        if bad:
            raise ValueError(f"invalid SAN DNS pattern(s): {bad}")

    @classmethod
    def from_der(cls, der: bytes) -> "CertSummary":
        cert = x509.load_der_x509_certificate(der)
        cn_attrs = cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
        cn = str(cn_attrs[0].value) if cn_attrs else None
        try:
            ext = cert.extensions.get_extension_for_oid(ExtensionOID.SUBJECT_ALTERNATIVE_NAME)
            # malformed entries can never match a hostname, so they are dropped here
            sans = tuple(n for n in ext.value.get_values_for_type(x509.DNSName) if is_dns_pattern(n))
        except x509.ExtensionNotFound:
            sans = ()
        return cls(cn, sans)

    def to_json(self) -> dict:
        return {"subject_cn": self.subject_common_name, "san": list(self.san_dns_names)}

    @classmethod
    def from_json(cls, obj: dict | None) -> "CertSummary | None":
        if obj is None:
            return None
        return cls(obj.get("subject_cn"), tuple(obj.get("san", ())))


@dataclass(frozen=True)
class ScanOutcome:
    spec: ScanSpec
    status_code: int | None
    header_names: tuple[str, ...] = ()
    content_length: int = 0
    leaf_cert: CertSummary | None = None
    transport_error: str | None = None
    pair_id: str | None = None
    attempt: int = 1
    failed_retries: tuple["ScanOutcome", ...] = ()

    def __post_init__(self):
        if (self.transport_error is None) == (self.status_code is None):
            raise ValueError("exactly one of status_code / transport_error must be set")

    @property
    def ok(self) -> bool:
        return self.status_code == 200

    def to_json(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "role": self.spec.role.value,
            "dst_ip": self.spec.dst_ip,
            "sni": self.spec.sni,
            "host": self.spec.host,
            "path": self.spec.path,
            "status_code": self.status_code,
            "header_names": list(self.header_names),
            "content_length": self.content_length,
            "cert": self.leaf_cert.to_json() if self.leaf_cert else None,
            "transport_error": self.transport_error,
            "attempt": self.attempt,
            "failed_retries": [r.to_json() for r in self.failed_retries],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScanOutcome":
        spec = ScanSpec(ScanRole(obj["role"]), obj["dst_ip"], obj["sni"], obj["host"], obj.get("path", "/"))
        return cls(
            spec=spec,
            status_code=obj["status_code"],
            header_names=tuple(obj["header_names"]),
            content_length=obj["content_length"],
            leaf_cert=CertSummary.from_json(obj.get("cert")),
            transport_error=obj.get("transport_error"),
            pair_id=obj.get("pair_id"),
            attempt=obj.get("attempt", 1),
            failed_retries=tuple(cls.from_json(r) for r in obj.get("failed_retries", ())),
        )


@dataclass
class ScanConfig:
    port: int = 443
    connect_timeout: float = 5.0
    tls_timeout: float = 5.0
    total_timeout: float = 30.0
    max_body: int = 8 * 1024 * 1024
    user_agent: str = CHROME_104_WIN10_UA
    parallelism: int = 32
    serialize_per_ip: bool = False
    retry_delay: float = 1.0
    # host:port that every scan connects to instead of dst_ip:port
    target: tuple[str, int] | None = None
    # per-destination override, consulted before `target`
    address_map: dict[str, tuple[str, int]] = field(default_factory=dict)
    allowlist: list[ipaddress.IPv4Network] = field(default_factory=list)
    i_own_this_infrastructure: bool = False

    def __post_init__(self):
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")


def plan_scans(pair: ScanPair) -> list[ScanSpec]:
    t, f = pair.target, pair.front
    return [
        ScanSpec(ScanRole.BASELINE_0, t.ip, t.domain, t.domain),
        ScanSpec(ScanRole.BASELINE_1, f.ip, f.domain, f.domain),
        ScanSpec(ScanRole.FRONTING, f.ip, f.domain, t.domain),
        ScanSpec(ScanRole.FAKING, t.ip, f.domain, t.domain),
        ScanSpec(ScanRole.DOMAINLESS, t.ip, None, t.domain),
    ]


def baseline_spec(dest: DestinationTuple) -> ScanSpec:
    return ScanSpec(ScanRole.BASELINE_0, dest.ip, dest.domain, dest.domain)


def load_allowlist(lines: Iterable[str]) -> list[ipaddress.IPv4Network]:
    nets = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            nets.append(ipaddress.IPv4Network(line, strict=False))
    return nets


def resolve_endpoint(dst_ip: str, cfg: ScanConfig) -> tuple[str, int]:
    if dst_ip in cfg.address_map:
        return cfg.address_map[dst_ip]
    if cfg.target is not None:
        return cfg.target
    return dst_ip, cfg.port


def check_scope(connect_ip: str, cfg: ScanConfig) -> None:
    """Raise ScopeError unless the connect address is loopback, allowlisted, or explicitly owned."""
    try:
        addr = ipaddress.IPv4Address(connect_ip)
    except ValueError as exc:
        raise ScopeError(f"{connect_ip!r} is not an IPv4 literal; names are never resolved") from exc
    if addr.is_loopback or cfg.i_own_this_infrastructure:
        return
    if any(addr in net for net in cfg.allowlist):
        return
    raise ScopeError(f"{addr} is outside the allowlist (pass --allowlist or --i-own-this-infrastructure)")


def build_request(spec: ScanSpec, user_agent: str) -> bytes:
    lines = [
        f"GET {spec.path} HTTP/1.1",
        f"Host: {spec.host}",
        f"User-Agent: {user_agent}",
        "Accept-Encoding: identity",
        "Connection: close",
    ]
    return ("\r\n".join(lines) + "\r\n\r\n").encode("ascii")


_CLIENT_CTX: ssl.SSLContext | None = None
_CLIENT_CTX_LOCK = threading.Lock()


def _client_context() -> ssl.SSLContext:
    global _CLIENT_CTX
    with _CLIENT_CTX_LOCK:
        if _CLIENT_CTX is None:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
            ctx.check_hostname = False
            ctx.verify_mode = ssl.CERT_NONE
            ctx.set_alpn_protocols(["http/1.1"])
            _CLIENT_CTX = ctx
        return _CLIENT_CTX


class _Deadline:
    def __init__(self, seconds: float):
        self.end = time.monotonic() + seconds

    def remaining(self) -> float:
        left = self.end - time.monotonic()
        if left <= 0:
            raise socket.timeout("total scan timeout exceeded")
        return left


def execute_scan(spec: ScanSpec, cfg: ScanConfig, pair_id: str | None = None) -> ScanOutcome:
    host, port = resolve_endpoint(spec.dst_ip, cfg)
    check_scope(host, cfg)
    deadline = _Deadline(cfg.total_timeout)
    cert = None
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        sock.settimeout(min(cfg.connect_timeout, deadline.remaining()))
        sock.connect((host, port))
        sock.settimeout(min(cfg.tls_timeout, deadline.remaining()))
        tls = _client_context().wrap_socket(sock, server_hostname=spec.sni)
        sock = tls
        der = tls.getpeercert(binary_form=True)
        if der:
            cert = CertSummary.from_der(der)
        tls.settimeout(deadline.remaining())
        tls.sendall(build_request(spec, cfg.user_agent))
        resp = http.client.HTTPResponse(tls, method="GET")
        resp.begin()
        header_names = tuple(resp.msg.keys())
        received = 0
        while True:
            tls.settimeout(deadline.remaining())
            chunk = resp.read(min(65536, cfg.max_body + 1 - received))
            if not chunk:
                break
            received += len(chunk)
            if received > cfg.max_body:
                return ScanOutcome(spec, None, header_names, cfg.max_body, cert,
                                   f"truncated: body exceeds max_body={cfg.max_body} (status {resp.status})", pair_id)
        return ScanOutcome(spec, resp.status, header_names, received, cert, None, pair_id)
    except (OSError, ssl.SSLError, http.client.HTTPException, ValueError) as exc:
        return ScanOutcome(spec, None, (), 0, cert, f"{type(exc).__name__}: {exc}", pair_id)
    finally:
        sock.close()


def run_scans(
    jobs: Sequence[tuple[str | None, ScanSpec]],
    cfg: ScanConfig,
    scan: Callable[[ScanSpec, ScanConfig, str | None], ScanOutcome] = execute_scan,
) -> dict[tuple[str | None, ScanRole], ScanOutcome]:
    """Run scans with bounded parallelism; results are keyed by (pair id, role)."""
    ip_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
    guard = threading.Lock()

    def one(job):
        pair_id, spec = job
        if not cfg.serialize_per_ip:
            return scan(spec, cfg, pair_id)
        with guard:
            lock = ip_locks[spec.dst_ip]
        with lock:
            return scan(spec, cfg, pair_id)

    for _, spec in jobs:
        check_scope(resolve_endpoint(spec.dst_ip, cfg)[0], cfg)
    with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
        outcomes = list(pool.map(one, jobs))
    return {(o.pair_id, o.spec.role): o for o in outcomes}


def prefilter(tuples: Sequence[DestinationTuple], cfg: ScanConfig) -> list[DestinationTuple]:
    """Keep only destinations whose plain (ip, sni=domain, host=domain) scan returns 200."""
    jobs = [(f"prefilter#{i}", baseline_spec(t)) for i, t in enumerate(tuples)]
    results = run_scans(jobs, cfg)
    return [t for (pid, spec), t in zip(jobs, tuples) if results[(pid, spec.role)].ok]


def needs_retry(outcome: ScanOutcome) -> bool:
    if outcome.transport_error is not None:
        return True
    return outcome.spec.role in BASELINES and outcome.status_code != 200


def retry_failed_sequential(
    outcomes: Sequence[ScanOutcome],
    cfg: ScanConfig,
    scan: Callable[[ScanSpec, ScanConfig, str | None], ScanOutcome] = execute_scan,
    sleep: Callable[[float], None] = time.sleep,
) -> list[ScanOutcome]:
    """Re-run failed scans one at a time.

    A retry that succeeds replaces the original outcome; otherwise the
    original is kept and the failed retry is attached to it.
    """
    result = list(outcomes)
    for i, outcome in enumerate(result):
        if not needs_retry(outcome):
            continue
        sleep(cfg.retry_delay)
        again = scan(outcome.spec, cfg, outcome.pair_id)
        if not needs_retry(again):
            result[i] = replace(again, attempt=outcome.attempt + 1)
        else:
            again = replace(again, attempt=outcome.attempt + 1)
            result[i] = replace(outcome, failed_retries=outcome.failed_retries + (again,))
    return result


def dump_outcomes(rows: Iterable[tuple[ScanPair, ScanOutcome]], out: IO[str]) -> None:
    for pair, outcome in rows:
        obj = outcome.to_json()
        obj["pair"] = pair.to_json()
        out.write(json.dumps(obj, sort_keys=True) + "\n")


def load_outcomes(source: Iterable[str]) -> list[tuple[ScanPair, ScanOutcome]]:
    rows = []
    for line in source:
        if line.strip():
            obj = json.loads(line)
            rows.append((ScanPair.from_json(obj["pair"]), ScanOutcome.from_json(obj)))
    return rows
