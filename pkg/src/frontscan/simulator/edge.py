"""TLS-terminating CDN edge with configurable SNI/Host policies.

The edge speaks HTTP/1.1 only and answers every request itself from fixed
origin bodies, except for bindings with an ``upstream``, which are proxied
over plain HTTP.  Policies and bindings are immutable once started.
"""

from __future__ import annotations

import enum
import hashlib
import http.client
import logging
import socket
import socketserver
import ssl
import threading
import time
from dataclasses import dataclass, replace

from .ca import TestCA

log = logging.getLogger(__name__)

MAX_HEAD_BYTES = 64 * 1024
SERVER_NAME = "frontsim"
HOP_BY_HOP = {"connection", "keep-alive", "transfer-encoding", "content-length", "proxy-connection", "upgrade"}


class SimulatorError(RuntimeError):
    pass


class Routing(str, enum.Enum):
    BY_HOST = "BY_HOST"
    BY_SNI = "BY_SNI"


class SniHostBinding(str, enum.Enum):
    ENFORCED = "ENFORCED"
    IGNORED = "IGNORED"


class CertSelection(str, enum.Enum):
    BY_SNI = "BY_SNI"
    DEFAULT_ALWAYS = "DEFAULT_ALWAYS"


class MissingSni(str, enum.Enum):
    SERVE_DEFAULT = "SERVE_DEFAULT"
    REJECT = "REJECT"


class Preset(str, enum.Enum):
    STRICT = "STRICT"
    FRONTING_PERMISSIVE = "FRONTING_PERMISSIVE"
    FAKING_EDGE = "FAKING_EDGE"
    DOMAINLESS_OK = "DOMAINLESS_OK"
    WILDCARD_SHARED = "WILDCARD_SHARED"


@dataclass(frozen=True)
class EdgePolicy:
    routing: Routing = Routing.BY_HOST
    sni_host_binding: SniHostBinding = SniHostBinding.ENFORCED
    cert_selection: CertSelection = CertSelection.BY_SNI
    default_cert_domain: str | None = None
    missing_sni: MissingSni = MissingSni.REJECT
    # (match_host, new_host), applied after the SNI/Host binding check
    rewrite_rules: tuple[tuple[str, str], ...] = ()
    # bound domains directly under this zone share one wildcard certificate
    wildcard_zone: str | None = None
    rate_limit_per_second: int | None = None

    def __post_init__(self):
        if self.cert_selection is CertSelection.DEFAULT_ALWAYS and not self.default_cert_domain:
            raise ValueError("DEFAULT_ALWAYS certificate selection needs default_cert_domain")

    def to_json(self) -> dict:
        return {
            "routing": self.routing.value,
            "sni_host_binding": self.sni_host_binding.value,
            "cert_selection": self.cert_selection.value,
            "default_cert_domain": self.default_cert_domain,
            "missing_sni": self.missing_sni.value,
            "rewrite_rules": [list(r) for r in self.rewrite_rules],
            "wildcard_zone": self.wildcard_zone,
            "rate_limit_per_second": self.rate_limit_per_second,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EdgePolicy":
        return cls(
            routing=Routing(obj.get("routing", "BY_HOST")),
            sni_host_binding=SniHostBinding(obj.get("sni_host_binding", "ENFORCED")),
            cert_selection=CertSelection(obj.get("cert_selection", "BY_SNI")),
            default_cert_domain=obj.get("default_cert_domain"),
            missing_sni=MissingSni(obj.get("missing_sni", "REJECT")),
            rewrite_rules=tuple((a.lower(), b.lower()) for a, b in obj.get("rewrite_rules", ())),
            wildcard_zone=obj.get("wildcard_zone"),
            rate_limit_per_second=obj.get("rate_limit_per_second"),
        )


def preset_policy(name: Preset | str, zone: str = "sim.test") -> EdgePolicy:
    name = Preset(name)
    permissive = EdgePolicy(Routing.BY_HOST, SniHostBinding.IGNORED, CertSelection.BY_SNI,
                            missing_sni=MissingSni.SERVE_DEFAULT)
    if name is Preset.STRICT:
        return EdgePolicy(Routing.BY_HOST, SniHostBinding.ENFORCED, CertSelection.BY_SNI,
                          missing_sni=MissingSni.REJECT)
    if name in (Preset.FRONTING_PERMISSIVE, Preset.DOMAINLESS_OK):
        return permissive
    if name is Preset.FAKING_EDGE:
        return EdgePolicy(Routing.BY_HOST, SniHostBinding.IGNORED, CertSelection.DEFAULT_ALWAYS,
                          default_cert_domain=f"default.{zone}", missing_sni=MissingSni.SERVE_DEFAULT)
    return replace(permissive, wildcard_zone=zone)


def origin_body(domain: str, size: int) -> bytes:
    """Deterministic printable blob of exactly *size* bytes, seeded by the domain."""
    out = bytearray()
    counter = 0
    while len(out) < size:
        out += hashlib.sha256(f"{domain}:{counter}".encode()).hexdigest().encode()
        counter += 1
    return bytes(out[:size])


@dataclass(frozen=True)
class OriginBinding:
    domain: str
    body: bytes = b""
    extra_headers: tuple[tuple[str, str], ...] = ()
    status: int = 200
    # dynamic mode: body length varies by up to +/- jitter bytes per (sni, host)
    jitter: int = 0
    upstream: tuple[str, int] | None = None

    def __post_init__(self):
        if not 100 <= self.status <= 599:
            raise ValueError(f"status {self.status} out of range")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")

    def body_for(self, sni: str | None, host: str) -> bytes:
        if not self.jitter:
            return self.body
        h = int.from_bytes(hashlib.sha256(f"{sni or '-'}|{host}".encode()).digest()[:4], "big")
        delta = h % (2 * self.jitter + 1) - self.jitter
        if delta >= 0:
            return self.body + origin_body("pad:" + self.domain, delta)
        return self.body[:max(0, len(self.body) + delta)]


@dataclass
class EdgeLogEntry:
    sni: str | None
    host: str | None
    routed_to: str | None
    status: int
    user_agent: str | None = None
    request_len: int = 0


@dataclass
class _Request:
    method: str
    target: str
    headers: list[tuple[str, str]]
    raw_len: int

    def header(self, name: str) -> str | None:
        name = name.lower()
        for k, v in self.headers:
            if k.lower() == name:
                return v
        return None


def _read_head(stream) -> _Request:
    raw = b""
    while not raw.endswith(b"\r\n\r\n"):
        line = stream.readline(MAX_HEAD_BYTES)
        if not line:
            raise ConnectionError("client closed before sending a full request head")
        raw += line
        if len(raw) > MAX_HEAD_BYTES:
            raise ValueError("request head too large")
        if raw == b"\r\n":
            raw = b""
    lines = raw.decode("latin-1").split("\r\n")
    parts = lines[0].split(" ")
    if len(parts) != 3 or not parts[2].startswith("HTTP/1."):
        raise ValueError(f"bad request line {lines[0]!r}")
    headers = []
    for line in lines[1:]:
        if not line:
            continue
        name, sep, value = line.partition(":")
        if not sep:
            raise ValueError(f"bad header line {line!r}")
        headers.append((name.strip(), value.strip()))
    return _Request(parts[0], parts[1], headers, len(raw))


def _host_domain(value: str | None) -> str | None:
    if not value:
        return None
    host = value.strip().lower()
    if host.startswith("["):
        return host
    return host.rsplit(":", 1)[0].rstrip(".") if ":" in host else host.rstrip(".")


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = False
    block_on_close = False
    request_queue_size = 128


class Edge:
    """One listening edge node.  Use :func:`start_edge` to create."""

    def __init__(self, policy: EdgePolicy, bindings: list[OriginBinding], ca: TestCA,
                 host: str = "127.0.0.1", port: int = 0, name: str = "edge"):
        self.policy = policy
        self.name = name
        self.ca = ca
        self.bindings = {b.domain.lower(): b for b in bindings}
        self.log: list[EdgeLogEntry] = []
        self.online = True
        self._log_lock = threading.Lock()
        self._rate_window = (0, 0)
        self._contexts: dict[str, ssl.SSLContext] = {}
        self._default_ctx = self._make_default_context()
        for domain in self.bindings:
            self._context_for(domain)
        try:
            self._server = _Server((host, port), self._handler_class())
        except OSError as exc:
            raise SimulatorError(f"cannot listen on {host}:{port}: {exc}") from exc
        self.address: tuple[str, int] = self._server.server_address[:2]
        self._thread = threading.Thread(target=self._server.serve_forever, name=f"edge-{name}", daemon=True)
        self._thread.start()

    # -- certificates --------------------------------------------------------

    def _server_context(self, names) -> ssl.SSLContext:
        cert, key = self.ca.leaf(names)
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        ctx.load_cert_chain(cert, key)
        ctx.set_alpn_protocols(["http/1.1"])
        return ctx

    def _cert_names(self, domain: str) -> tuple[str, ...]:
        zone = self.policy.wildcard_zone
        if zone and domain.endswith("." + zone) and "." not in domain[: -len(zone) - 1]:
            return (f"*.{zone}", zone)
        return (domain,)

    def _make_default_context(self) -> ssl.SSLContext:
        if self.policy.default_cert_domain:
            names = self._cert_names(self.policy.default_cert_domain.lower())
        elif self.policy.wildcard_zone:
            names = (f"*.{self.policy.wildcard_zone}", self.policy.wildcard_zone)
        else:
            names = ("default-edge.invalid",)
        ctx = self._server_context(names)
        ctx.sni_callback = self._on_sni
        return ctx

    def _context_for(self, domain: str) -> ssl.SSLContext:
        names = self._cert_names(domain)
        if names not in self._contexts:
            self._contexts[names] = self._server_context(names)
        return self._contexts[names]

    def _on_sni(self, sslsock, server_name, _ctx):
        sslsock.sim_sni = server_name.lower() if server_name else None
        if self.policy.cert_selection is CertSelection.DEFAULT_ALWAYS:
            return None
        if server_name and server_name.lower() in self.bindings:
            sslsock.context = self._context_for(server_name.lower())
        return None

    # -- request handling ----------------------------------------------------

    def _rate_limited(self) -> bool:
        limit = self.policy.rate_limit_per_second
        if not limit:
            return False
        with self._log_lock:
            now = int(time.monotonic())
            window, count = self._rate_window
            if window != now:
                window, count = now, 0
            count += 1
            self._rate_window = (window, count)
            return count > limit

    def route(self, sni: str | None, req: _Request) -> tuple[int, str | None]:
        """Decide (status, bound domain) for a request; status 200 means serve the binding."""
        host = _host_domain(req.header("Host"))
        if host is None:
            return 400, None
        if sni is None and self.policy.missing_sni is MissingSni.REJECT:
            return 400, None
        if self._rate_limited():
            return 403, None
        if self.policy.sni_host_binding is SniHostBinding.ENFORCED and sni is not None and host != sni:
            return 421, None
        for match, new in self.policy.rewrite_rules:
            if host == match:
                host = new
                break
        target = host if self.policy.routing is Routing.BY_HOST or sni is None else sni
        if target not in self.bindings:
            return 403, None
        return 200, target

    def _respond(self, stream, status: int, headers: list[tuple[str, str]], body: bytes) -> None:
        reason = http.client.responses.get(status, "Unknown")
        head = [f"HTTP/1.1 {status} {reason}"] + [f"{k}: {v}" for k, v in headers]
        stream.sendall(("\r\n".join(head) + "\r\n\r\n").encode("latin-1") + body)

    def _error(self, stream, status: int) -> None:
        body = f"{status} {http.client.responses.get(status, '')}\n".encode()
        self._respond(stream, status, [("Server", SERVER_NAME), ("Content-Type", "text/plain"),
                                       ("Content-Length", str(len(body))), ("Connection", "close")], body)

    def _proxy(self, binding: OriginBinding, req: _Request, routed_host: str):
        conn = http.client.HTTPConnection(*binding.upstream, timeout=15)
        try:
            conn.putrequest(req.method, req.target, skip_host=True, skip_accept_encoding=True)
            for name, value in req.headers:
                if name.lower() == "host":
                    value = routed_host
                if name.lower() not in HOP_BY_HOP:
                    conn.putheader(name, value)
            conn.putheader("Connection", "close")
            conn.endheaders()
            resp = conn.getresponse()
            body = resp.read()
            headers = [(k, v) for k, v in resp.getheaders() if k.lower() not in HOP_BY_HOP]
            return resp.status, headers, body
        finally:
            conn.close()

    def _serve(self, tls) -> None:
        stream = tls.makefile("rb")
        try:
            req = _read_head(stream)
        except (ValueError, ConnectionError, OSError):
            return
        sni = getattr(tls, "sim_sni", None)
        status, target = self.route(sni, req)
        entry = EdgeLogEntry(sni, _host_domain(req.header("Host")), target, status,
                             req.header("User-Agent"), req.raw_len)
        if status != 200:
            self._error(tls, status)
        else:
            binding = self.bindings[target]
            if binding.upstream is not None:
                try:
                    up_status, up_headers, body = self._proxy(binding, req, target)
                except OSError:
                    up_status, up_headers, body = 502, [], b"upstream unavailable\n"
                entry.status = up_status
                self._respond(tls, up_status, [("Server", SERVER_NAME)] + up_headers
                              + [("Content-Length", str(len(body))), ("Connection", "close")], body)
            elif binding.status != 200:
                entry.status = binding.status
                self._error(tls, binding.status)
            else:
                body = binding.body_for(sni, req.header("Host") or "")
                headers = [("Server", SERVER_NAME), ("Content-Type", "text/html"),
                           ("Content-Length", str(len(body)))]
                headers += list(binding.extra_headers) + [("Connection", "close")]
                self._respond(tls, 200, headers, body)
        with self._log_lock:
            self.log.append(entry)

    def _handler_class(self):
        edge = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                sock = self.request
                if not edge.online:
                    sock.close()
                    return
                sock.settimeout(10)
                try:
                    tls = edge._default_ctx.wrap_socket(sock, server_side=True)
                except (ssl.SSLError, OSError) as exc:
                    log.debug("handshake failed on %s: %s", edge.name, exc)
                    return
                try:
                    edge._serve(tls)
                except OSError as exc:
                    log.debug("connection error on %s: %s", edge.name, exc)
                finally:
                    try:
                        tls.shutdown(socket.SHUT_RDWR)
                    except OSError:
                        pass
                    tls.close()

        return Handler

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def start_edge(policy: EdgePolicy, bindings: list[OriginBinding], ca: TestCA,
               host: str = "127.0.0.1", port: int = 0, name: str = "edge") -> Edge:
    return Edge(policy, bindings, ca, host=host, port=port, name=name)
