"""Scenario files: which edges exist, their policies, and which tenant domains they host.

Every edge binds every tenant domain unless it lists ``bind`` explicitly.
A tenant's DNS placement (its IP and CNAME) is the edge named in its
``edge`` field, so a group can span edges with different policies.
"""

from __future__ import annotations

import ipaddress
import json
from dataclasses import dataclass, field
from pathlib import Path

from .ca import TestCA
from .edge import Edge, EdgePolicy, OriginBinding, Preset, origin_body, preset_policy, start_edge

DEFAULT_ZONE = "sim.test"
DEFAULT_CDN_ZONE = "sim-cdn.test"

BUILTIN = {
    "strict": Preset.STRICT,
    "permissive": Preset.FRONTING_PERMISSIVE,
    "faking": Preset.FAKING_EDGE,
    "domainless": Preset.DOMAINLESS_OK,
    "wildcard": Preset.WILDCARD_SHARED,
}


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class EdgeConfig:
    name: str
    ip: str
    policy: EdgePolicy
    port: int = 0
    bind: tuple[str, ...] | None = None


@dataclass(frozen=True)
class TenantConfig:
    domain: str
    edge: str
    body_size: int = 1000
    status: int = 200
    jitter: int = 0
    extra_headers: tuple[tuple[str, str], ...] = ()

    def binding(self) -> OriginBinding:
        return OriginBinding(self.domain, origin_body(self.domain, self.body_size),
                             self.extra_headers, self.status, self.jitter)


@dataclass
class Scenario:
    name: str
    edges: list[EdgeConfig]
    tenants: list[TenantConfig]
    zone: str = DEFAULT_ZONE
    cdn_zone: str = DEFAULT_CDN_ZONE

    def __post_init__(self):
        names = [e.name for e in self.edges]
        if len(set(names)) != len(names):
            raise ScenarioError("duplicate edge names")
        ips = [e.ip for e in self.edges]
        if len(set(ips)) != len(ips):
            raise ScenarioError("duplicate edge IPs")
        domains = [t.domain for t in self.tenants]
        if len(set(domains)) != len(domains):
            raise ScenarioError("duplicate tenant domains")
        for t in self.tenants:
            if t.edge not in names:
                raise ScenarioError(f"tenant {t.domain} placed on unknown edge {t.edge!r}")

    def edge(self, name: str) -> EdgeConfig:
        return next(e for e in self.edges if e.name == name)

    def tenant_ip(self, tenant: TenantConfig) -> str:
        return self.edge(tenant.edge).ip

    def cname_records(self) -> list[dict]:
        """Passive-DNS style CNAME rows for the tenants, in the ingest JSONL shape."""
        return [{"alias": t.domain, "cname": f"{t.edge}.{self.cdn_zone}.", "ip": self.tenant_ip(t)}
                for t in self.tenants]

    def bindings_for(self, edge: EdgeConfig) -> list[OriginBinding]:
        bound = set(edge.bind) if edge.bind is not None else None
        return [t.binding() for t in self.tenants if bound is None or t.domain in bound]

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "zone": self.zone,
            "cdn_zone": self.cdn_zone,
            "edges": [
                {"name": e.name, "ip": e.ip, "port": e.port, "policy": e.policy.to_json(),
                 **({"bind": list(e.bind)} if e.bind is not None else {})}
                for e in self.edges
            ],
            "domains": [
                {"domain": t.domain, "edge": t.edge, "body_size": t.body_size, "status": t.status,
                 "jitter": t.jitter, "extra_headers": [list(h) for h in t.extra_headers]}
                for t in self.tenants
            ],
        }


def _policy_from(obj, zone: str) -> EdgePolicy:
    if isinstance(obj, str):
        return preset_policy(obj, zone)
    if not isinstance(obj, dict):
        raise ScenarioError(f"policy must be a preset name or an object, got {obj!r}")
    if "preset" in obj:
        base = preset_policy(obj["preset"], zone).to_json()
        base.update({k: v for k, v in obj.items() if k != "preset"})
        obj = base
    return EdgePolicy.from_json(obj)


def scenario_from_json(obj: dict) -> Scenario:
    try:
        zone = obj.get("zone", DEFAULT_ZONE)
        edges = []
        for e in obj["edges"]:
            ipaddress.IPv4Address(e["ip"])
            bind = e.get("bind")
            edges.append(EdgeConfig(e["name"], e["ip"], _policy_from(e["policy"], zone),
                                    int(e.get("port", 0)), tuple(bind) if bind is not None else None))
        tenants = [
            TenantConfig(
                domain=t["domain"].lower(),
                edge=t["edge"],
                body_size=int(t.get("body_size", 1000)),
                status=int(t.get("status", 200)),
                jitter=int(t.get("jitter", 0)),
                extra_headers=tuple((str(a), str(b)) for a, b in t.get("extra_headers", ())),
            )
            for t in obj["domains"]
        ]
        return Scenario(obj.get("name", "scenario"), edges, tenants, zone, obj.get("cdn_zone", DEFAULT_CDN_ZONE))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"malformed scenario: {exc}") from exc


def tenant_domain(i: int, zone: str = DEFAULT_ZONE) -> str:
    return f"tenant{i:02d}.{zone}"


def builtin_scenario(name: str, n_domains: int = 8, zone: str = DEFAULT_ZONE) -> Scenario:
    """Single-edge scenarios named after the presets, plus ``mixed``.

    ``mixed`` splits the tenants evenly between a permissive and a strict
    edge; both edges host every tenant.
    """
    if name == "mixed":
        edges = [EdgeConfig("edge-a", "198.51.100.10", preset_policy(Preset.FRONTING_PERMISSIVE, zone)),
                 EdgeConfig("edge-b", "198.51.100.20", preset_policy(Preset.STRICT, zone))]
        placement = ["edge-a" if i < n_domains // 2 else "edge-b" for i in range(n_domains)]
    elif name in BUILTIN:
        edges = [EdgeConfig("edge-a", "198.51.100.10", preset_policy(BUILTIN[name], zone))]
        placement = ["edge-a"] * n_domains
    else:
        raise ScenarioError(f"unknown builtin scenario {name!r}; choose from {sorted(BUILTIN) + ['mixed']}")
    tenants = [TenantConfig(tenant_domain(i, zone), placement[i], body_size=1000 + 100 * i)
               for i in range(n_domains)]
    return Scenario(name, edges, tenants, zone)


def load_scenario(ref: str | Path) -> Scenario:
    """Load a scenario from a JSON file, or by builtin name."""
    path = Path(ref)
    if path.suffix == ".json" or path.exists():
        try:
            obj = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read scenario {ref}: {exc}") from exc
        if not isinstance(obj, dict):
            raise ScenarioError("scenario file must contain a JSON object")
        return scenario_from_json(obj)
    return builtin_scenario(str(ref))


@dataclass
class Simulation:
    """All edges of a scenario, running on loopback."""

    scenario: Scenario
    state_dir: str | Path | None = None
    host: str = "127.0.0.1"
    edges: dict[str, Edge] = field(default_factory=dict)

    def __post_init__(self):
        self.ca = TestCA(self.state_dir)
        try:
            for cfg in self.scenario.edges:
                self.edges[cfg.name] = start_edge(cfg.policy, self.scenario.bindings_for(cfg), self.ca,
                                                  host=self.host, port=cfg.port, name=cfg.name)
        except Exception:
            self.stop()
            raise

    @property
    def address_map(self) -> dict[str, tuple[str, int]]:
        return {cfg.ip: self.edges[cfg.name].address for cfg in self.scenario.edges}

    def cname_lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in self.scenario.cname_records()]

    def stop(self) -> None:
        for edge in self.edges.values():
            edge.stop()
        self.edges.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()
