"""Command-line entry point: ingest, build-sets, scan, classify, report, simulate, demo, pipeline.

Every artifact is written with sorted keys in a stable order and carries no
timestamps or ephemeral ports, so two runs with the same inputs and seed
produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import candidate_sets as cs
from . import classifier, dns_ingest, report, scan_engine
from .simulator.edge import SimulatorError
from .simulator.scenario import ScenarioError, Simulation, load_scenario

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("frontscan")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
REPORT_EXT = {"markdown": "md", "csv": "csv", "json": "json"}


class UsageError(Exception):
    """Bad arguments or inputs the user must fix; exits with status 2."""


# -- helpers ----------------------------------------------------------------

def _read_lines(path: str | Path) -> list[str]:
    try:
        return Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _write(path: str | Path | None, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _jsonl(objs) -> str:
    return "".join(json.dumps(o, sort_keys=True) + "\n" for o in objs)


def _hostport(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {value!r}")
    return host, int(port)


def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _load_address_map(path: str | None) -> dict[str, tuple[str, int]]:
    if not path:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read address map {path}: {exc}") from exc
    return {ip: _hostport(hp) for ip, hp in obj.items()}


def _scan_config(args, address_map: dict | None = None) -> scan_engine.ScanConfig:
    allowlist = scan_engine.load_allowlist(_read_lines(args.allowlist)) if args.allowlist else []
    amap = dict(_load_address_map(getattr(args, "address_map", None)))
    amap.update(address_map or {})
    return scan_engine.ScanConfig(
        port=args.port,
        connect_timeout=args.timeout_connect,
        tls_timeout=args.timeout_connect,
        total_timeout=args.timeout_total,
        max_body=args.max_body,
        user_agent=args.user_agent,
        parallelism=args.parallelism,
        serialize_per_ip=args.serialize_per_ip,
        retry_delay=args.retry_delay,
        target=args.target,
        address_map=amap,
        allowlist=allowlist,
        i_own_this_infrastructure=args.i_own_this_infrastructure,
    )


def _load_observations(args):
    """CNAME observations, or (TLS, ASN) pairs for AS grouping."""
    kind = cs.GroupKind(args.kind)
    if kind is cs.GroupKind.AUTONOMOUS_SYSTEM:
        if not args.asn:
            raise UsageError("--kind autonomous_system needs --asn")
        table = dns_ingest.AsnTable.from_csv(_read_lines(args.asn))
        tls = dns_ingest.parse_tls_records(_read_lines(args.input))
        return kind, [(t, table.lookup(t.dst_ip)) for t in tls]
    return kind, dns_ingest.load_normalized_cname_records(_read_lines(args.input))


# -- stages -----------------------------------------------------------------

def plan_pairs(sets, cfg, pairs_per_tuple: int, seed: int, do_prefilter: bool = True):
    """Prefilter distinct tuples, restrict the sets to survivors, and sample pairs."""
    if do_prefilter:
        distinct = sorted({t for s in sets for t in s.tuples})
        alive = set(scan_engine.prefilter(distinct, cfg))
        log.info("prefilter kept %d of %d destinations", len(alive), len(distinct))
        sets = [s.restrict(alive) for s in sets]
    pairs = [p for s in sets for p in cs.sample_pairs(s, pairs_per_tuple, seed)]
    return sets, pairs


def execute_pairs(pairs, cfg):
    """Run the five-scan matrix for each pair, then retry failures one at a time."""
    jobs = [(p.pair_id, spec) for p in pairs for spec in scan_engine.plan_scans(p)]
    results = scan_engine.run_scans(jobs, cfg)
    ordered = [results[(pid, spec.role)] for pid, spec in jobs]
    ordered = scan_engine.retry_failed_sequential(ordered, cfg)
    by_id = {p.pair_id: p for p in pairs}
    return [(by_id[o.pair_id], o) for o in ordered]


def _outcomes_text(rows) -> str:
    objs = []
    for pair, outcome in rows:
        obj = outcome.to_json()
        obj["pair"] = pair.to_json()
        objs.append(obj)
    return _jsonl(objs)


def _report_text(verdicts, fmt) -> str:
    reports, suppressed = report.aggregate_all(verdicts)
    return report.render(reports, fmt, suppressed)


# -- subcommands ------------------------------------------------------------

def cmd_ingest(args) -> int:
    lines = _read_lines(args.input)
    if args.record_type == "tls":
        recs = dns_ingest.parse_tls_records(lines)
        out = _jsonl({"sni": r.server_name, "ip": r.dst_ip} for r in recs)
    else:
        recs = dns_ingest.parse_cname_records(lines)
        out = _jsonl(r.to_json() for r in sorted(recs, key=lambda r: (r.alias_fqdn, r.resolved_ip,
                                                                      r.canonical_fqdn, r.observed_at or 0)))
    if recs.malformed or recs.skipped_ipv6:
        log.warning("skipped %d malformed and %d IPv6 records", recs.malformed, recs.skipped_ipv6)
    _write(args.output, out)
    return EXIT_OK


def cmd_build_sets(args) -> int:
    kind, observations = _load_observations(args)
    sets = cs.build_groups(observations, kind, args.max_tuples)
    _write(args.output, _jsonl(s.to_json() for s in sets))
    return EXIT_OK


def cmd_scan(args) -> int:
    sets = cs.load_sets(_read_lines(args.sets))
    cfg = _scan_config(args)
    _, pairs = plan_pairs(sets, cfg, args.pairs_per_tuple, args.seed, not args.no_prefilter)
    if args.pairs_output:
        _write(args.pairs_output, _jsonl(p.to_json() for p in pairs))
    _write(args.output, _outcomes_text(execute_pairs(pairs, cfg)))
    return EXIT_OK


def cmd_classify(args) -> int:
    rows = scan_engine.load_outcomes(_read_lines(args.input))
    _write(args.output, _jsonl(v.to_json() for v in classifier.classify_all(rows)))
    return EXIT_OK


def cmd_report(args) -> int:
    verdicts = classifier.load_verdicts(_read_lines(args.input))
    text = _report_text(verdicts, args.format)
    if args.popularity:
        if not args.cnames:
            raise UsageError("--popularity needs --cnames")
        reports, _ = report.aggregate_all(verdicts)
        support = {r.key.value: r.fronting_pct for r in reports if r.key.kind is cs.GroupKind.CNAME_DOMAIN}
        cname_map = {o.alias_fqdn: o.canonical_domain
                     for o in dns_ingest.load_normalized_cname_records(_read_lines(args.cnames))}
        est = report.popularity_estimate(report.load_popularity_csv(_read_lines(args.popularity)), cname_map, support)
        _write(args.estimate_output, json.dumps(est.to_json(), indent=2, sort_keys=True) + "\n")
    _write(args.output, text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    with Simulation(scenario, args.state_dir) as sim:
        amap = {ip: f"{h}:{p}" for ip, (h, p) in sorted(sim.address_map.items())}
        if args.address_map_out:
            _write(args.address_map_out, json.dumps(amap, indent=2, sort_keys=True) + "\n")
        if args.cnames_out:
            _write(args.cnames_out, "".join(line + "\n" for line in sim.cname_lines()))
        for ip, hp in amap.items():
            print(f"{ip} -> {hp}", flush=True)
        if args.ca_out:
            _write(args.ca_out, sim.ca.cert_path.read_text())
        try:
            if args.duration is None:
                while True:
                    time.sleep(3600)
            time.sleep(args.duration)
        except KeyboardInterrupt:
            pass
    return EXIT_OK


def cmd_demo(args) -> int:
    from .simulator.demo import start_demo_environment

    scenario = load_scenario(args.scenario)
    policy = scenario.edges[0].policy
    with start_demo_environment(policy, zone=scenario.zone) as env:
        transcript = env.run()
    _write(args.output, json.dumps(transcript.to_json(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def run_pipeline(out_dir: Path, cfg: scan_engine.ScanConfig, observations_lines: list[str], kind: cs.GroupKind,
                 pairs_per_tuple: int, seed: int, max_tuples: int = cs.MAX_TUPLES_PER_SET,
                 fmt: str = "markdown", do_prefilter: bool = True) -> list[classifier.PairVerdict]:
    """Ingest, group, prefilter, sample, scan, retry, classify, aggregate and render.

    Writes observations.jsonl, sets.jsonl, pairs.jsonl, outcomes.jsonl,
    verdicts.jsonl and report.<ext> into *out_dir*.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    recs = dns_ingest.parse_cname_records(observations_lines)
    recs = sorted(recs, key=lambda r: (r.alias_fqdn, r.resolved_ip, r.canonical_fqdn, r.observed_at or 0))
    _write(out_dir / "observations.jsonl", _jsonl(r.to_json() for r in recs))
    sets = cs.build_groups(recs, kind, max_tuples)
    sets, pairs = plan_pairs(sets, cfg, pairs_per_tuple, seed, do_prefilter)
    _write(out_dir / "sets.jsonl", _jsonl(s.to_json() for s in sets))
    _write(out_dir / "pairs.jsonl", _jsonl(p.to_json() for p in pairs))
    rows = execute_pairs(pairs, cfg)
    _write(out_dir / "outcomes.jsonl", _outcomes_text(rows))
    verdicts = classifier.classify_all(rows)
    _write(out_dir / "verdicts.jsonl", _jsonl(v.to_json() for v in verdicts))
    _write(out_dir / f"report.{REPORT_EXT[fmt]}", _report_text(verdicts, fmt))
    return verdicts


def cmd_pipeline(args) -> int:
    kind = cs.GroupKind(args.kind)
    if kind is cs.GroupKind.AUTONOMOUS_SYSTEM:
        raise UsageError("pipeline groups by CNAME; use build-sets and scan for AS grouping")
    out_dir = Path(args.out_dir)
    if args.scenario:
        with Simulation(load_scenario(args.scenario), args.state_dir) as sim:
            cfg = _scan_config(args, sim.address_map)
            run_pipeline(out_dir, cfg, sim.cname_lines(), kind, args.pairs_per_tuple, args.seed,
                         args.max_tuples, args.format, not args.no_prefilter)
    elif args.input:
        cfg = _scan_config(args)
        run_pipeline(out_dir, cfg, _read_lines(args.input), kind, args.pairs_per_tuple, args.seed,
                     args.max_tuples, args.format, not args.no_prefilter)
    else:
        raise UsageError("pipeline needs --scenario or --input")
    sys.stdout.write((out_dir / f"report.{REPORT_EXT[args.format]}").read_text())
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

def _add_scan_knobs(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scan")
    g.add_argument("--seed", type=int, default=0, help="seed for pair sampling")
    g.add_argument("--pairs-per-tuple", type=_positive_int, default=cs.DEFAULT_PAIRS_PER_TUPLE)
    g.add_argument("--parallelism", type=_positive_int, default=32)
    g.add_argument("--timeout-connect", type=float, default=5.0, help="TCP connect and TLS handshake timeout (s)")
    g.add_argument("--timeout-total", type=float, default=30.0, help="per-scan wall-clock budget (s)")
    g.add_argument("--user-agent", default=scan_engine.CHROME_104_WIN10_UA)
    g.add_argument("--retry-delay", type=float, default=1.0, help="pause before each sequential retry (s)")
    g.add_argument("--max-body", type=_positive_int, default=8 * 1024 * 1024)
    g.add_argument("--port", type=int, default=443)
    g.add_argument("--serialize-per-ip", action="store_true", help="at most one in-flight scan per destination IP")
    g.add_argument("--no-prefilter", action="store_true")
    g.add_argument("--target", type=_hostport, help="connect every scan to HOST:PORT instead of the tuple's IP")
    g.add_argument("--address-map", help="JSON object mapping destination IP to HOST:PORT")
    g.add_argument("--allowlist", help="file of IPv4 networks that may be contacted besides loopback")
    g.add_argument("--i-own-this-infrastructure", action="store_true",
                   help="allow any destination; only for infrastructure you operate")


def _add_kind(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", choices=[k.value for k in cs.GroupKind], default=cs.GroupKind.CNAME_DOMAIN.value)
    p.add_argument("--max-tuples", type=_positive_int, default=cs.MAX_TUPLES_PER_SET)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="frontscan", description="Domain fronting measurement toolkit.")
    parser.add_argument("--config", help="TOML file of option defaults; flags override it")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["ingest"] = sub.add_parser("ingest", help="normalize passive DNS or TLS observations")
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--output", "-o")
    p.add_argument("--record-type", choices=["cname", "tls"], default="cname")
    p.set_defaults(func=cmd_ingest)

    p = subs["build-sets"] = sub.add_parser("build-sets", help="group observations into candidate sets")
    p.add_argument("--input", "-i", required=True, help="normalized CNAME JSONL, or TLS JSONL for AS grouping")
    p.add_argument("--asn", help="prefix,asn,name CSV for AS grouping")
    p.add_argument("--output", "-o")
    _add_kind(p)
    p.set_defaults(func=cmd_build_sets)

    p = subs["scan"] = sub.add_parser("scan", help="prefilter, sample pairs and run the five-scan matrix")
    p.add_argument("--sets", required=True)
    p.add_argument("--output", "-o")
    p.add_argument("--pairs-output")
    _add_scan_knobs(p)
    p.set_defaults(func=cmd_scan)

    p = subs["classify"] = sub.add_parser("classify", help="turn scan outcomes into per-pair verdicts")
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_classify)

    p = subs["report"] = sub.add_parser("report", help="aggregate verdicts into support tables")
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--output", "-o")
    p.add_argument("--format", choices=[f.value for f in report.Format], default="markdown")
    p.add_argument("--popularity", help="rank,domain CSV for the exposure estimate")
    p.add_argument("--cnames", help="normalized CNAME JSONL mapping popular domains to canonical domains")
    p.add_argument("--estimate-output")
    p.set_defaults(func=cmd_report)

    p = subs["simulate"] = sub.add_parser("simulate", help="run simulator edges on loopback")
    p.add_argument("--scenario", required=True, help="scenario JSON file or builtin name")
    p.add_argument("--state-dir")
    p.add_argument("--address-map-out")
    p.add_argument("--cnames-out")
    p.add_argument("--ca-out")
    p.add_argument("--duration", type=float, help="seconds to stay up (default: until interrupted)")
    p.set_defaults(func=cmd_simulate)

    p = subs["demo"] = sub.add_parser("demo", help="run the Host-rewrite interception demo locally")
    p.add_argument("--scenario", default="permissive", help="scenario whose first edge policy hosts the demo")
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_demo)

    p = subs["pipeline"] = sub.add_parser("pipeline", help="end-to-end run against a scenario or an input file")
    p.add_argument("--scenario", help="simulator scenario (file or builtin name)")
    p.add_argument("--input", "-i", help="raw CNAME JSONL when scanning allowlisted infrastructure")
    p.add_argument("--state-dir")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", choices=[f.value for f in report.Format], default="markdown")
    _add_kind(p)
    _add_scan_knobs(p)
    p.set_defaults(func=cmd_pipeline)
    return parser, subs


def _apply_config(path: str, parser, subs, command: str) -> None:
    try:
        with open(path, "rb") as fh:
            conf = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    flat = {k: v for k, v in conf.items() if not isinstance(v, dict)}
    # a [<command>] table overrides top-level keys for that subcommand
    flat.update(conf.get(command, {}))
    target = subs[command]
    known = {a.dest: a for a in target._actions}
    defaults = {}
    for key, value in flat.items():
        dest = key.replace("-", "_")
        if dest not in known:
            continue
        action = known[dest]
        if action.type is not None and not isinstance(value, bool):
            try:
                value = action.type(str(value))
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config {key}: {exc}") from exc
        defaults[dest] = value
    target.set_defaults(**defaults)
    for a in target._actions:
        if a.dest in defaults:
            a.required = False


def main(argv: list[str] | None = None) -> int:
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if a in subs), None)
    try:
        if known.config and command:
            _apply_config(known.config, parser, subs, command)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"frontscan: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ScenarioError, scan_engine.ScopeError, ValueError) as exc:
        if isinstance(exc, dns_ingest.IngestFormatError):
            print(f"frontscan: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"frontscan: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SimulatorError, OSError) as exc:
        print(f"frontscan: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
