import io
import ipaddress
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frontscan.dns_ingest import (
    AsnEntry,
    AsnTable,
    DnsCnameObservation,
    IngestFormatError,
    SuffixList,
    asn_lookup,
    dump_cname_records,
    load_normalized_cname_records,
    parse_cname_records,
    parse_tls_records,
    registrable_domain,
)


def line(**kw):
    return json.dumps(kw)


# -- registrable domain -------------------------------------------------------

@pytest.mark.parametrize("fqdn,expected", [
    ("j.sni.global.fastly.net", "fastly.net"),
    ("j.sni.global.fastly.net.", "fastly.net"),
    ("example.com", "example.com"),
    ("foo.bar.co.uk", "bar.co.uk"),
    ("d1abcdefghijkl.cloudfront.net", "cloudfront.net"),
    ("bucket.s3.amazonaws.com", "amazonaws.com"),
    ("www.example.kawasaki.jp", "www.example.kawasaki.jp"),
    ("city.kawasaki.jp", "city.kawasaki.jp"),
    ("tenant01.sim.test", "sim.test"),
    ("WWW.Example.COM", "example.com"),
    ("co.uk", "co.uk"),
])
def test_registrable_domain_examples(fqdn, expected):
    assert registrable_domain(fqdn) == expected


@pytest.mark.parametrize("bad", ["", ".", "a..b.com"])
def test_registrable_domain_rejects_empty_labels(bad):
    with pytest.raises(ValueError):
        registrable_domain(bad)


def test_suffix_rules_wildcard_and_exception():
    psl = SuffixList(["// comment", "com", "*.ck", "!www.ck"])
    assert registrable_domain("a.b.c.ck", psl) == "b.c.ck"
    assert registrable_domain("x.www.ck", psl) == "www.ck"
    assert registrable_domain("a.b.com", psl) == "b.com"


labels = st.text("abcdefghijklmnopqrstuvwxyz0123456789-", min_size=1, max_size=12)
names = st.lists(labels, min_size=1, max_size=5).map(".".join).map(lambda n: n + ".com")


@given(names)
def test_registrable_domain_idempotent_and_suffix(fqdn):
    reg = registrable_domain(fqdn)
    assert registrable_domain(reg) == reg
    assert fqdn == reg or fqdn.endswith("." + reg)


# -- CNAME parsing -------------------------------------------------------------

def test_parse_reddit_fastly_row():
    recs = parse_cname_records([line(alias="www.reddit.com", cname="j.sni.global.fastly.net.", ip="151.101.1.140")])
    assert recs == [DnsCnameObservation("www.reddit.com", "j.sni.global.fastly.net", "fastly.net", "151.101.1.140")]


def test_parse_empty_stream():
    recs = parse_cname_records([])
    assert recs == [] and recs.malformed == 0


def test_three_valid_one_malformed():
    rows = [
        line(alias="a.example.org", cname="x.cdn.net", ip="192.0.2.1"),
        line(alias="b.example.org", cname="x.cdn.net", ip="192.0.2.2", ts=1660000000),
        line(alias="c.example.org", cname="y.cdn.net", ip="192.0.2.3"),
        "{not json",
    ]
    recs = parse_cname_records(rows)
    assert len(recs) == 3 and recs.malformed == 1


@pytest.mark.parametrize("row", [
    line(alias="a.com", cname="a.com", ip="192.0.2.1"),
    line(alias="a.com", cname="b.net", ip="999.0.0.1"),
    line(alias="a.com", ip="192.0.2.1"),
    line(alias="a.com", cname="b.net", ip="192.0.2.1", ts="yesterday"),
    "[1, 2]",
])
def test_malformed_rows_counted(row):
    good = [line(alias=f"h{i}.org", cname="c.cdn.net", ip="192.0.2.9") for i in range(3)]
    recs = parse_cname_records(good + [row])
    assert len(recs) == 3 and recs.malformed == 1


def test_ipv6_rows_skipped_not_malformed():
    recs = parse_cname_records([line(alias="a.com", cname="b.net", ip="2001:db8::1"),
                                line(alias="a.com", cname="b.net", ip="192.0.2.1")])
    assert len(recs) == 1 and recs.skipped_ipv6 == 1 and recs.malformed == 0


def test_mostly_garbage_is_format_error():
    with pytest.raises(IngestFormatError):
        parse_cname_records(["nope", "nope", line(alias="a.com", cname="b.net", ip="192.0.2.1")])


def test_observation_invariants_and_round_trip():
    rows = [line(alias=f"Site{i}.Example.ORG.", cname=f"e{i % 3}.edge.fastly.net.", ip=f"198.51.100.{i}", ts=i)
            for i in range(20)]
    recs = parse_cname_records(rows)
    for r in recs:
        assert r.alias_fqdn != r.canonical_fqdn
        assert r.canonical_fqdn.endswith(r.canonical_domain)
        ipaddress.IPv4Address(r.resolved_ip)
    buf = io.StringIO()
    dump_cname_records(recs, buf)
    assert load_normalized_cname_records(buf.getvalue().splitlines()) == list(recs)


def test_tls_records():
    recs = parse_tls_records([json.dumps({"sni": "A.com", "dst_ip": "192.0.2.1"}),
                              json.dumps({"sni": None, "dst_ip": "192.0.2.2"}),
                              json.dumps({"sni": "b.com", "dst_ip": "::1"})])
    assert [(r.server_name, r.dst_ip) for r in recs] == [("a.com", "192.0.2.1"), (None, "192.0.2.2")]
    assert recs.skipped_ipv6 == 1


# -- longest-prefix match --------------------------------------------------------

def entry(prefix, asn, name="X"):
    return AsnEntry(ipaddress.IPv4Network(prefix), asn, name)


def test_lpm_examples():
    db = AsnTable([entry("10.0.0.0/8", 1, "A"), entry("10.1.0.0/16", 2, "B")])
    assert asn_lookup("10.1.2.3", db).as_name == "B"
    assert asn_lookup("10.2.0.1", db).as_name == "A"
    assert asn_lookup("192.0.2.1", AsnTable([entry("10.0.0.0/8", 1)])) is None


def test_lpm_rejects_duplicates_and_bad_asn():
    with pytest.raises(ValueError):
        AsnTable([entry("10.0.0.0/8", 1), entry("10.0.0.0/8", 2)])
    with pytest.raises(ValueError):
        AsnTable([entry("10.0.0.0/8", 0)])


def linear_lpm(ip, entries):
    addr = ipaddress.IPv4Address(ip)
    best = None
    for e in entries:
        if addr in e.prefix and (best is None or e.prefix.prefixlen > best.prefix.prefixlen):
            best = e
    return best


def random_table(rng, n=300):
    seen, entries = set(), []
    while len(entries) < n:
        plen = rng.choice([8, 12, 16, 20, 24, 28, 32])
        net = ipaddress.IPv4Network((rng.getrandbits(32), plen), strict=False)
        if net not in seen:
            seen.add(net)
            entries.append(AsnEntry(net, len(entries) + 1, f"AS-{len(entries)}"))
    return entries


def test_lpm_matches_linear_oracle_on_1000_ips():
    rng = random.Random(20221025)
    entries = random_table(rng)
    db = AsnTable(entries)
    ips = []
    for i in range(1000):
        if i % 2:
            # half the probes land inside a known prefix
            net = rng.choice(entries).prefix
            ips.append(str(net.network_address + rng.randrange(net.num_addresses)))
        else:
            ips.append(str(ipaddress.IPv4Address(rng.getrandbits(32))))
    mismatches = [ip for ip in ips if asn_lookup(ip, db) != linear_lpm(ip, entries)]
    assert mismatches == []


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_lpm_property(seed, probe):
    entries = random_table(random.Random(seed), n=40)
    ip = str(ipaddress.IPv4Address(probe))
    assert AsnTable(entries).lookup(ip) == linear_lpm(ip, entries)


def test_asn_csv():
    db = AsnTable.from_csv(["prefix,asn,name", "151.101.0.0/16,54113,FASTLY", "2a04:4e40::/32,54113,FASTLY"])
    assert len(db) == 1 and db.lookup("151.101.1.140").label == "FASTLY"
    with pytest.raises(IngestFormatError):
        AsnTable.from_csv(["a,b", "1,2"])
