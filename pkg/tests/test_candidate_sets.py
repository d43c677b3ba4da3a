import io
import ipaddress
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frontscan.candidate_sets import (
    CandidateSet,
    DestinationTuple,
    GroupKey,
    GroupKind,
    ScanPair,
    build_groups,
    dump_sets,
    load_sets,
    rank_canonicals,
    sample_pairs,
)
from frontscan.dns_ingest import AsnEntry, DnsCnameObservation, TlsObservation


def obs(alias, cname, ip, domain=None):
    return DnsCnameObservation(alias, cname, domain or ".".join(cname.split(".")[-2:]), ip)


def test_single_canonical_domain_group():
    o = [obs(f"s{i}.example.org", f"e{i}.global.fastly.net", f"151.101.0.{i}") for i in range(3)]
    sets = build_groups(o, GroupKind.CNAME_DOMAIN)
    assert len(sets) == 1
    assert sets[0].key == GroupKey(GroupKind.CNAME_DOMAIN, "fastly.net")
    assert len(sets[0].tuples) == 3


def test_fqdn_grouping_splits_by_full_name():
    o = [obs("a.org", "x.fastly.net", "192.0.2.1"), obs("b.org", "y.fastly.net", "192.0.2.2")]
    assert [s.key.value for s in build_groups(o, GroupKind.CNAME_FQDN)] == ["x.fastly.net", "y.fastly.net"]


def test_as_grouping():
    a = AsnEntry(ipaddress.IPv4Network("192.0.2.0/25"), 64500, "ALPHA")
    b = AsnEntry(ipaddress.IPv4Network("192.0.2.128/25"), 64501, "BETA")
    rows = [(TlsObservation("a.com", "192.0.2.1"), a), (TlsObservation("b.com", "192.0.2.200"), b),
            (TlsObservation(None, "192.0.2.2"), a), (TlsObservation("c.com", "203.0.113.1"), None)]
    sets = build_groups(rows, GroupKind.AUTONOMOUS_SYSTEM)
    assert [str(s.key) for s in sets] == ["AUTONOMOUS_SYSTEM:ALPHA", "AUTONOMOUS_SYSTEM:BETA"]
    assert all(len(s.tuples) == 1 for s in sets)


def test_prevalence_order_and_ties():
    o = [obs("b.org", "x.cdn.net", "192.0.2.1")] * 3 + [obs("a.org", "x.cdn.net", "192.0.2.1"),
                                                        obs("c.org", "x.cdn.net", "192.0.2.1")]
    (cset,) = build_groups(o, GroupKind.CNAME_DOMAIN)
    assert [(t.domain, n) for t, n in cset.entries] == [("b.org", 3), ("a.org", 1), ("c.org", 1)]


def test_cap_at_100000_with_lexicographic_tiebreak():
    n = 100_001
    o = [obs(f"d{i:06d}.example", "edge.cdn.net", "192.0.2.1") for i in range(n)]
    (cset,) = build_groups(o, GroupKind.CNAME_DOMAIN)
    assert len(cset.entries) == 100_000
    # uniform prevalence: the lexicographically last domain is the one dropped
    assert cset.entries[-1][0].domain == "d099999.example"
    assert all(cnt == 1 for _, cnt in cset.entries)


def test_rank_canonicals():
    o = [obs("x.org", "A.cdn.net", "192.0.2.1", "cdn.net"), obs("y.org", "A.cdn.net", "192.0.2.2", "cdn.net"),
         obs("x.org", "A.cdn.net", "192.0.2.3", "cdn.net"), obs("z.org", "b.other.net", "192.0.2.4", "other.net")]
    assert rank_canonicals(o, GroupKind.CNAME_FQDN) == [("A.cdn.net", 2), ("b.other.net", 1)]
    assert rank_canonicals(o, GroupKind.CNAME_DOMAIN) == [("cdn.net", 2), ("other.net", 1)]
    with pytest.raises(ValueError):
        rank_canonicals(o, GroupKind.AUTONOMOUS_SYSTEM)


def test_rank_canonicals_fifty_record_fixture():
    o = []
    for i in range(50):
        cname = ["a.cdn1.net", "b.cdn1.net", "c.cdn2.net"][i % 3]
        o.append(obs(f"site{i % 20}.org", cname, f"192.0.2.{i}"))
    # hand tally of distinct aliases per canonical FQDN
    expected = Counter()
    for cname in ["a.cdn1.net", "b.cdn1.net", "c.cdn2.net"]:
        expected[cname] = len({f"site{i % 20}.org" for i in range(50) if ["a.cdn1.net", "b.cdn1.net",
                                                                            "c.cdn2.net"][i % 3] == cname})
    assert dict(rank_canonicals(o, GroupKind.CNAME_FQDN)) == dict(expected)
    assert rank_canonicals(o, GroupKind.CNAME_FQDN) == [("a.cdn1.net", 17), ("b.cdn1.net", 17), ("c.cdn2.net", 16)]


def make_set(n, kind=GroupKind.CNAME_DOMAIN, value="cdn.net"):
    return CandidateSet(GroupKey(kind, value),
                        [(DestinationTuple(f"t{i}.example", f"192.0.2.{i + 1}"), 1) for i in range(n)])


def test_sample_single_tuple_yields_nothing():
    assert sample_pairs(make_set(1)) == []


def test_sample_capped_by_availability():
    pairs = sample_pairs(make_set(3), pairs_per_tuple=5)
    per_target = Counter(p.target for p in pairs)
    assert len(pairs) == 6 and set(per_target.values()) == {2}


def test_sample_deterministic():
    assert sample_pairs(make_set(10), seed=42) == sample_pairs(make_set(10), seed=42)
    assert sample_pairs(make_set(10), seed=42) != sample_pairs(make_set(10), seed=43)


def test_sample_rejects_zero():
    with pytest.raises(ValueError):
        sample_pairs(make_set(3), pairs_per_tuple=0)


@settings(max_examples=60)
@given(st.integers(1, 25), st.integers(1, 8), st.integers(0, 10**6))
def test_sample_properties(n, k, seed):
    cset = make_set(n)
    pairs = sample_pairs(cset, k, seed)
    for p in pairs:
        assert p.target != p.front and p.target.domain != p.front.domain
        assert p.group == cset.key
        assert p.front in cset.tuples
    by_target = Counter(p.target for p in pairs)
    assert all(c == min(k, n - 1) for c in by_target.values())
    # no duplicate fronts per target
    assert len({(p.target, p.front) for p in pairs}) == len(pairs)
    assert len({p.pair_id for p in pairs}) == len(pairs)


def test_pair_validation():
    t = DestinationTuple("a.com", "192.0.2.1")
    with pytest.raises(ValueError):
        ScanPair("p", t, t, GroupKey(GroupKind.CNAME_DOMAIN, "x"))
    with pytest.raises(ValueError):
        DestinationTuple("a.com", "not-an-ip")


def test_sets_round_trip():
    sets = [make_set(4), make_set(2, GroupKind.CNAME_FQDN, "e.cdn.net")]
    buf = io.StringIO()
    dump_sets(sets, buf)
    assert load_sets(buf.getvalue().splitlines()) == sets
    p = sample_pairs(sets[0])[0]
    assert ScanPair.from_json(p.to_json()) == p
