import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from frontscan.classifier import (
    PairVerdict,
    PruneReason,
    Reason,
    Status,
    cert_covers,
    classify_all,
    evaluate_pair,
    judge,
    load_verdicts,
)
from frontscan.scan_engine import CertSummary, ScanOutcome

import oracles
from classifier_grid import PAIR, SPECS, outcome, run_grid

S3 = CertSummary(None, ("*.s3.amazonaws.com", "s3.amazonaws.com"))


@pytest.mark.parametrize("domain,expected", [
    ("bucket.s3.amazonaws.com", True),
    ("s3.amazonaws.com", True),
    ("a.b.s3.amazonaws.com", False),
    (".s3.amazonaws.com", False),
])
def test_wildcard_is_single_label(domain, expected):
    assert cert_covers(S3, domain) is expected


def test_exact_san_and_cn():
    assert cert_covers(CertSummary(None, ("example.com",)), "example.com")
    assert cert_covers(CertSummary("Example.com", ()), "example.com")
    assert cert_covers(CertSummary("*.example.com", ()), "www.example.com")
    assert not cert_covers(CertSummary("example.com", ("example.com",)), "other.com")


def o(role, status=200, length=1000, headers=oracles.H0, cert=None, err=None):
    if err:
        return ScanOutcome(SPECS[role], None, (), 0, cert, err)
    return ScanOutcome(SPECS[role], status, headers, length, cert)


def five(b0=None, b1=None, fr=None, fk=None, dl=None):
    return [b0 or o("BASELINE_0", length=1000), b1 or o("BASELINE_1", length=500, headers=oracles.H1),
            fr or o("FRONTING", 403), fk or o("FAKING", 403), dl or o("DOMAINLESS", 403)]


def test_exact_length():
    v = evaluate_pair(PAIR, five(fr=o("FRONTING", length=1000)))
    assert (v.fronting.status, v.fronting.reason) == (Status.SUCCESS, Reason.EXACT_LENGTH)


def test_length_tolerance():
    v = evaluate_pair(PAIR, five(fr=o("FRONTING", length=1040, headers=oracles.HX)))
    assert (v.fronting.status, v.fronting.reason) == (Status.SUCCESS, Reason.LENGTH_TOLERANCE)


def test_b1_band_blocks_tolerance():
    b1 = o("BASELINE_1", length=980, headers=oracles.H1)
    v = evaluate_pair(PAIR, five(b1=b1, fk=o("FAKING", length=990, headers=oracles.HX)))
    assert (v.faking.status, v.faking.reason) == (Status.FAILURE, Reason.LENGTH_MISMATCH)


def test_header_order_rescues():
    b1 = o("BASELINE_1", length=980, headers=oracles.H1)
    v = evaluate_pair(PAIR, five(b1=b1, fk=o("FAKING", length=990, headers=oracles.H0)))
    assert (v.faking.status, v.faking.reason) == (Status.SUCCESS, Reason.HEADER_ORDER)


def test_non_200_and_transport_error():
    v = evaluate_pair(PAIR, five(fr=o("FRONTING", 421), dl=o("DOMAINLESS", err="TimeoutError: timed out")))
    assert v.fronting.reason is Reason.NON_200
    assert v.domainless.reason is Reason.TRANSPORT_ERROR


def test_equal_baseline_lengths_never_exact():
    b1 = o("BASELINE_1", length=1000, headers=oracles.H1)
    v = evaluate_pair(PAIR, five(b1=b1, fr=o("FRONTING", length=1000, headers=oracles.HX)))
    assert v.fronting.status is Status.FAILURE


@pytest.mark.parametrize("b0,b1,reason", [
    (o("BASELINE_0", cert=CertSummary("t.example", ("t.example", "f.example"))), None, PruneReason.CERT_COVERS_BOTH),
    (None, o("BASELINE_1", cert=CertSummary("*.example", ())), PruneReason.CERT_COVERS_BOTH),
    (o("BASELINE_0", err="ConnectionRefusedError: refused"), None, PruneReason.BASELINE_ERROR),
    (None, o("BASELINE_1", 403), PruneReason.BASELINE_NON_200),
])
def test_pruning(b0, b1, reason):
    v = evaluate_pair(PAIR, five(b0=b0, b1=b1, fr=o("FRONTING", length=1000)))
    assert not v.applicable and v.prune_reason is reason
    assert not any(r.success for r in (v.fronting, v.faking, v.domainless))


def test_missing_or_duplicate_roles():
    outs = five()
    with pytest.raises(ValueError):
        evaluate_pair(PAIR, outs[:4])
    with pytest.raises(ValueError):
        evaluate_pair(PAIR, outs + [outs[0]])


def test_grid_matches_oracle():
    n, mismatches = run_grid()
    assert n >= 2000
    assert mismatches == []


lengths = st.integers(0, 5000)
statuses = st.sampled_from(oracles.STATUSES)
header_sets = st.sampled_from([oracles.H0, oracles.H1, oracles.HX])


@given(lengths.filter(bool), lengths.filter(bool), statuses, lengths, header_sets)
def test_judge_property_matches_oracle(n0, n1, status, n, headers):
    b0 = {"status": 200, "length": n0, "headers": oracles.H0}
    b1 = {"status": 200, "length": n1, "headers": oracles.H1}
    t = {"status": status, "length": n, "headers": headers}
    res = judge(outcome("FRONTING", t), outcome("BASELINE_0", b0), outcome("BASELINE_1", b1))
    assert (res.status.value, res.reason.value) == oracles.technique(t, b0, b1)
    if res.success:
        assert status == 200


def test_pure_and_serializable():
    outs = five(fr=o("FRONTING", length=1000))
    v1, v2 = evaluate_pair(PAIR, outs), evaluate_pair(PAIR, list(reversed(outs)))
    assert v1 == v2
    assert PairVerdict.from_json(json.loads(json.dumps(v1.to_json()))) == v1
    rows = [(PAIR, x) for x in outs]
    assert classify_all(rows) == [v1]
    assert load_verdicts([json.dumps(v1.to_json())]) == [v1]
