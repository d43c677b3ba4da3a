"""Per-group support tables and the popularity-list exposure estimate."""

from __future__ import annotations

import csv
import decimal
import enum
import io
import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .candidate_sets import GroupKey
from .classifier import PairVerdict
from .dns_ingest import normalize_name

GREEN_BELOW = 5.0
RED_FROM = 95.0
TECHNIQUE_NAMES = ("fronting", "faking", "domainless")


class Band(str, enum.Enum):
    GREEN = "GREEN"
    YELLOW = "YELLOW"
    RED = "RED"


def band(pct: float) -> Band:
    if pct < GREEN_BELOW:
        return Band.GREEN
    if pct >= RED_FROM:
        return Band.RED
    return Band.YELLOW


@dataclass(frozen=True)
class GroupReport:
    key: GroupKey
    observed_domains: int
    applicable_pairs: int
    fronting_pct: float
    faking_pct: float
    domainless_pct: float

    @property
    def colors(self) -> dict[str, Band]:
        return {name: band(self.pct(name)) for name in TECHNIQUE_NAMES}

    def pct(self, technique: str) -> float:
        return getattr(self, f"{technique}_pct")


@dataclass(frozen=True)
class SuppressedGroup:
    key: GroupKey
    reason: str
    pruned_pairs: int


def aggregate(verdicts: Sequence[PairVerdict], by: GroupKey) -> GroupReport | None:
    """Support percentages for one group, over applicable (non-pruned) pairs only.

    Returns None when no verdict is applicable.
    """
    applicable = []
    for v in verdicts:
        if v.pair.group != by:
            raise ValueError(f"verdict {v.pair.pair_id} belongs to {v.pair.group}, not {by}")
        if v.applicable:
            applicable.append(v)
    if not applicable:
        return None
    n = len(applicable)
    pcts = {
        name: 100.0 * sum(getattr(v, name).success for v in applicable) / n
        for name in TECHNIQUE_NAMES
    }
    domains = {v.pair.target.domain for v in applicable}
    return GroupReport(by, len(domains), n, pcts["fronting"], pcts["faking"], pcts["domainless"])


def aggregate_all(verdicts: Iterable[PairVerdict]) -> tuple[list[GroupReport], list[SuppressedGroup]]:
    by_group: dict[GroupKey, list[PairVerdict]] = defaultdict(list)
    for v in verdicts:
        by_group[v.pair.group].append(v)
    reports, suppressed = [], []
    for key in sorted(by_group):
        rep = aggregate(by_group[key], key)
        if rep is None:
            suppressed.append(SuppressedGroup(key, "no applicable verdicts (all pruned)", len(by_group[key])))
        else:
            reports.append(rep)
    return reports, suppressed


# -- popularity estimate ------------------------------------------------------

@dataclass(frozen=True)
class PopularityEstimate:
    total_domains: int
    cname_mapped: int
    tracked: int
    frontable_tracked_pct: float
    frontable_total_pct: float

    def to_json(self) -> dict:
        return {
            "total_domains": self.total_domains,
            "cname_mapped": self.cname_mapped,
            "tracked": self.tracked,
            "frontable_tracked_pct": self.frontable_tracked_pct,
            "frontable_total_pct": self.frontable_total_pct,
            "kind": "point estimate",
        }


def popularity_estimate(
    popularity: Sequence[str],
    cname_map: Mapping[str, str],
    support: Mapping[str, float],
) -> PopularityEstimate:
    """Share of a popularity list usable as a front.

    Each tracked domain contributes its canonical domain's fronting support
    as a probability weight.
    """
    if not popularity:
        raise ValueError("popularity list is empty")
    for canon, pct in support.items():
        if not 0.0 <= pct <= 100.0:
            raise ValueError(f"support for {canon} out of range: {pct}")
    mapped = tracked = 0
    weight = 0.0
    for domain in popularity:
        canon = cname_map.get(domain)
        if canon is None:
            continue
        mapped += 1
        if canon in support:
            tracked += 1
            weight += support[canon] / 100.0
    total = len(popularity)
    return PopularityEstimate(
        total_domains=total,
        cname_mapped=mapped,
        tracked=tracked,
        frontable_tracked_pct=100.0 * weight / tracked if tracked else 0.0,
        frontable_total_pct=100.0 * weight / total,
    )


def load_popularity_csv(source: Iterable[str]) -> list[str]:
    """Read an Umbrella-style ``rank,domain`` list, ordered by rank."""
    rows = []
    for row in csv.reader(source):
        if not row or row[0].strip().lower() == "rank":
            continue
        rows.append((int(row[0]), normalize_name(row[1])))
    rows.sort()
    return [d for _, d in rows]


# -- rendering ----------------------------------------------------------------

class Format(str, enum.Enum):
    MARKDOWN = "markdown"
    CSV = "csv"
    JSON = "json"


def fmt_pct(pct: float) -> str:
    """Two decimals, truncated so a printed value never lands in a different band than the real one."""
    return str(decimal.Decimal(repr(float(pct))).quantize(decimal.Decimal("0.01"), rounding=decimal.ROUND_DOWN))


def _sorted(reports: Iterable[GroupReport]) -> list[GroupReport]:
    return sorted(reports, key=lambda r: (r.key.kind.value, r.key.value))


def _render_markdown(reports, suppressed) -> str:
    lines = [
        "| Group kind | Group | Observed domains | Pairs | Fronting | Faking | Domainless |",
        "|---|---|---:|---:|---:|---:|---:|",
    ]
    for r in reports:
        cells = [f"{fmt_pct(r.pct(t))}% ({band(r.pct(t)).value})" for t in TECHNIQUE_NAMES]
        lines.append(f"| {r.key.kind.value} | {r.key.value} | {r.observed_domains} | {r.applicable_pairs} | "
                     + " | ".join(cells) + " |")
    lines.append("")
    lines.append("Bands: GREEN < 5%, YELLOW 5% to < 95%, RED >= 95%.")
    if suppressed:
        lines.append("")
        lines.append("Suppressed groups:")
        for s in suppressed:
            lines.append(f"- {s.key.kind.value} {s.key.value}: {s.reason} ({s.pruned_pairs} pairs)")
    return "\n".join(lines) + "\n"


def _render_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["kind", "group", "observed_domains", "applicable_pairs",
                     "fronting_pct", "fronting_band", "faking_pct", "faking_band",
                     "domainless_pct", "domainless_band"])
    for r in reports:
        row = [r.key.kind.value, r.key.value, r.observed_domains, r.applicable_pairs]
        for t in TECHNIQUE_NAMES:
            row += [fmt_pct(r.pct(t)), band(r.pct(t)).value]
        writer.writerow(row)
    return buf.getvalue()


def _render_json(reports, suppressed) -> str:
    doc = {
        "groups": [
            {
                "kind": r.key.kind.value,
                "group": r.key.value,
                "observed_domains": r.observed_domains,
                "applicable_pairs": r.applicable_pairs,
                **{f"{t}_pct": round(r.pct(t), 6) for t in TECHNIQUE_NAMES},
                **{f"{t}_band": band(r.pct(t)).value for t in TECHNIQUE_NAMES},
            }
            for r in reports
        ],
        "suppressed": [
            {"kind": s.key.kind.value, "group": s.key.value, "reason": s.reason, "pruned_pairs": s.pruned_pairs}
            for s in sorted(suppressed, key=lambda s: s.key)
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def render(reports: Iterable[GroupReport], fmt: Format | str = Format.MARKDOWN,
           suppressed: Sequence[SuppressedGroup] = ()) -> str:
    fmt = Format(fmt)
    ordered = _sorted(reports)
    if fmt is Format.MARKDOWN:
        return _render_markdown(ordered, sorted(suppressed, key=lambda s: s.key))
    if fmt is Format.CSV:
        return _render_csv(ordered)
    return _render_json(ordered, suppressed)
