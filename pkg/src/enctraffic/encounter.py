"""Pairwise encounter extraction and daily per-building aggregation.

Two devices encounter when their association sessions on the same AP
overlap in time; a shared endpoint counts as a zero-length encounter.
Daily totals are keyed by (building, start day, user pair); an encounter
spanning midnight is credited entirely to its start day.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .devclass import DeviceType, PairCategory, pair_category
from .ingest import AssociationSession, day_index_of

# default short/medium boundaries (0.6 min and 5 min)
DEFAULT_T1_S = 36.0
DEFAULT_T2_S = 300.0

ENCOUNTER_HEADER = [
    "user1_mac", "user2_mac",
    "user1_assoc_start", "user1_assoc_end",
    "ap_mac",
    "user2_assoc_start", "user2_assoc_end",
    "enc_start", "enc_end",
    "building_id", "day_index",
]


class DurationCategory(str, Enum):
    SHORT = "short"
    MEDIUM = "medium"
    LONG = "long"


def categorize_duration(
    duration_s: float,
    t1_s: float = DEFAULT_T1_S,
    t2_s: float = DEFAULT_T2_S,
) -> DurationCategory:
    """Short below t1, long above t2, medium on the closed middle interval."""
    if duration_s < t1_s:
        return DurationCategory.SHORT
    if duration_s > t2_s:
        return DurationCategory.LONG
    return DurationCategory.MEDIUM


@dataclass(frozen=True)
class EncounterRecord:
    """Overlap of two association sessions on one AP (user1 < user2)."""

    user1_mac: str
    user2_mac: str
    ap_mac: str
    building_id: str
    enc_start_s: int
    enc_end_s: int
    user1_start_s: int
    user1_end_s: int
    user2_start_s: int
    user2_end_s: int

    @property
    def duration_s(self) -> int:
        return self.enc_end_s - self.enc_start_s


@dataclass(frozen=True)
class DailyPairRecord:
    """Per (building, day, pair) encounter total; categories filled lazily."""

    building_id: str
    day_index: int
    user1_mac: str
    user2_mac: str
    total_duration_s: int
    encounter_count: int
    pair_category: PairCategory | None = None
    duration_category: DurationCategory | None = None


def _encounters_for_ap(sessions: list[AssociationSession]) -> list[EncounterRecord]:
    """Forward scan over start-sorted sessions of a single AP."""
    sessions = sorted(sessions, key=lambda s: (s.start_s, s.end_s, s.user_mac))
    records: list[EncounterRecord] = []
    n = len(sessions)
    for i in range(n):
        a = sessions[i]
        for j in range(i + 1, n):
            b = sessions[j]
            if b.start_s > a.end_s:
                break
            if a.user_mac == b.user_mac:
                continue
            if a.building_id != b.building_id:
                raise ValueError(
                    f"AP {a.ap_mac} appears in buildings "
                    f"{a.building_id!r} and {b.building_id!r}"
                )
            first, second = (a, b) if a.user_mac < b.user_mac else (b, a)
            records.append(
                EncounterRecord(
                    user1_mac=first.user_mac,
                    user2_mac=second.user_mac,
                    ap_mac=a.ap_mac,
                    building_id=a.building_id,
                    enc_start_s=max(a.start_s, b.start_s),
                    enc_end_s=min(a.end_s, b.end_s),
                    user1_start_s=first.start_s,
                    user1_end_s=first.end_s,
                    user2_start_s=second.start_s,
                    user2_end_s=second.end_s,
                )
            )
    return records


def extract_encounters(
    sessions: Iterable[AssociationSession],
    workers: int = 1,
) -> list[EncounterRecord]:
    """All pairwise session overlaps, one record per unordered pair per overlap.

    Sessions are partitioned by AP and swept in start order, so the cost is
    sort plus output size rather than all-pairs. Zero-length overlaps (shared
    endpoint) count. The result is deterministically ordered by
    (building, enc_start, user1, user2) regardless of ``workers``.
    """
    by_ap: dict[str, list[AssociationSession]] = {}
    for session in sessions:
        by_ap.setdefault(session.ap_mac, []).append(session)
    ap_groups = [by_ap[ap] for ap in sorted(by_ap)]
    if workers > 1 and len(ap_groups) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_ap = list(pool.map(_encounters_for_ap, ap_groups))
    else:
        per_ap = [_encounters_for_ap(group) for group in ap_groups]
    records = [rec for group in per_ap for rec in group]
    records.sort(
        key=lambda r: (
            r.building_id, r.enc_start_s, r.user1_mac, r.user2_mac,
            r.ap_mac, r.enc_end_s,
        )
    )
    return records


def aggregate_daily(
    encounters: Iterable[EncounterRecord],
    tz_offset_s: int = 0,
) -> list[DailyPairRecord]:
    """Sum encounter durations per (building, start day, user pair)."""
    totals: dict[tuple[str, int, str, str], list[int]] = {}
    for rec in encounters:
        day = day_index_of(rec.enc_start_s, tz_offset_s)
        key = (rec.building_id, day, rec.user1_mac, rec.user2_mac)
        bucket = totals.setdefault(key, [0, 0])
        bucket[0] += rec.duration_s
        bucket[1] += 1
    return [
        DailyPairRecord(
            building_id=building,
            day_index=day,
            user1_mac=u1,
            user2_mac=u2,
            total_duration_s=total,
            encounter_count=count,
        )
        for (building, day, u1, u2), (total, count) in sorted(totals.items())
    ]


def with_pair_categories(
    records: Iterable[DailyPairRecord],
    labels: Mapping[str, DeviceType],
) -> list[DailyPairRecord]:
    """Attach FF/CC/FC; pairs with an Unknown or unlabeled device get None."""
    out: list[DailyPairRecord] = []
    for rec in records:
        t1 = labels.get(rec.user1_mac, DeviceType.UNKNOWN)
        t2 = labels.get(rec.user2_mac, DeviceType.UNKNOWN)
        if t1 is DeviceType.UNKNOWN or t2 is DeviceType.UNKNOWN:
            out.append(replace(rec, pair_category=None))
        else:
            out.append(replace(rec, pair_category=pair_category(t1, t2)))
    return out


def with_duration_categories(
    records: Iterable[DailyPairRecord],
    t1_s: float = DEFAULT_T1_S,
    t2_s: float = DEFAULT_T2_S,
) -> list[DailyPairRecord]:
    return [
        replace(rec, duration_category=categorize_duration(rec.total_duration_s, t1_s, t2_s))
        for rec in records
    ]


def duration_terciles(records: Sequence[DailyPairRecord]) -> tuple[float, float]:
    """Empirical 1/3 and 2/3 quantiles (linear interpolation) of daily totals."""
    if len(records) < 3:
        raise ValueError(f"need at least 3 records for terciles, got {len(records)}")
    durations = np.asarray([r.total_duration_s for r in records], dtype=float)
    t1, t2 = np.quantile(durations, [1.0 / 3.0, 2.0 / 3.0])
    return float(t1), float(t2)


def repeat_encounter_fraction(records: Sequence[DailyPairRecord]) -> float:
    """Fraction of distinct pairs with two or more encounters over the trace."""
    if not records:
        raise ValueError("no daily pair records")
    counts: dict[tuple[str, str], int] = {}
    for rec in records:
        key = (rec.user1_mac, rec.user2_mac)
        counts[key] = counts.get(key, 0) + rec.encounter_count
    repeated = sum(1 for c in counts.values() if c >= 2)
    return repeated / len(counts)


@dataclass(frozen=True)
class DurationSummary:
    """Seven-number summary of daily totals (sample std, n-1 denominator)."""

    n: int
    min: float
    q1: float
    median: float
    mean: float
    q3: float
    max: float
    std: float
    std_degenerate: bool = False  # n == 1, std reported as 0


def summarize_durations(
    records: Sequence[DailyPairRecord],
    group: PairCategory | None = None,
) -> DurationSummary:
    """Summary statistics of total durations, optionally for one pair category."""
    if group is not None:
        records = [r for r in records if r.pair_category is group]
    if not records:
        raise ValueError(f"no records in group {group}")
    data = np.asarray([r.total_duration_s for r in records], dtype=float)
    q1, median, q3 = np.quantile(data, [0.25, 0.5, 0.75])
    degenerate = data.size == 1
    std = 0.0 if degenerate else float(np.std(data, ddof=1))
    return DurationSummary(
        n=int(data.size),
        min=float(data.min()),
        q1=float(q1),
        median=float(median),
        mean=float(data.mean()),
        q3=float(q3),
        max=float(data.max()),
        std=std,
        std_degenerate=degenerate,
    )


def write_encounter_log(
    path: str | Path,
    encounters: Iterable[EncounterRecord],
    tz_offset_s: int = 0,
) -> None:
    """Persist encounters in the canonical column order, plus building and day."""
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(ENCOUNTER_HEADER)
        for r in encounters:
            writer.writerow([
                r.user1_mac, r.user2_mac,
                r.user1_start_s, r.user1_end_s,
                r.ap_mac,
                r.user2_start_s, r.user2_end_s,
                r.enc_start_s, r.enc_end_s,
                r.building_id, day_index_of(r.enc_start_s, tz_offset_s),
            ])


def read_encounter_log(path: str | Path) -> list[EncounterRecord]:
    """Load encounters.csv back into records (day_index is re-derivable)."""
    records: list[EncounterRecord] = []
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            return records
        if header != ENCOUNTER_HEADER:
            raise ValueError(f"{path}: unexpected encounter header {header!r}")
        for row in reader:
            if not row:
                continue
            records.append(
                EncounterRecord(
                    user1_mac=row[0], user2_mac=row[1],
                    user1_start_s=int(row[2]), user1_end_s=int(row[3]),
                    ap_mac=row[4],
                    user2_start_s=int(row[5]), user2_end_s=int(row[6]),
                    enc_start_s=int(row[7]), enc_end_s=int(row[8]),
                    building_id=row[9],
                )
            )
    return records
