"""Per-(building, day) web-traffic profiles and cosine similarities.

A global vocabulary of popular remote IPs defines the columns. For each
qualifying context the byte totals of its users are log-scaled and TF-IDF
weighted; each row is one user's traffic profile. Rows are kept sparse:
the vocabulary can have thousands of columns while a user touches a few.
"""

from __future__ import annotations

import csv
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .encounter import DailyPairRecord
from .ingest import (
    AssociationSession,
    AttributedFlow,
    day_index_of,
    ip_sort_key,
)

DEFAULT_MIN_PAIRS = 20

VOCAB_HEADER = ["ip", "total_bytes", "column_index"]
PROFILE_HEADER = ["building_id", "day_index", "user_mac", "ip", "weight"]
MEMBER_HEADER = ["building_id", "day_index", "user_mac", "has_traffic"]

ContextKey = tuple[str, int]


@dataclass(frozen=True)
class IpVocabulary:
    """Ordered remote-IP columns, ranked by dataset-wide byte volume."""

    ips: list[str]
    total_bytes: dict[str, int]

    def __post_init__(self):
        object.__setattr__(
            self, "index", {ip: col for col, ip in enumerate(self.ips)}
        )

    def __len__(self) -> int:
        return len(self.ips)

    def __contains__(self, ip: str) -> bool:
        return ip in self.index


@dataclass
class SparseRow:
    """One user's profile: column -> nonnegative weight, plus the row dimension."""

    dim: int
    entries: dict[int, float] = field(default_factory=dict)

    def is_zero(self) -> bool:
        return not self.entries

    def norm(self) -> float:
        return math.sqrt(sum(v * v for v in self.entries.values()))

    def to_dense(self) -> list[float]:
        dense = [0.0] * self.dim
        for col, value in self.entries.items():
            dense[col] = value
        return dense


@dataclass
class TrafficProfileMatrix:
    """Users x vocabulary matrix for one context (or globally)."""

    users: list[str]
    rows: list[SparseRow]
    dim: int
    building_id: str | None = None
    day_index: int | None = None
    zero_row_users: list[str] = field(default_factory=list)
    degenerate: bool = False  # single-user context: every IDF weight is 0

    def row_of(self, user_mac: str) -> SparseRow:
        return self.rows[self.users.index(user_mac)]


@dataclass(frozen=True)
class ContextSkip:
    """A (building, day) left out of the analysis, and why."""

    building_id: str
    day_index: int
    reason: str
    encountered_pairs: int


def select_popular_ips(
    attributed_flows: Sequence[AttributedFlow],
    max_ips: int,
    min_bytes: int = 1,
) -> IpVocabulary:
    """Remote IPs ranked by total bytes, floored at min_bytes, capped at max_ips."""
    if max_ips < 1:
        raise ValueError(f"max_ips must be >= 1, got {max_ips}")
    if not attributed_flows:
        raise ValueError("no attributed flows to build a vocabulary from")
    totals: dict[str, int] = {}
    for flow in attributed_flows:
        totals[flow.remote_ip] = totals.get(flow.remote_ip, 0) + flow.bytes
    ranked = sorted(
        (item for item in totals.items() if item[1] >= min_bytes),
        key=lambda item: (-item[1], ip_sort_key(item[0])),
    )[:max_ips]
    return IpVocabulary(
        ips=[ip for ip, _ in ranked],
        total_bytes={ip: total for ip, total in ranked},
    )


def build_log_traffic_matrix(
    attributed_flows: Iterable[AttributedFlow],
    vocab: IpVocabulary,
    users: Sequence[str],
) -> TrafficProfileMatrix:
    """Pre-IDF matrix: entry = ln(1 + total bytes between user and column IP)."""
    if len(vocab) == 0:
        raise ValueError("empty vocabulary")
    user_pos = {mac: i for i, mac in enumerate(users)}
    byte_totals: dict[tuple[int, int], int] = {}
    for flow in attributed_flows:
        row = user_pos.get(flow.user_mac)
        if row is None:
            continue
        col = vocab.index.get(flow.remote_ip)
        if col is None:
            continue
        key = (row, col)
        byte_totals[key] = byte_totals.get(key, 0) + flow.bytes
    rows = [SparseRow(dim=len(vocab)) for _ in users]
    for (row, col), total in byte_totals.items():
        if total > 0:
            rows[row].entries[col] = math.log1p(total)
    matrix = TrafficProfileMatrix(users=list(users), rows=rows, dim=len(vocab))
    matrix.zero_row_users = [u for u, r in zip(matrix.users, rows) if r.is_zero()]
    return matrix


def apply_tfidf(matrix: TrafficProfileMatrix) -> TrafficProfileMatrix:
    """Weight each entry by ln(N / df) over the matrix's own rows.

    Columns present in every row get weight 0, as does everything in a
    single-row matrix (flagged degenerate).
    """
    n = len(matrix.rows)
    df: dict[int, int] = {}
    for row in matrix.rows:
        for col, value in row.entries.items():
            if value > 0:
                df[col] = df.get(col, 0) + 1
    idf = {col: math.log(n / count) for col, count in df.items()}
    out_rows = []
    for row in matrix.rows:
        entries = {}
        for col, value in row.entries.items():
            weight = value * idf.get(col, 0.0)
            if weight != 0.0:
                entries[col] = weight
        out_rows.append(SparseRow(dim=row.dim, entries=entries))
    out = TrafficProfileMatrix(
        users=list(matrix.users),
        rows=out_rows,
        dim=matrix.dim,
        building_id=matrix.building_id,
        day_index=matrix.day_index,
        degenerate=(n == 1),
    )
    out.zero_row_users = [u for u, r in zip(out.users, out_rows) if r.is_zero()]
    return out


def cosine_similarity(a: SparseRow, b: SparseRow) -> float:
    """Cosine of the angle between two profile rows; 0 if either row is zero."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.is_zero() or b.is_zero():
        return 0.0
    small, large = (a.entries, b.entries) if len(a.entries) <= len(b.entries) else (b.entries, a.entries)
    dot = 0.0
    for col, value in small.items():
        other = large.get(col)
        if other is not None:
            dot += value * other
    if dot == 0.0:
        return 0.0
    return dot / (a.norm() * b.norm())


class _SessionIndex:
    """Per-user interval stabbing: which (building, day) sessions contain t."""

    def __init__(self, sessions: Iterable[AssociationSession], tz_offset_s: int):
        per_user: dict[str, list[tuple[int, int, ContextKey]]] = {}
        for s in sessions:
            day = day_index_of(s.start_s, tz_offset_s)
            per_user.setdefault(s.user_mac, []).append(
                (s.start_s, s.end_s, (s.building_id, day))
            )
        self._index: dict[str, tuple[list[int], list[tuple[int, int, ContextKey]], list[int]]] = {}
        for user, intervals in per_user.items():
            intervals.sort()
            starts = [iv[0] for iv in intervals]
            # prefix max of interval ends lets the back-scan stop early
            max_end: list[int] = []
            running = -1
            for iv in intervals:
                running = max(running, iv[1])
                max_end.append(running)
            self._index[user] = (starts, intervals, max_end)

    def contexts_at(self, user: str, timestamp_s: float) -> set[ContextKey]:
        entry = self._index.get(user)
        if entry is None:
            return set()
        starts, intervals, max_end = entry
        idx = bisect_right(starts, timestamp_s) - 1
        keys: set[ContextKey] = set()
        while idx >= 0 and max_end[idx] >= timestamp_s:
            start, end, key = intervals[idx]
            if start <= timestamp_s <= end:
                keys.add(key)
            idx -= 1
        return keys

    def context_members(self) -> dict[ContextKey, list[str]]:
        members: dict[ContextKey, set[str]] = {}
        for user, (_, intervals, _) in self._index.items():
            for _, _, key in intervals:
                members.setdefault(key, set()).add(user)
        return {key: sorted(users) for key, users in members.items()}


def count_encountered_pairs(
    daily_records: Iterable[DailyPairRecord],
) -> dict[ContextKey, int]:
    counts: dict[ContextKey, int] = {}
    for rec in daily_records:
        key = (rec.building_id, rec.day_index)
        counts[key] = counts.get(key, 0) + 1
    return counts


def build_all_context_profiles(
    attributed_flows: Iterable[AttributedFlow],
    sessions: Iterable[AssociationSession],
    vocab: IpVocabulary,
    daily_records: Sequence[DailyPairRecord],
    tz_offset_s: int = 0,
    min_pairs: int = DEFAULT_MIN_PAIRS,
) -> tuple[dict[ContextKey, TrafficProfileMatrix], list[ContextSkip]]:
    """TF-IDF profile matrices for every context clearing the pair floor.

    A user belongs to a context when they have at least one session in that
    building starting that day; a flow counts toward a context when its
    start time falls inside such a session. Contexts with fewer encountered
    pairs than ``min_pairs`` are skipped with a reason.
    """
    index = _SessionIndex(sessions, tz_offset_s)
    members = index.context_members()
    pair_counts = count_encountered_pairs(daily_records)

    qualifying = {
        key for key in members if pair_counts.get(key, 0) >= min_pairs
    }
    skips = [
        ContextSkip(
            building_id=key[0],
            day_index=key[1],
            reason="below-min-pairs",
            encountered_pairs=pair_counts.get(key, 0),
        )
        for key in sorted(members)
        if key not in qualifying
    ]

    # (context, user, column) byte totals in one pass over the flows
    totals: dict[ContextKey, dict[tuple[str, int], int]] = {
        key: {} for key in qualifying
    }
    for flow in attributed_flows:
        col = vocab.index.get(flow.remote_ip)
        if col is None:
            continue
        for key in index.contexts_at(flow.user_mac, flow.start_s):
            if key not in qualifying:
                continue
            bucket = totals[key]
            user_col = (flow.user_mac, col)
            bucket[user_col] = bucket.get(user_col, 0) + flow.bytes

    contexts: dict[ContextKey, TrafficProfileMatrix] = {}
    for key in sorted(qualifying):
        users = members[key]
        user_pos = {mac: i for i, mac in enumerate(users)}
        rows = [SparseRow(dim=len(vocab)) for _ in users]
        for (user, col), total in totals[key].items():
            if total > 0:
                rows[user_pos[user]].entries[col] = math.log1p(total)
        matrix = TrafficProfileMatrix(
            users=users,
            rows=rows,
            dim=len(vocab),
            building_id=key[0],
            day_index=key[1],
        )
        matrix.zero_row_users = [u for u, r in zip(users, rows) if r.is_zero()]
        contexts[key] = apply_tfidf(matrix)
    return contexts, skips


def build_context_profiles(
    attributed_flows: Iterable[AttributedFlow],
    sessions: Iterable[AssociationSession],
    vocab: IpVocabulary,
    daily_records: Sequence[DailyPairRecord],
    building_id: str,
    day_index: int,
    tz_offset_s: int = 0,
    min_pairs: int = DEFAULT_MIN_PAIRS,
) -> TrafficProfileMatrix | ContextSkip:
    """Profile matrix for a single context, or the skip record explaining why not."""
    contexts, skips = build_all_context_profiles(
        attributed_flows, sessions, vocab, daily_records, tz_offset_s, min_pairs
    )
    key = (building_id, day_index)
    if key in contexts:
        return contexts[key]
    for skip in skips:
        if (skip.building_id, skip.day_index) == key:
            return skip
    return ContextSkip(building_id, day_index, "no-sessions", 0)


def write_vocabulary(path: str | Path, vocab: IpVocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(VOCAB_HEADER)
        for col, ip in enumerate(vocab.ips):
            writer.writerow([ip, vocab.total_bytes[ip], col])


def read_vocabulary(path: str | Path) -> IpVocabulary:
    ips: list[str] = []
    totals: dict[str, int] = {}
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != VOCAB_HEADER:
            raise ValueError(f"{path}: unexpected vocabulary header {header!r}")
        for row in reader:
            if not row:
                continue
            ip, total, col = row[0], int(row[1]), int(row[2])
            if col != len(ips):
                raise ValueError(f"{path}: column_index out of order at {ip}")
            ips.append(ip)
            totals[ip] = total
    return IpVocabulary(ips=ips, total_bytes=totals)


def write_profiles(
    path: str | Path,
    members_path: str | Path,
    contexts: Mapping[ContextKey, TrafficProfileMatrix],
    vocab: IpVocabulary,
) -> None:
    """Persist profiles as sparse triplets plus a context-membership sidecar.

    The sidecar keeps zero-traffic users visible: they have no triplets but
    still belong to their context's pairwise analysis.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(PROFILE_HEADER)
        for key in sorted(contexts):
            matrix = contexts[key]
            for user, row in zip(matrix.users, matrix.rows):
                for col in sorted(row.entries):
                    writer.writerow([
                        key[0], key[1], user, vocab.ips[col], repr(row.entries[col]),
                    ])
    with open(members_path, "w", encoding="utf-8", newline="\n") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(MEMBER_HEADER)
        for key in sorted(contexts):
            matrix = contexts[key]
            for user, row in zip(matrix.users, matrix.rows):
                writer.writerow([key[0], key[1], user, int(not row.is_zero())])


def read_profiles(
    path: str | Path,
    members_path: str | Path,
    vocab: IpVocabulary,
) -> dict[ContextKey, TrafficProfileMatrix]:
    """Rebuild context matrices from the triplets file and membership sidecar."""
    member_lists: dict[ContextKey, list[str]] = {}
    with open(members_path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != MEMBER_HEADER:
            raise ValueError(f"{members_path}: unexpected header {header!r}")
        for row in reader:
            if not row:
                continue
            key = (row[0], int(row[1]))
            member_lists.setdefault(key, []).append(row[2])

    contexts: dict[ContextKey, TrafficProfileMatrix] = {}
    for key, users in member_lists.items():
        contexts[key] = TrafficProfileMatrix(
            users=users,
            rows=[SparseRow(dim=len(vocab)) for _ in users],
            dim=len(vocab),
            building_id=key[0],
            day_index=key[1],
        )

    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != PROFILE_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for row in reader:
            if not row:
                continue
            key = (row[0], int(row[1]))
            matrix = contexts.get(key)
            if matrix is None:
                raise ValueError(f"{path}: triplet for unknown context {key}")
            user, ip, weight = row[2], row[3], float(row[4])
            col = vocab.index.get(ip)
            if col is None:
                raise ValueError(f"{path}: IP {ip} not in vocabulary")
            matrix.rows[matrix.users.index(user)].entries[col] = weight

    for matrix in contexts.values():
        matrix.zero_row_users = [
            u for u, r in zip(matrix.users, matrix.rows) if r.is_zero()
        ]
        matrix.degenerate = len(matrix.users) == 1
    return contexts
