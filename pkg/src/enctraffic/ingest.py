"""Parsers for the canonical trace files and the flow/user join.

All trace files are UTF-8 CSV with LF line endings and a mandatory header.
Timestamps are epoch seconds: integers everywhere except NetFlow, where
fractional seconds are allowed. MAC addresses are lowercase colon-separated
hex, IPv4 addresses dotted quads.
"""

from __future__ import annotations

import csv
import math
import re
from bisect import bisect_right
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .devclass import DeviceType

SECONDS_PER_DAY = 86400
# epoch day 0 (1970-01-01) was a Thursday; days 2 and 3 of each week are Sat/Sun
_EPOCH_WEEKEND_RESIDUES = (2, 3)

WLAN_HEADER = ["user_mac", "ap_mac", "building_id", "start_s", "end_s"]
NETFLOW_HEADER = [
    "start_s", "finish_s", "duration_s", "src_ip", "dst_ip",
    "protocol", "src_port", "dst_port", "packets", "bytes",
]
DHCP_HEADER = ["user_mac", "ip", "lease_start_s", "lease_end_s"]
OUI_HEADER = ["oui_prefix", "label"]
BUILDING_HEADER = ["ap_mac", "building_id"]

_MAC_RE = re.compile(r"^[0-9a-f]{2}(?::[0-9a-f]{2}){5}$")
_OUI_RE = re.compile(r"^[0-9a-f]{2}(?::[0-9a-f]{2}){2}$")

# flow duration must agree with finish-start to within one millisecond
DURATION_TOLERANCE_S = 0.001


class TraceFormatError(ValueError):
    """Unrecoverable input problem: bad header, conflicting keys, strict-mode row."""


@dataclass(frozen=True)
class Diagnostic:
    """One skipped record in lenient mode."""

    line_no: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line_no}: {self.message}"


class Protocol(str, Enum):
    TCP = "TCP"
    UDP = "UDP"
    OTHER = "OTHER"


class FlowDirection(str, Enum):
    UP = "Up"      # the user's leased IP is the flow source
    DOWN = "Down"  # the user's leased IP is the flow destination


@dataclass(frozen=True)
class AssociationSession:
    """One device's contiguous association with one AP."""

    user_mac: str
    ap_mac: str
    building_id: str
    start_s: int
    end_s: int

    @property
    def duration_s(self) -> int:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class FlowRecord:
    """One unidirectional flow (canonical ten-column schema)."""

    start_s: float
    finish_s: float
    duration_s: float
    src_ip: str
    dst_ip: str
    protocol: Protocol
    src_port: int
    dst_port: int
    packets: int
    bytes: int


@dataclass(frozen=True)
class DhcpLease:
    user_mac: str
    ip: str
    lease_start_s: int
    lease_end_s: int


@dataclass(frozen=True)
class AttributedFlow:
    """A flow joined to the user device holding the matching DHCP lease."""

    user_mac: str
    remote_ip: str
    direction: FlowDirection
    bytes: int
    packets: int
    start_s: float


@dataclass(frozen=True)
class TimePartition:
    day_index: int
    is_weekend: bool


def validate_mac(value: str, what: str = "MAC") -> str:
    if not _MAC_RE.match(value):
        raise ValueError(f"malformed {what} {value!r}")
    return value


def oui_prefix(mac: str) -> str:
    """First three octets of a validated MAC."""
    return mac[:8]


def validate_oui(value: str) -> str:
    if not _OUI_RE.match(value):
        raise ValueError(f"malformed OUI prefix {value!r}")
    return value


def validate_ipv4(value: str) -> str:
    parts = value.split(".")
    if len(parts) != 4:
        raise ValueError(f"malformed IPv4 address {value!r}")
    for part in parts:
        if not part.isdigit() or not 0 <= int(part) <= 255:
            raise ValueError(f"malformed IPv4 address {value!r}")
    # normalize e.g. 010.0.0.1 -> 10.0.0.1
    return ".".join(str(int(p)) for p in parts)


def ip_sort_key(ip: str) -> tuple[int, int, int, int]:
    a, b, c, d = (int(p) for p in ip.split("."))
    return (a, b, c, d)


def day_index_of(timestamp_s: float, tz_offset_s: int = 0) -> int:
    return math.floor((timestamp_s + tz_offset_s) / SECONDS_PER_DAY)


def is_weekend_day(day_index: int) -> bool:
    return day_index % 7 in _EPOCH_WEEKEND_RESIDUES


def time_partition(timestamp_s: float, tz_offset_s: int = 0) -> TimePartition:
    day = day_index_of(timestamp_s, tz_offset_s)
    return TimePartition(day_index=day, is_weekend=is_weekend_day(day))


def _parse_int(value: str, what: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"non-integer {what} {value!r}") from None


def _parse_float(value: str, what: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise ValueError(f"non-numeric {what} {value!r}") from None
    if not math.isfinite(out):
        raise ValueError(f"non-finite {what} {value!r}")
    return out


def _read_rows(path: str | Path, expected_header: Sequence[str]):
    """Yield (line_no, row) after validating the header.

    An entirely empty file yields nothing; a present-but-wrong header is a
    hard error.
    """
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            return
        if header != list(expected_header):
            raise TraceFormatError(
                f"{path}: expected header {','.join(expected_header)!r}, "
                f"got {','.join(header)!r}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            yield line_no, row


def _record_error(
    mode: str,
    diagnostics: list[Diagnostic] | None,
    path: str | Path,
    line_no: int,
    message: str,
) -> None:
    if mode == "strict":
        raise TraceFormatError(f"{path}: line {line_no}: {message}")
    if diagnostics is not None:
        diagnostics.append(Diagnostic(line_no=line_no, message=message))


def _check_mode(mode: str) -> None:
    if mode not in ("strict", "lenient"):
        raise ValueError(f"unknown parse mode {mode!r}")


def parse_association_log(
    path: str | Path,
    mode: str = "lenient",
    diagnostics: list[Diagnostic] | None = None,
) -> list[AssociationSession]:
    """Parse wlan.csv into association sessions, preserving file order.

    In lenient mode malformed rows are skipped and reported through
    ``diagnostics``; in strict mode the first malformed row raises.
    """
    _check_mode(mode)
    sessions: list[AssociationSession] = []
    for line_no, row in _read_rows(path, WLAN_HEADER):
        try:
            if len(row) != 5:
                raise ValueError(f"expected 5 fields, got {len(row)}")
            user_mac = validate_mac(row[0], "user MAC")
            ap_mac = validate_mac(row[1], "AP MAC")
            building_id = row[2]
            if not building_id:
                raise ValueError("empty building_id")
            start_s = _parse_int(row[3], "start_s")
            end_s = _parse_int(row[4], "end_s")
            if start_s > end_s:
                raise ValueError(f"start_s {start_s} > end_s {end_s}")
        except ValueError as exc:
            _record_error(mode, diagnostics, path, line_no, str(exc))
            continue
        sessions.append(
            AssociationSession(user_mac, ap_mac, building_id, start_s, end_s)
        )
    return sessions


def parse_netflow_log(
    path: str | Path,
    mode: str = "lenient",
    diagnostics: list[Diagnostic] | None = None,
) -> list[FlowRecord]:
    """Parse netflow.csv into flow records."""
    _check_mode(mode)
    flows: list[FlowRecord] = []
    for line_no, row in _read_rows(path, NETFLOW_HEADER):
        try:
            if len(row) != 10:
                raise ValueError(f"expected 10 fields, got {len(row)}")
            start_s = _parse_float(row[0], "start_s")
            finish_s = _parse_float(row[1], "finish_s")
            duration_s = _parse_float(row[2], "duration_s")
            if start_s > finish_s:
                raise ValueError(f"start_s {start_s} > finish_s {finish_s}")
            if abs(duration_s - (finish_s - start_s)) > DURATION_TOLERANCE_S:
                raise ValueError(
                    f"duration_s {duration_s} inconsistent with "
                    f"finish_s - start_s = {finish_s - start_s}"
                )
            src_ip = validate_ipv4(row[3])
            dst_ip = validate_ipv4(row[4])
            try:
                protocol = Protocol(row[5])
            except ValueError:
                raise ValueError(f"unknown protocol {row[5]!r}") from None
            src_port = _parse_int(row[6], "src_port")
            dst_port = _parse_int(row[7], "dst_port")
            for name, port in (("src_port", src_port), ("dst_port", dst_port)):
                if not 0 <= port <= 65535:
                    raise ValueError(f"{name} {port} out of range")
            packets = _parse_int(row[8], "packets")
            nbytes = _parse_int(row[9], "bytes")
            if packets < 1:
                raise ValueError(f"packets {packets} < 1")
            if nbytes < packets:
                raise ValueError(f"bytes {nbytes} < packets {packets}")
        except ValueError as exc:
            _record_error(mode, diagnostics, path, line_no, str(exc))
            continue
        flows.append(
            FlowRecord(
                start_s, finish_s, duration_s, src_ip, dst_ip,
                protocol, src_port, dst_port, packets, nbytes,
            )
        )
    return flows


def parse_dhcp_leases(
    path: str | Path,
    mode: str = "lenient",
    diagnostics: list[Diagnostic] | None = None,
) -> list[DhcpLease]:
    """Parse dhcp.csv; overlapping leases of one IP are a hard error."""
    _check_mode(mode)
    leases: list[DhcpLease] = []
    for line_no, row in _read_rows(path, DHCP_HEADER):
        try:
            if len(row) != 4:
                raise ValueError(f"expected 4 fields, got {len(row)}")
            user_mac = validate_mac(row[0], "user MAC")
            ip = validate_ipv4(row[1])
            lease_start_s = _parse_int(row[2], "lease_start_s")
            lease_end_s = _parse_int(row[3], "lease_end_s")
            if lease_start_s > lease_end_s:
                raise ValueError(
                    f"lease_start_s {lease_start_s} > lease_end_s {lease_end_s}"
                )
        except ValueError as exc:
            _record_error(mode, diagnostics, path, line_no, str(exc))
            continue
        leases.append(DhcpLease(user_mac, ip, lease_start_s, lease_end_s))
    _check_lease_overlaps(leases)
    return leases


def _check_lease_overlaps(leases: Iterable[DhcpLease]) -> None:
    by_ip: dict[str, list[DhcpLease]] = {}
    for lease in leases:
        by_ip.setdefault(lease.ip, []).append(lease)
    for ip, group in by_ip.items():
        group.sort(key=lambda l: (l.lease_start_s, l.lease_end_s))
        for prev, cur in zip(group, group[1:]):
            if cur.lease_start_s <= prev.lease_end_s:
                raise TraceFormatError(
                    f"overlapping leases of IP {ip}: "
                    f"[{prev.lease_start_s},{prev.lease_end_s}] and "
                    f"[{cur.lease_start_s},{cur.lease_end_s}]"
                )


def parse_oui_table(
    path: str | Path,
    mode: str = "lenient",
    diagnostics: list[Diagnostic] | None = None,
) -> dict[str, DeviceType]:
    """Parse oui.csv into an OUI-prefix -> device-type map."""
    _check_mode(mode)
    _labels = {"flute": DeviceType.FLUTE, "cello": DeviceType.CELLO}
    table: dict[str, DeviceType] = {}
    for line_no, row in _read_rows(path, OUI_HEADER):
        try:
            if len(row) != 2:
                raise ValueError(f"expected 2 fields, got {len(row)}")
            prefix = validate_oui(row[0])
            if row[1] not in _labels:
                raise ValueError(f"unknown device label {row[1]!r}")
            label = _labels[row[1]]
        except ValueError as exc:
            _record_error(mode, diagnostics, path, line_no, str(exc))
            continue
        if prefix in table and table[prefix] is not label:
            raise TraceFormatError(
                f"conflicting labels for OUI prefix {prefix}: "
                f"{table[prefix].value} vs {label.value}"
            )
        table[prefix] = label
    return table


def parse_building_map(
    path: str | Path,
    mode: str = "lenient",
    diagnostics: list[Diagnostic] | None = None,
) -> dict[str, str]:
    """Parse buildings.csv into an AP-MAC -> building-id map."""
    _check_mode(mode)
    mapping: dict[str, str] = {}
    for line_no, row in _read_rows(path, BUILDING_HEADER):
        try:
            if len(row) != 2:
                raise ValueError(f"expected 2 fields, got {len(row)}")
            ap_mac = validate_mac(row[0], "AP MAC")
            building_id = row[1]
            if not building_id:
                raise ValueError("empty building_id")
        except ValueError as exc:
            _record_error(mode, diagnostics, path, line_no, str(exc))
            continue
        if ap_mac in mapping and mapping[ap_mac] != building_id:
            raise TraceFormatError(
                f"conflicting buildings for AP {ap_mac}: "
                f"{mapping[ap_mac]} vs {building_id}"
            )
        mapping[ap_mac] = building_id
    return mapping


class _LeaseIndex:
    """Point-in-time lookup ip -> lease, assuming non-overlapping leases per IP."""

    def __init__(self, leases: Iterable[DhcpLease]):
        leases = list(leases)
        _check_lease_overlaps(leases)
        self._by_ip: dict[str, tuple[list[int], list[DhcpLease]]] = {}
        grouped: dict[str, list[DhcpLease]] = {}
        for lease in leases:
            grouped.setdefault(lease.ip, []).append(lease)
        for ip, group in grouped.items():
            group.sort(key=lambda l: l.lease_start_s)
            self._by_ip[ip] = ([l.lease_start_s for l in group], group)

    def lookup(self, ip: str, timestamp_s: float) -> DhcpLease | None:
        entry = self._by_ip.get(ip)
        if entry is None:
            return None
        starts, group = entry
        idx = bisect_right(starts, timestamp_s) - 1
        if idx < 0:
            return None
        lease = group[idx]
        return lease if timestamp_s <= lease.lease_end_s else None


def attribute_flows(
    flows: Iterable[FlowRecord],
    leases: Iterable[DhcpLease],
) -> tuple[list[AttributedFlow], int]:
    """Join flows to users via the DHCP lease active at flow start.

    A flow with exactly one leased endpoint yields one attributed flow; a
    flow whose two endpoints are leased to two different users yields one
    record per user. Flows matching no lease (or only self-leases) are
    dropped; the drop count is returned alongside the output.
    """
    index = _LeaseIndex(leases)
    attributed: list[AttributedFlow] = []
    dropped = 0
    for flow in flows:
        src_lease = index.lookup(flow.src_ip, flow.start_s)
        dst_lease = index.lookup(flow.dst_ip, flow.start_s)
        if src_lease is not None and dst_lease is not None \
                and src_lease.user_mac == dst_lease.user_mac:
            dropped += 1
            continue
        matched = False
        if src_lease is not None:
            attributed.append(
                AttributedFlow(
                    user_mac=src_lease.user_mac,
                    remote_ip=flow.dst_ip,
                    direction=FlowDirection.UP,
                    bytes=flow.bytes,
                    packets=flow.packets,
                    start_s=flow.start_s,
                )
            )
            matched = True
        if dst_lease is not None:
            attributed.append(
                AttributedFlow(
                    user_mac=dst_lease.user_mac,
                    remote_ip=flow.src_ip,
                    direction=FlowDirection.DOWN,
                    bytes=flow.bytes,
                    packets=flow.packets,
                    start_s=flow.start_s,
                )
            )
            matched = True
        if not matched:
            dropped += 1
    return attributed, dropped


def filter_top_users(
    attributed_flows: Iterable[AttributedFlow],
    k: int,
) -> set[str]:
    """The k users with the largest total byte volume, up plus down.

    Ties at the cut are broken toward the lexicographically smaller MAC so
    the result is a deterministic, prefix-stable ranking.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    totals: dict[str, int] = {}
    for flow in attributed_flows:
        totals[flow.user_mac] = totals.get(flow.user_mac, 0) + flow.bytes
    ranked = sorted(totals.items(), key=lambda item: (-item[1], item[0]))
    return {mac for mac, _ in ranked[:k]}


def _format_netflow_time(value: float) -> str:
    # repr round-trips exactly; integral floats stay compact ("100.0")
    return repr(value)


def write_association_log(path: str | Path, sessions: Iterable[AssociationSession]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(WLAN_HEADER)
        for s in sessions:
            writer.writerow([s.user_mac, s.ap_mac, s.building_id, s.start_s, s.end_s])


def write_netflow_log(path: str | Path, flows: Iterable[FlowRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(NETFLOW_HEADER)
        for f in flows:
            writer.writerow([
                _format_netflow_time(f.start_s),
                _format_netflow_time(f.finish_s),
                _format_netflow_time(f.duration_s),
                f.src_ip, f.dst_ip, f.protocol.value,
                f.src_port, f.dst_port, f.packets, f.bytes,
            ])


def write_dhcp_leases(path: str | Path, leases: Iterable[DhcpLease]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(DHCP_HEADER)
        for l in leases:
            writer.writerow([l.user_mac, l.ip, l.lease_start_s, l.lease_end_s])


def write_oui_table(path: str | Path, table: dict[str, DeviceType]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(OUI_HEADER)
        for prefix in sorted(table):
            writer.writerow([prefix, table[prefix].value])


def write_building_map(path: str | Path, mapping: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(BUILDING_HEADER)
        for ap_mac in sorted(mapping):
            writer.writerow([ap_mac, mapping[ap_mac]])
