"""Device-type classification: on-the-go flutes vs sit-to-use cellos.

Two passes label devices: a manufacturer (OUI prefix) lookup table, then a
marker-traffic heuristic that promotes still-unlabeled prefixes whose
devices talked to any of the configured marker IPs. Devices unlabeled after
both passes stay Unknown and are excluded from pairwise analyses.
"""

from __future__ import annotations

import re
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Mapping

if TYPE_CHECKING:
    from .ingest import AttributedFlow

_MAC_RE = re.compile(r"^[0-9a-f]{2}(?::[0-9a-f]{2}){5}$")


class DeviceType(str, Enum):
    FLUTE = "flute"
    CELLO = "cello"
    UNKNOWN = "unknown"


class PairCategory(str, Enum):
    FF = "FF"
    CC = "CC"
    FC = "FC"


def _prefix_of(mac: str) -> str:
    if not _MAC_RE.match(mac):
        raise ValueError(f"malformed MAC {mac!r}")
    return mac[:8]


def classify_by_oui(user_mac: str, oui_table: Mapping[str, DeviceType]) -> DeviceType:
    """Label a device by its 3-octet manufacturer prefix, Unknown if absent."""
    return oui_table.get(_prefix_of(user_mac), DeviceType.UNKNOWN)


def admob_extension(
    attributed_flows: Iterable["AttributedFlow"],
    marker_ips: set[str],
    labels: Mapping[str, DeviceType],
) -> dict[str, DeviceType]:
    """Promote Unknown devices to flute, per OUI prefix, on marker-IP contact.

    Every prefix owning at least one device that exchanged traffic with a
    marker IP gets all of its Unknown devices relabeled flute. Existing
    flute/cello labels are never overwritten, so the pass is idempotent.
    """
    touched_prefixes = {
        _prefix_of(flow.user_mac)
        for flow in attributed_flows
        if flow.remote_ip in marker_ips
    }
    updated = dict(labels)
    for mac, label in labels.items():
        if label is DeviceType.UNKNOWN and _prefix_of(mac) in touched_prefixes:
            updated[mac] = DeviceType.FLUTE
    return updated


def label_devices(
    user_macs: Iterable[str],
    oui_table: Mapping[str, DeviceType],
    attributed_flows: Iterable["AttributedFlow"],
    marker_ips: set[str],
) -> dict[str, DeviceType]:
    """Full two-pass labeling of a device population."""
    labels = {mac: classify_by_oui(mac, oui_table) for mac in user_macs}
    return admob_extension(attributed_flows, marker_ips, labels)


def pair_category(t1: DeviceType, t2: DeviceType) -> PairCategory:
    """Symmetric category of an encounter pair; Unknown is the caller's problem."""
    if t1 is DeviceType.UNKNOWN or t2 is DeviceType.UNKNOWN:
        raise ValueError("pair_category requires labeled devices; got Unknown")
    if t1 is DeviceType.FLUTE and t2 is DeviceType.FLUTE:
        return PairCategory.FF
    if t1 is DeviceType.CELLO and t2 is DeviceType.CELLO:
        return PairCategory.CC
    return PairCategory.FC
