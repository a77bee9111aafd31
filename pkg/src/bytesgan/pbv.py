"""Packet capture reading, protocol filtering, and Packet Byte Vectors.

A Packet Byte Vector is the first 1480 octets of a packet's network-layer
datagram (link header stripped, IP addresses zeroed by default), zero-padded
to length 1480 and normalized octet-wise to [-1, 1] via b / 127.5 - 1. The
normalization range matches the tanh output of the generator so real and
generated samples live in one domain.

Filtering drops management protocols that carry no application signal
(ARP, DHCPv4/v6, ICMPv4/v6) plus, by default, anything that is not IP.
Drop decisions need only the link and network headers; packets whose
headers cannot be parsed are dropped and counted as malformed rather than
aborting a dataset build.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

PBV_LENGTH = 1480

PBVD_MAGIC = b"PBVD"
PBVD_VERSION = 1
PBVD_UNLABELED = 0xFFFF

PCAP_MAGIC_LE = 0xA1B2C3D4

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW_IP = 101

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_ARP = 0x0806
ETHERTYPE_IPV6 = 0x86DD
ETHERTYPE_VLAN = (0x8100, 0x88A8, 0x9100)

IP_PROTO_ICMPV4 = 1
IP_PROTO_TCP = 6
IP_PROTO_UDP = 17
IP_PROTO_ICMPV6 = 58

DROPPABLE_PROTOCOLS = frozenset({"arp", "dhcpv4", "dhcpv6", "icmpv4", "icmpv6"})
DEFAULT_DROPPED = frozenset({"arp", "dhcpv4", "dhcpv6", "icmpv4", "icmpv6"})

# IPv6 extension headers walked to find the upper-layer protocol
_IPV6_EXT_GENERIC = {0, 43, 60}   # hop-by-hop, routing, destination options
_IPV6_EXT_FRAGMENT = 44
_IPV6_EXT_AH = 51


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize_octets(octets, dtype=np.float64):
    """Map octets b in [0, 255] to b / 127.5 - 1 in [-1, 1]."""
    dtype = np.dtype(dtype)
    scale = dtype.type(127.5)
    return np.asarray(octets).astype(dtype) / scale - dtype.type(1.0)


def denormalize_values(values):
    """Recover octets from normalized values; exact for b / 127.5 - 1 inputs."""
    values = np.asarray(values, dtype=np.float64)
    octets = np.rint((values + 1.0) * 127.5)
    if (octets < 0).any() or (octets > 255).any():
        raise ValueError("values outside the normalized byte range")
    return octets.astype(np.uint8)


@dataclass(frozen=True)
class PacketByteVector:
    """Fixed-length normalized byte vector; stored as the raw octets."""

    octets: np.ndarray  # (1480,) uint8

    def __post_init__(self):
        arr = np.asarray(self.octets, dtype=np.uint8)
        if arr.shape != (PBV_LENGTH,):
            raise ValueError(f"a PBV holds exactly {PBV_LENGTH} octets, got {arr.shape}")
        object.__setattr__(self, "octets", arr)

    @property
    def values(self):
        return normalize_octets(self.octets)

    @classmethod
    def from_values(cls, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (PBV_LENGTH,):
            raise ValueError(f"expected {PBV_LENGTH} values, got {values.shape}")
        octets = denormalize_values(values)
        if not np.allclose(normalize_octets(octets), values, rtol=0, atol=1e-12):
            raise ValueError("values are not of the form b / 127.5 - 1")
        return cls(octets)

    def __len__(self):
        return PBV_LENGTH


# ---------------------------------------------------------------------------
# capture reading
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RawPacket:
    """One captured record: link type, timestamp, and the captured bytes."""

    link_type: int
    ts_sec: int
    ts_usec: int
    data: bytes

    @property
    def timestamp(self):
        return self.ts_sec + self.ts_usec * 1e-6


def read_capture(path):
    """Yield RawPacket records from a classic pcap file, in file order."""
    with open(path, "rb") as fh:
        header = fh.read(24)
        if len(header) < 24:
            raise FormatError(f"{path}: too short for a pcap global header")
        (magic,) = struct.unpack("<I", header[:4])
        if magic == PCAP_MAGIC_LE:
            endian = "<"
        elif magic == struct.unpack(">I", struct.pack("<I", PCAP_MAGIC_LE))[0]:
            endian = ">"
        else:
            raise FormatError(f"{path}: bad pcap magic 0x{magic:08X}")
        _, _, _, _, snaplen, link_type = struct.unpack(endian + "HHiIII", header[4:])
        index = 0
        while True:
            rec = fh.read(16)
            if not rec:
                return
            if len(rec) < 16:
                raise FormatError(f"{path}: record {index} has a truncated header")
            ts_sec, ts_usec, incl_len, orig_len = struct.unpack(endian + "IIII", rec)
            if snaplen and incl_len > max(snaplen, 65535):
                raise FormatError(
                    f"{path}: record {index} captured length {incl_len} exceeds "
                    f"snap length {snaplen}")
            data = fh.read(incl_len)
            if len(data) < incl_len:
                raise FormatError(f"{path}: record {index} body is truncated")
            yield RawPacket(link_type=link_type, ts_sec=ts_sec, ts_usec=ts_usec,
                            data=data)
            index += 1


# ---------------------------------------------------------------------------
# protocol parsing and filtering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterPolicy:
    dropped_protocols: frozenset = DEFAULT_DROPPED
    drop_non_ip: bool = True
    zero_ip_addresses: bool = True
    drop_zero_payload: bool = False      # drop TCP/UDP packets with no payload
    include_transport_header: bool = True  # if False, excise the TCP/UDP header

    def __post_init__(self):
        protos = frozenset(p.lower() for p in self.dropped_protocols)
        unknown = protos - DROPPABLE_PROTOCOLS
        if unknown:
            raise ConfigError(f"unknown protocols in filter policy: {sorted(unknown)}")
        object.__setattr__(self, "dropped_protocols", protos)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        unknown = set(doc) - {f.name for f in cls.__dataclass_fields__.values()}
        if unknown:
            raise ConfigError(f"unknown filter policy keys: {sorted(unknown)}")
        if "dropped_protocols" in doc:
            doc["dropped_protocols"] = frozenset(doc["dropped_protocols"])
        return cls(**doc)


@dataclass(frozen=True)
class ParsedPacket:
    """Link/network/transport view of a raw packet, as far as parsing got."""

    network_offset: int   # where the IP datagram starts
    ip_version: int       # 4 or 6; 0 when not IP
    protocol: str | None  # canonical drop-list name, or None
    transport_proto: int | None
    transport_offset: int | None  # offset of the TCP/UDP header
    payload_offset: int | None    # offset of the transport payload


class PacketParseError(Exception):
    """Internal: headers needed for a drop decision could not be parsed."""


def _parse_ipv4(data, off):
    if len(data) < off + 20:
        raise PacketParseError("short ipv4 header")
    ihl = (data[off] & 0x0F) * 4
    if data[off] >> 4 != 4 or ihl < 20 or len(data) < off + ihl:
        raise PacketParseError("bad ipv4 header")
    proto = data[off + 9]
    return proto, off + ihl


def _parse_ipv6(data, off):
    if len(data) < off + 40:
        raise PacketParseError("short ipv6 header")
    if data[off] >> 4 != 6:
        raise PacketParseError("bad ipv6 version")
    nxt = data[off + 6]
    cur = off + 40
    for _ in range(8):  # bounded extension-header walk
        if nxt in _IPV6_EXT_GENERIC:
            if len(data) < cur + 8:
                return nxt, None
            new_nxt = data[cur]
            cur += (data[cur + 1] + 1) * 8
        elif nxt == _IPV6_EXT_FRAGMENT:
            if len(data) < cur + 8:
                return nxt, None
            new_nxt = data[cur]
            cur += 8
        elif nxt == _IPV6_EXT_AH:
            if len(data) < cur + 8:
                return nxt, None
            new_nxt = data[cur]
            cur += (data[cur + 1] + 2) * 4
        else:
            return nxt, cur
        nxt = new_nxt
    return nxt, None


def parse_packet(pkt: RawPacket) -> ParsedPacket:
    """Classify a packet's protocol chain; raises PacketParseError when the
    link or network header is unusable."""
    data = pkt.data
    if pkt.link_type == LINKTYPE_ETHERNET:
        if len(data) < 14:
            raise PacketParseError("short ethernet frame")
        ethertype = (data[12] << 8) | data[13]
        off = 14
        while ethertype in ETHERTYPE_VLAN:
            if len(data) < off + 4:
                raise PacketParseError("short vlan tag")
            ethertype = (data[off + 2] << 8) | data[off + 3]
            off += 4
        if ethertype == ETHERTYPE_ARP:
            return ParsedPacket(off, 0, "arp", None, None, None)
        if ethertype == ETHERTYPE_IPV4:
            version = 4
        elif ethertype == ETHERTYPE_IPV6:
            version = 6
        else:
            return ParsedPacket(off, 0, None, None, None, None)  # non-IP
    elif pkt.link_type == LINKTYPE_RAW_IP:
        off = 0
        if not data:
            raise PacketParseError("empty raw-ip packet")
        version = data[0] >> 4
        if version not in (4, 6):
            raise PacketParseError(f"raw-ip version nibble {version}")
    else:
        raise PacketParseError(f"unsupported link type {pkt.link_type}")

    if version == 4:
        proto, thoff = _parse_ipv4(data, off)
        icmp = "icmpv4" if proto == IP_PROTO_ICMPV4 else None
        dhcp_ports = (67, 68)
    else:
        proto, thoff = _parse_ipv6(data, off)
        icmp = "icmpv6" if proto == IP_PROTO_ICMPV6 else None
        dhcp_ports = (546, 547)

    protocol = icmp
    payload_off = None
    transport_off = None
    if proto in (IP_PROTO_TCP, IP_PROTO_UDP) and thoff is not None:
        transport_off = thoff
        if proto == IP_PROTO_UDP:
            if len(data) >= thoff + 8:
                sport = (data[thoff] << 8) | data[thoff + 1]
                dport = (data[thoff + 2] << 8) | data[thoff + 3]
                if sport in dhcp_ports or dport in dhcp_ports:
                    protocol = "dhcpv4" if version == 4 else "dhcpv6"
                payload_off = thoff + 8
        else:
            if len(data) >= thoff + 20:
                doff = (data[thoff + 12] >> 4) * 4
                if doff >= 20 and len(data) >= thoff + doff:
                    payload_off = thoff + doff
    return ParsedPacket(off, version, protocol, proto if version else None,
                        transport_off, payload_off)


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reason: str | None = None  # drop reason; None when kept


def filter_packet(pkt: RawPacket, policy: FilterPolicy) -> FilterDecision:
    """Pure keep/drop decision; never raises on arbitrary packet bytes."""
    try:
        parsed = parse_packet(pkt)
    except PacketParseError:
        return FilterDecision(False, "malformed")
    if parsed.ip_version == 0:
        if parsed.protocol == "arp" and "arp" in policy.dropped_protocols:
            return FilterDecision(False, "arp")
        if policy.drop_non_ip:
            return FilterDecision(False, "non_ip")
        return FilterDecision(True)
    if parsed.protocol in policy.dropped_protocols:
        return FilterDecision(False, parsed.protocol)
    if policy.drop_zero_payload and parsed.payload_offset is not None \
            and parsed.payload_offset >= len(pkt.data):
        return FilterDecision(False, "zero_payload")
    return FilterDecision(True)


def to_pbv(pkt: RawPacket, policy: FilterPolicy) -> PacketByteVector:
    """Network-layer datagram -> fixed-length octet vector.

    Strips the link header, zeroes the IP source/destination fields when the
    policy asks for it, optionally excises the transport header, then
    truncates or zero-pads to 1480 octets. Callers must have kept the packet
    through filter_packet first.
    """
    parsed = parse_packet(pkt)
    data = bytearray(pkt.data[parsed.network_offset:])
    rel = lambda absolute: absolute - parsed.network_offset
    if policy.zero_ip_addresses and parsed.ip_version == 4 and len(data) >= 20:
        data[12:20] = bytes(8)
    elif policy.zero_ip_addresses and parsed.ip_version == 6 and len(data) >= 40:
        data[8:40] = bytes(32)
    if not policy.include_transport_header and parsed.transport_offset is not None \
            and parsed.payload_offset is not None:
        del data[rel(parsed.transport_offset):rel(parsed.payload_offset)]
    octets = np.zeros(PBV_LENGTH, dtype=np.uint8)
    used = min(len(data), PBV_LENGTH)
    octets[:used] = np.frombuffer(bytes(data[:used]), dtype=np.uint8)
    return PacketByteVector(octets)


# ---------------------------------------------------------------------------
# dataset building
# ---------------------------------------------------------------------------

@dataclass
class BuildSummary:
    """Per-class kept counts and per-reason drop counts for one build."""

    classes: tuple
    kept: dict = field(default_factory=dict)       # class name or None -> count
    dropped: dict = field(default_factory=dict)    # class name or None -> {reason: n}
    total_read: int = 0

    @property
    def total_kept(self):
        return sum(self.kept.values())

    @property
    def total_dropped(self):
        return sum(sum(r.values()) for r in self.dropped.values())

    def proportions(self):
        """Share of kept samples per class, in percent."""
        total = self.total_kept
        if not total:
            return {}
        return {name: 100.0 * count / total for name, count in self.kept.items()}

    def to_dict(self):
        def key(name):
            return name if name is not None else "<unlabeled>"

        return {
            "classes": list(self.classes),
            "total_read": self.total_read,
            "total_kept": self.total_kept,
            "total_dropped": self.total_dropped,
            "kept": {key(k): v for k, v in sorted(self.kept.items(), key=lambda kv: key(kv[0]))},
            "dropped": {key(k): dict(sorted(v.items()))
                        for k, v in sorted(self.dropped.items(), key=lambda kv: key(kv[0]))},
            "proportions_pct": {key(k): round(v, 2)
                                for k, v in sorted(self.proportions().items(),
                                                   key=lambda kv: key(kv[0]))},
        }


def write_pbvd(path, octet_rows, labels, class_names):
    """Serialize sample rows to the PBVD little-endian binary format."""
    octet_rows = np.asarray(octet_rows, dtype=np.uint8)
    n = octet_rows.shape[0]
    if octet_rows.ndim != 2 or octet_rows.shape[1] != PBV_LENGTH:
        raise ValueError(f"octet rows must be (n, {PBV_LENGTH})")
    labels = np.asarray(labels, dtype=np.int64)
    store = np.where(labels < 0, PBVD_UNLABELED, labels).astype("<u2")
    with open(path, "wb") as fh:
        fh.write(PBVD_MAGIC)
        fh.write(struct.pack("<HH", PBVD_VERSION, len(class_names)))
        for name in class_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(struct.pack("<Q", n))
        body = np.empty((n, 2 + PBV_LENGTH), dtype=np.uint8)
        body[:, :2] = store.view(np.uint8).reshape(n, 2)
        body[:, 2:] = octet_rows
        fh.write(body.tobytes())


def build_dataset(entries, policy: FilterPolicy, out, classes=None) -> BuildSummary:
    """Convert labeled captures into one PBVD dataset file.

    entries: sequence of (pcap path, class name or None). The class schema is
    either given explicitly or derived as the sorted set of labels present.
    Output bytes depend only on the inputs, so repeated builds are identical.
    """
    entries = [(str(p), lab) for p, lab in entries]
    present = sorted({lab for _, lab in entries if lab is not None})
    if classes is None:
        classes = present
    else:
        classes = list(classes)
        if len(set(classes)) != len(classes):
            raise ConfigError("duplicate class names in schema")
        missing = set(present) - set(classes)
        if missing:
            raise ConfigError(f"labels not in declared schema: {sorted(missing)}")
    if len(classes) == 1:
        raise ConfigError(
            "a labeled dataset needs at least 2 classes; declare the full "
            "schema via 'classes' when building one class at a time")
    label_index = {name: i for i, name in enumerate(classes)}

    summary = BuildSummary(classes=tuple(classes))
    rows, row_labels = [], []
    for path, label in entries:
        kept_bucket = summary.kept.setdefault(label, 0)
        drop_bucket = summary.dropped.setdefault(label, {})
        try:
            for pkt in read_capture(path):
                summary.total_read += 1
                decision = filter_packet(pkt, policy)
                if not decision.keep:
                    drop_bucket[decision.reason] = drop_bucket.get(decision.reason, 0) + 1
                    continue
                rows.append(to_pbv(pkt, policy).octets)
                row_labels.append(label_index[label] if label is not None else -1)
                summary.kept[label] = summary.kept[label] + 1
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise OSError(f"cannot read capture {path}: {exc}") from exc
    octet_rows = np.vstack(rows) if rows else np.empty((0, PBV_LENGTH), dtype=np.uint8)
    write_pbvd(out, octet_rows, np.asarray(row_labels, dtype=np.int64), classes)
    return summary


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def load_manifest(path):
    """Parse a build manifest: {"classes": [...]?, "entries": [{path, label}]}.

    Returns (classes or None, entries). Unknown keys are rejected so typos
    cannot silently change a build.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: manifest must be a JSON object")
    unknown = set(doc) - {"classes", "entries"}
    if unknown:
        raise ConfigError(f"{path}: unknown manifest keys: {sorted(unknown)}")
    if "entries" not in doc or not isinstance(doc["entries"], list):
        raise ConfigError(f"{path}: manifest needs an 'entries' list")
    entries = []
    for i, item in enumerate(doc["entries"]):
        if not isinstance(item, dict) or set(item) - {"path", "label"}:
            raise ConfigError(f"{path}: entry {i} must be {{path, label}}")
        if "path" not in item:
            raise ConfigError(f"{path}: entry {i} is missing 'path'")
        label = item.get("label")
        if label is not None and not isinstance(label, str):
            raise ConfigError(f"{path}: entry {i} label must be a string or null")
        entries.append((item["path"], label))
    classes = doc.get("classes")
    if classes is not None and (not isinstance(classes, list)
                                or any(not isinstance(c, str) for c in classes)):
        raise ConfigError(f"{path}: 'classes' must be a list of strings")
    return classes, entries
