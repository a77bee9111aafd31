"""Capture reading, filtering, byte-vector conversion, and dataset builds,
checked against an independent reference pcap writer."""

import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import helpers
from bytesgan import pbv
from bytesgan.dataset import load_dataset
from bytesgan.errors import ConfigError, FormatError
from bytesgan.pbv import (FilterPolicy, PacketByteVector, RawPacket,
                          build_dataset, denormalize_values, filter_packet,
                          load_manifest, normalize_octets, read_capture, to_pbv)

POLICY = FilterPolicy()


def mkpkt(data, link_type=1):
    return RawPacket(link_type=link_type, ts_sec=1, ts_usec=2, data=data)


# ---------------------------------------------------------------------------
# capture reading
# ---------------------------------------------------------------------------

def test_read_empty_capture(tmp_path):
    path = tmp_path / "empty.pcap"
    helpers.write_pcap(path, [])
    assert list(read_capture(path)) == []


def test_read_three_packets_round_trip(tmp_path):
    frames = [helpers.tcp_ipv4_frame(), helpers.arp_frame(), helpers.udp_ipv4_frame()]
    packets = [(10 + i, 100 * i, f) for i, f in enumerate(frames)]
    path = tmp_path / "three.pcap"
    helpers.write_pcap(path, packets)
    out = list(read_capture(path))
    assert len(out) == 3
    for i, pkt in enumerate(out):
        assert pkt.data == frames[i]
        assert pkt.ts_sec == 10 + i
        assert pkt.ts_usec == 100 * i
        assert pkt.link_type == 1
    assert out[0].timestamp == pytest.approx(10.0)


def test_read_byte_swapped_capture(tmp_path):
    path = tmp_path / "be.pcap"
    helpers.write_pcap(path, [(1, 2, helpers.arp_frame())], byte_order=">")
    out = list(read_capture(path))
    assert len(out) == 1
    assert out[0].data == helpers.arp_frame()


def test_read_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.pcap"
    path.write_bytes(b"\xde\xad\xbe\xef" + b"\x00" * 20)
    with pytest.raises(FormatError, match="magic"):
        list(read_capture(path))


def test_read_rejects_truncated_records(tmp_path):
    path = tmp_path / "trunc.pcap"
    helpers.write_pcap(path, [(1, 2, helpers.arp_frame()), (3, 4, helpers.arp_frame())])
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="record 1"):
        list(read_capture(path))


def test_read_rejects_short_global_header(tmp_path):
    path = tmp_path / "short.pcap"
    path.write_bytes(b"\xd4\xc3\xb2\xa1\x02\x00")
    with pytest.raises(FormatError):
        list(read_capture(path))


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("frame,reason", [
    (helpers.arp_frame(), "arp"),
    (helpers.icmpv4_frame(), "icmpv4"),
    (helpers.icmpv6_frame(), "icmpv6"),
    (helpers.dhcpv4_frame(), "dhcpv4"),
    (helpers.dhcpv6_frame(), "dhcpv6"),
])
def test_default_policy_drops_management_protocols(frame, reason):
    decision = filter_packet(mkpkt(frame), POLICY)
    assert not decision.keep
    assert decision.reason == reason


def test_tcp_tls_and_plain_udp_kept():
    assert filter_packet(mkpkt(helpers.tcp_ipv4_frame()), POLICY).keep
    assert filter_packet(mkpkt(helpers.udp_ipv4_frame()), POLICY).keep


def test_non_ip_dropped_unless_policy_allows():
    frame = helpers.ether(0x88CC, b"lldp-ish")
    assert filter_packet(mkpkt(frame), POLICY).reason == "non_ip"
    keep_all = FilterPolicy(drop_non_ip=False)
    assert filter_packet(mkpkt(frame), keep_all).keep


def test_vlan_tagged_ip_is_parsed():
    frame = helpers.vlan_ether(0x0800, helpers.ipv4(6, helpers.tcp(1, 2, b"x")))
    assert filter_packet(mkpkt(frame), POLICY).keep
    frame = helpers.vlan_ether(0x0800, helpers.ipv4(1, helpers.icmp_echo()))
    assert filter_packet(mkpkt(frame), POLICY).reason == "icmpv4"


def test_custom_drop_set_and_unknown_protocol_rejected():
    tcp_only_icmp = FilterPolicy(dropped_protocols=frozenset({"icmpv4"}))
    assert filter_packet(mkpkt(helpers.arp_frame()), tcp_only_icmp).reason == "non_ip"
    with pytest.raises(ConfigError):
        FilterPolicy(dropped_protocols=frozenset({"quic"}))


def test_malformed_packets_drop_without_raising():
    assert filter_packet(mkpkt(b""), POLICY).reason == "malformed"
    assert filter_packet(mkpkt(b"\x00" * 10), POLICY).reason == "malformed"
    # ipv4 ethertype but header cut short
    frame = helpers.ether(0x0800, b"\x45\x00\x00")
    assert filter_packet(mkpkt(frame), POLICY).reason == "malformed"
    # unsupported link type
    assert filter_packet(mkpkt(b"\x45" + b"\x00" * 40, link_type=113),
                         POLICY).reason == "malformed"


def test_raw_ip_link_type():
    pkt = mkpkt(helpers.ipv4(6, helpers.tcp(1, 2, b"pay")), link_type=101)
    assert filter_packet(pkt, POLICY).keep
    pkt = mkpkt(helpers.ipv4(1, helpers.icmp_echo()), link_type=101)
    assert filter_packet(pkt, POLICY).reason == "icmpv4"
    pkt = mkpkt(b"\xf0" + b"\x00" * 30, link_type=101)
    assert filter_packet(pkt, POLICY).reason == "malformed"


def test_zero_payload_policy():
    strict = FilterPolicy(drop_zero_payload=True)
    ack = helpers.ether(0x0800, helpers.ipv4(6, helpers.tcp(1, 2, b"")))
    assert filter_packet(mkpkt(ack), strict).reason == "zero_payload"
    assert filter_packet(mkpkt(ack), POLICY).keep
    data = helpers.tcp_ipv4_frame()
    assert filter_packet(mkpkt(data), strict).keep


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200), st.sampled_from([1, 101, 9]))
def test_filter_total_over_arbitrary_bytes(blob, link_type):
    decision = filter_packet(mkpkt(blob, link_type=link_type), POLICY)
    assert decision.keep in (True, False)
    if not decision.keep:
        assert isinstance(decision.reason, str)


# ---------------------------------------------------------------------------
# PBV conversion
# ---------------------------------------------------------------------------

def test_normalization_round_trip_all_byte_values():
    octets = np.arange(256, dtype=np.uint8)
    values = normalize_octets(octets)
    assert values.min() == -1.0 and values.max() == 1.0
    assert np.array_equal(denormalize_values(values), octets)


def test_pbv_padding_and_endpoints():
    # 100-octet datagram: first 100 mapped, the rest exactly -1
    payload = bytes(range(80))
    frame = helpers.ether(0x0800, helpers.ipv4(6, helpers.tcp(1, 2, payload))[:100])
    policy = FilterPolicy(zero_ip_addresses=False)
    assert filter_packet(mkpkt(frame), policy).keep
    vec = to_pbv(mkpkt(frame), policy)
    assert len(vec) == 1480
    datagram = frame[14:]
    assert np.array_equal(vec.octets[:100], np.frombuffer(datagram, np.uint8))
    assert np.all(vec.values[100:] == -1.0)
    # octet 0xFF at position 0 maps to +1 (non-IP kept packet, no zeroing)
    policy = FilterPolicy(drop_non_ip=False)
    frame = helpers.ether(0x88CC, b"\xff" + b"\x10" * 10)
    assert filter_packet(mkpkt(frame), policy).keep
    vec = to_pbv(mkpkt(frame), policy)
    assert vec.values[0] == 1.0
    # all-zero datagram maps to all -1
    vec = PacketByteVector(np.zeros(1480, dtype=np.uint8))
    assert np.all(vec.values == -1.0)


@pytest.mark.parametrize("length", [0, 1, 739, 1480, 1481, 65535])
def test_pbv_length_invariant(length):
    # non-IP path keeps arbitrary datagram lengths in play
    policy = FilterPolicy(drop_non_ip=False)
    frame = helpers.ether(0x88CC, b"\xab" * length)
    assert filter_packet(mkpkt(frame), policy).keep
    vec = to_pbv(mkpkt(frame), policy)
    assert vec.octets.shape == (1480,)
    assert np.all(vec.values >= -1.0) and np.all(vec.values <= 1.0)
    used = min(length, 1480)
    assert np.all(vec.octets[:used] == 0xAB)
    assert np.all(vec.octets[used:] == 0)


def test_pbv_truncates_long_datagrams():
    frame = helpers.ether(0x0800, helpers.ipv4(6, helpers.tcp(1, 2, b"\x7f" * 3000)))
    vec = to_pbv(mkpkt(frame), POLICY)
    data = frame[14:]
    expect = bytearray(data[:1480])
    expect[12:20] = bytes(8)  # zeroed addresses
    assert np.array_equal(vec.octets, np.frombuffer(bytes(expect), np.uint8))


def test_ip_address_zeroing():
    frame = helpers.tcp_ipv4_frame()
    vec = to_pbv(mkpkt(frame), POLICY)
    assert np.all(vec.octets[12:20] == 0)
    vec_keep = to_pbv(mkpkt(frame), FilterPolicy(zero_ip_addresses=False))
    assert np.any(vec_keep.octets[12:20] != 0)
    # ipv6: addresses live at bytes 8..39
    frame6 = helpers.icmpv6_frame()
    vec6 = to_pbv(mkpkt(frame6), FilterPolicy(dropped_protocols=frozenset({"arp"})))
    assert np.all(vec6.octets[8:40] == 0)


def test_transport_header_excision_switch():
    payload = b"\xde\xad\xbe\xef" * 4
    frame = helpers.ether(0x0800, helpers.ipv4(6, helpers.tcp(80, 81, payload)))
    ip_header = frame[14:34]
    no_l4 = to_pbv(mkpkt(frame), FilterPolicy(include_transport_header=False,
                                              zero_ip_addresses=False))
    assert no_l4.octets[:36].tobytes() == ip_header + payload
    with_l4 = to_pbv(mkpkt(frame), FilterPolicy(zero_ip_addresses=False))
    assert with_l4.octets[20:22].tobytes() == b"\x00\x50"  # sport 80


def test_pbv_from_values_validates_form():
    octets = np.arange(1480, dtype=np.int64) % 256
    vec = PacketByteVector.from_values(normalize_octets(octets))
    assert np.array_equal(vec.octets, octets.astype(np.uint8))
    with pytest.raises(ValueError):
        PacketByteVector.from_values(np.full(1480, 0.1234567))
    with pytest.raises(ValueError):
        PacketByteVector(np.zeros(100, dtype=np.uint8))


# ---------------------------------------------------------------------------
# dataset builds
# ---------------------------------------------------------------------------

def caps(tmp_path):
    a = tmp_path / "a.pcap"
    helpers.write_pcap(a, [(1, 0, helpers.tcp_ipv4_frame()),
                           (2, 0, helpers.arp_frame()),
                           (3, 0, helpers.udp_ipv4_frame())])
    b = tmp_path / "b.pcap"
    helpers.write_pcap(b, [(4, 0, helpers.tcp_ipv4_frame(b"\x01" * 64)),
                           (5, 0, helpers.icmpv4_frame())])
    return a, b


def test_build_dataset_counts_and_round_trip(tmp_path):
    a, b = caps(tmp_path)
    out = tmp_path / "ds.pbvd"
    summary = build_dataset([(a, "web"), (b, "mail")], POLICY, out)
    assert summary.total_read == 5
    assert summary.kept == {"web": 2, "mail": 1}
    assert summary.dropped["web"] == {"arp": 1}
    assert summary.dropped["mail"] == {"icmpv4": 1}
    assert summary.total_kept + summary.total_dropped == summary.total_read
    ds = load_dataset(out)
    assert ds.n == 3
    assert ds.schema.names == ("mail", "web")
    assert ds.labels.tolist() == [1, 1, 0]
    expect = to_pbv(mkpkt(helpers.tcp_ipv4_frame()), POLICY).octets
    assert np.array_equal(ds.octets[0], expect)


def test_build_dataset_deterministic(tmp_path):
    a, b = caps(tmp_path)
    out1, out2 = tmp_path / "d1.pbvd", tmp_path / "d2.pbvd"
    build_dataset([(a, "web"), (b, None)], POLICY, out1, classes=["web", "mail"])
    build_dataset([(a, "web"), (b, None)], POLICY, out2, classes=["web", "mail"])
    d1 = hashlib.sha256(out1.read_bytes()).hexdigest()
    d2 = hashlib.sha256(out2.read_bytes()).hexdigest()
    assert d1 == d2


def test_build_dataset_all_filtered(tmp_path):
    cap = tmp_path / "arp.pcap"
    helpers.write_pcap(cap, [(i, 0, helpers.arp_frame()) for i in range(4)])
    out = tmp_path / "ds.pbvd"
    summary = build_dataset([(cap, "noise")], POLICY, out,
                            classes=["noise", "signal"])
    assert summary.total_kept == 0
    assert summary.dropped["noise"] == {"arp": 4}
    ds = load_dataset(out)
    assert ds.n == 0


def test_build_dataset_rejects_single_class_schema(tmp_path):
    cap = tmp_path / "one.pcap"
    helpers.write_pcap(cap, [(0, 0, helpers.tcp_ipv4_frame())])
    with pytest.raises(ConfigError, match="at least 2"):
        build_dataset([(cap, "only")], POLICY, tmp_path / "o.pbvd")


def test_build_dataset_proportions(tmp_path):
    paths = []
    for i in range(7):
        p = tmp_path / f"c{i}.pcap"
        helpers.write_pcap(p, [(j, 0, helpers.tcp_ipv4_frame()) for j in range(10)])
        paths.append((p, f"app{i}"))
    out = tmp_path / "ds.pbvd"
    summary = build_dataset(paths, POLICY, out)
    props = summary.proportions()
    assert all(round(v, 2) == 14.29 for v in props.values())
    assert load_dataset(out).n == 70


def test_build_dataset_schema_validation(tmp_path):
    a, _ = caps(tmp_path)
    with pytest.raises(ConfigError, match="duplicate"):
        build_dataset([(a, "x")], POLICY, tmp_path / "o.pbvd", classes=["x", "x"])
    with pytest.raises(ConfigError, match="not in declared"):
        build_dataset([(a, "y")], POLICY, tmp_path / "o.pbvd", classes=["x", "z"])


def test_build_dataset_propagates_read_errors(tmp_path):
    missing = tmp_path / "nope.pcap"
    with pytest.raises(OSError, match="nope"):
        build_dataset([(missing, "x")], POLICY, tmp_path / "o.pbvd",
                      classes=["x", "y"])
    bad = tmp_path / "bad.pcap"
    bad.write_bytes(b"\xde\xad\xbe\xef" + b"\x00" * 40)
    with pytest.raises(FormatError, match="bad.pcap"):
        build_dataset([(bad, "x")], POLICY, tmp_path / "o.pbvd",
                      classes=["x", "y"])


def test_unlabeled_entries_store_sentinel(tmp_path):
    a, _ = caps(tmp_path)
    out = tmp_path / "u.pbvd"
    build_dataset([(a, None)], POLICY, out, classes=["w", "v"])
    ds = load_dataset(out)
    assert np.all(ds.labels == -1)
    assert ds.schema.names == ("w", "v")


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    doc = {"classes": ["a", "b"],
           "entries": [{"path": "x.pcap", "label": "a"},
                       {"path": "y.pcap", "label": None}]}
    path = tmp_path / "m.json"
    path.write_text(json.dumps(doc))
    classes, entries = load_manifest(path)
    assert classes == ["a", "b"]
    assert entries == [("x.pcap", "a"), ("y.pcap", None)]


def test_manifest_rejects_unknown_keys_and_shapes(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"entries": [], "extra": 1}))
    with pytest.raises(ConfigError, match="unknown"):
        load_manifest(path)
    path.write_text(json.dumps({"entries": [{"label": "a"}]}))
    with pytest.raises(ConfigError, match="path"):
        load_manifest(path)
    path.write_text("{not json")
    with pytest.raises(FormatError):
        load_manifest(path)
