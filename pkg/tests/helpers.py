"""Shared test fixtures: a reference pcap writer and packet builders.

The writer is deliberately independent of the package's reader (plain
struct packing, no shared code) so round-trip tests are a real oracle.
"""

import struct

PCAP_MAGIC = 0xA1B2C3D4


def write_pcap(path, packets, link_type=1, snaplen=65535, byte_order="<"):
    """packets: iterable of (ts_sec, ts_usec, payload bytes)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack(byte_order + "IHHiIII", PCAP_MAGIC, 2, 4, 0, 0,
                             snaplen, link_type))
        for ts_sec, ts_usec, data in packets:
            fh.write(struct.pack(byte_order + "IIII", ts_sec, ts_usec,
                                 len(data), len(data)))
            fh.write(data)


def ether(ethertype, payload, dst=b"\xaa" * 6, src=b"\xbb" * 6):
    return dst + src + struct.pack(">H", ethertype) + payload


def vlan_ether(ethertype, payload, vlan_id=7):
    tag = struct.pack(">HH", 0x8100, vlan_id)[2:]  # keep only the TCI half
    head = b"\xaa" * 6 + b"\xbb" * 6 + struct.pack(">H", 0x8100)
    return head + struct.pack(">H", vlan_id) + struct.pack(">H", ethertype) + payload


def ipv4(proto, payload, src=b"\x0a\x00\x00\x01", dst=b"\x0a\x00\x00\x02",
         ttl=64, ihl_words=5):
    total = ihl_words * 4 + len(payload)
    header = struct.pack(
        ">BBHHHBBH4s4s",
        (4 << 4) | ihl_words, 0, total, 0x1234, 0, ttl, proto, 0, src, dst)
    return header + payload


def ipv6(next_header, payload, src=b"\x20" + b"\x01" * 15,
         dst=b"\x20" + b"\x02" * 15):
    header = struct.pack(">IHBB", 6 << 28, len(payload), next_header, 64)
    return header + src + dst + payload


def udp(sport, dport, payload):
    return struct.pack(">HHHH", sport, dport, 8 + len(payload), 0) + payload


def tcp(sport, dport, payload, data_offset_words=5):
    header = struct.pack(">HHIIBBHHH", sport, dport, 1, 2,
                         data_offset_words << 4, 0x18, 8192, 0, 0)
    return header + payload


def arp_request():
    return (struct.pack(">HHBBH", 1, 0x0800, 6, 4, 1)
            + b"\xbb" * 6 + b"\x0a\x00\x00\x01" + b"\x00" * 6 + b"\x0a\x00\x00\x02")


def icmp_echo():
    return struct.pack(">BBHHH", 8, 0, 0, 1, 1) + b"ping-data"


# ready-made frames
def tcp_ipv4_frame(payload=b"\x17\x03\x03\x00\x20" + b"E" * 32):
    return ether(0x0800, ipv4(6, tcp(443, 51000, payload)))


def udp_ipv4_frame(sport=5353, dport=5353, payload=b"data"):
    return ether(0x0800, ipv4(17, udp(sport, dport, payload)))


def arp_frame():
    return ether(0x0806, arp_request())


def icmpv4_frame():
    return ether(0x0800, ipv4(1, icmp_echo()))


def icmpv6_frame():
    return ether(0x86DD, ipv6(58, struct.pack(">BBH", 128, 0, 0) + b"x" * 8))


def dhcpv4_frame():
    return ether(0x0800, ipv4(17, udp(68, 67, b"\x01" + b"\x00" * 99)))


def dhcpv6_frame():
    return ether(0x86DD, ipv6(17, udp(546, 547, b"\x01" + b"\x00" * 23)))
