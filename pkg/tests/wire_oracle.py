"""Independent reference encoder for the control wire format.

Deliberately dumb: every frame is assembled by hand with f-string hex or
bytes() arithmetic, sharing no code with boxer.proto.  test_proto compares
the real codec against these encoders, and the frozen byte literals in
test_proto were produced by running this file directly.

Frame layout:

    +----------------+-----+----------------------+
    | length (u32 BE)| tag | payload (len bytes)  |
    +----------------+-----+----------------------+

length counts only the payload, not the tag byte.  Integers are
big-endian.  An endpoint is 4 IPv4 bytes followed by a 2-byte port.
Lists are a 2-byte element count followed by the elements.
"""

TAG_HELLO = 0x01
TAG_ADDRESS_REPLY = 0x02
TAG_REJECT = 0x03
TAG_MEMBER_LIST = 0x04
TAG_MEMBER_UPDATE = 0x05
TAG_CTRL_HELLO = 0x06
TAG_NAT_SETUP_REQ = 0x07
TAG_NAT_SETUP_ACK = 0x08
TAG_NAT_SETUP_ERR = 0x09
TAG_SUBSCRIBE_TREE = 0x0A
TAG_REGISTER_LISTENER = 0x0B
TAG_UNREGISTER_LISTENER = 0x0C


def u8(v):
    assert 0 <= v <= 0xFF
    return bytes([v])


def u16(v):
    assert 0 <= v <= 0xFFFF
    return bytes([v >> 8, v & 0xFF])


def u32(v):
    assert 0 <= v <= 0xFFFFFFFF
    return bytes([(v >> 24) & 0xFF, (v >> 16) & 0xFF, (v >> 8) & 0xFF, v & 0xFF])


def u64(v):
    assert 0 <= v <= 0xFFFFFFFFFFFFFFFF
    return u32(v >> 32) + u32(v & 0xFFFFFFFF)


def endpoint(ip, port):
    parts = [int(p) for p in ip.split(".")]
    assert len(parts) == 4 and all(0 <= p <= 255 for p in parts)
    assert 1 <= port <= 0xFFFF
    return bytes(parts) + u16(port)


def frame(tag, body):
    return u32(len(body)) + u8(tag) + body


def ref_hello(version=1):
    return frame(TAG_HELLO, u8(version))


def ref_address_reply(obs_ip, obs_port, assigned):
    return frame(TAG_ADDRESS_REPLY, endpoint(obs_ip, obs_port) + u32(assigned))


def ref_reject(reason):
    return frame(TAG_REJECT, u8(reason))


def ref_member_list(members):
    body = u16(len(members))
    for node_id, ip, port in members:
        body += u32(node_id) + endpoint(ip, port)
    return frame(TAG_MEMBER_LIST, body)


def ref_member_update(node_id, ip, port):
    return frame(TAG_MEMBER_UPDATE, u32(node_id) + endpoint(ip, port))


def ref_ctrl_hello(node_id):
    return frame(TAG_CTRL_HELLO, u32(node_id))


def ref_nat_setup_req(req_id, src_ip, src_port, dst_ip, dst_port):
    body = u64(req_id) + endpoint(src_ip, src_port) + endpoint(dst_ip, dst_port)
    return frame(TAG_NAT_SETUP_REQ, body)


def ref_nat_setup_ack(req_id):
    return frame(TAG_NAT_SETUP_ACK, u64(req_id))


def ref_nat_setup_err(req_id, code):
    return frame(TAG_NAT_SETUP_ERR, u64(req_id) + u8(code))


def ref_subscribe_tree():
    return frame(TAG_SUBSCRIBE_TREE, b"")


def ref_register_listener(ip, port):
    return frame(TAG_REGISTER_LISTENER, endpoint(ip, port))


def ref_unregister_listener(ip, port):
    return frame(TAG_UNREGISTER_LISTENER, endpoint(ip, port))


if __name__ == "__main__":
    cases = [
        ("hello_v1", ref_hello(1)),
        ("address_reply", ref_address_reply("54.1.2.3", 5000, 1)),
        ("reject_duplicate", ref_reject(1)),
        ("member_list_empty", ref_member_list([])),
        ("member_list_two", ref_member_list([(0, "9.9.9.9", 7077), (1, "54.1.2.3", 5000)])),
        ("member_update", ref_member_update(2, "54.1.2.4", 5000)),
        ("ctrl_hello", ref_ctrl_hello(3)),
        ("nat_setup_req", ref_nat_setup_req(7, "10.0.0.2", 5000, "54.1.2.3", 9000)),
        ("nat_setup_ack", ref_nat_setup_ack(7)),
        ("nat_setup_err", ref_nat_setup_err(7, 1)),
        ("subscribe_tree", ref_subscribe_tree()),
        ("register_listener", ref_register_listener("0.0.0.0", 9000)),
        ("unregister_listener", ref_unregister_listener("0.0.0.0", 9000)),
    ]
    for name, blob in cases:
        print(f"{name}: {blob.hex()}")
