"""Tests for typed messages, codecs, the simulated network, and byte ledger."""

import numpy as np
import pytest

from fieldslam.comms import (
    ENVELOPE_SIZE,
    BandwidthLedger,
    CommsEndpoint,
    Message,
    MessageKind,
    PeerLink,
    SimulatedNetwork,
    decode_descriptor_announcement,
    decode_keyframe_poses,
    decode_loop_signal,
    encode_descriptor_announcement,
    encode_keyframe_poses,
    encode_loop_signal,
)
from fieldslam.core_math import SE3Pose, se3_exp


def _random_pose(rng):
    return se3_exp(rng.normal(scale=0.6, size=6))


def _message(kind, sender, recipient, seq, t_send, payload):
    return Message(kind=kind, sender=sender, recipient=recipient, seq=seq,
                   t_send=t_send, payload=payload)


# ---------------------------------------------------------------------------
# Envelope
# ---------------------------------------------------------------------------


def test_envelope_roundtrip_preserves_every_field():
    msg = _message(MessageKind.KEYFRAME_POSES, 7, 9, 2 ** 40, 123.456,
                   b"\x01\x02\x03")
    wire = msg.encode()
    assert len(wire) == ENVELOPE_SIZE + 3
    assert msg.wire_size == len(wire)
    back = Message.decode(wire)
    assert back == msg
    assert back.kind is MessageKind.KEYFRAME_POSES
    assert back.payload_size == 3


def test_envelope_decode_rejects_truncated_and_mismatched():
    msg = _message(MessageKind.LOOP_CLOSURE_SIGNAL, 0, 1, 5, 0.0, b"abcd")
    wire = msg.encode()
    with pytest.raises(ValueError, match="truncated"):
        Message.decode(wire[: ENVELOPE_SIZE - 1])
    with pytest.raises(ValueError, match="length mismatch"):
        Message.decode(wire + b"\x00")
    with pytest.raises(ValueError, match="length mismatch"):
        Message.decode(wire[:-1])


# ---------------------------------------------------------------------------
# Payload codecs
# ---------------------------------------------------------------------------


def test_descriptor_announcement_roundtrip_is_float32_exact():
    rng = np.random.default_rng(11)
    entries = [(int(kf_id), rng.normal(size=256)) for kf_id in
               (0, 3, 2 ** 50)]
    payload = encode_descriptor_announcement(entries)
    back = decode_descriptor_announcement(payload)
    assert [kf for kf, _ in back] == [kf for kf, _ in entries]
    for (_, desc_in), (_, desc_out) in zip(entries, back):
        expected = desc_in.astype("<f4").astype(np.float64)
        assert np.array_equal(desc_out, expected)


def test_descriptor_announcement_payload_size_matches_arithmetic():
    rng = np.random.default_rng(12)
    entries = [(i, rng.normal(size=256)) for i in range(10)]
    payload = encode_descriptor_announcement(entries)
    # 4-byte count, then per keyframe an 8-byte id plus 256 float32 values.
    assert len(payload) == 4 + 10 * (8 + 256 * 4)
    msg = _message(MessageKind.DESCRIPTOR_ANNOUNCEMENT, 0, 1, 0, 0.0, payload)
    assert msg.wire_size == ENVELOPE_SIZE + 4 + 10 * (1024 + 8)


def test_descriptor_announcement_rejects_bad_shape_and_trailing_bytes():
    with pytest.raises(ValueError, match="256"):
        encode_descriptor_announcement([(0, np.zeros(255))])
    good = encode_descriptor_announcement([(0, np.zeros(256))])
    with pytest.raises(ValueError, match="trailing"):
        decode_descriptor_announcement(good + b"\x00")


def test_keyframe_pose_roundtrip_recovers_rotation_and_translation():
    rng = np.random.default_rng(13)
    entries = [(i * 7, _random_pose(rng)) for i in range(5)]
    back = decode_keyframe_poses(encode_keyframe_poses(entries))
    assert [kf for kf, _ in back] == [kf for kf, _ in entries]
    for (_, pose_in), (_, pose_out) in zip(entries, back):
        assert np.allclose(pose_out.rotation, pose_in.rotation, atol=1e-6)
        assert np.allclose(pose_out.translation, pose_in.translation,
                           atol=1e-6)
        rot = pose_out.rotation
        assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-12)


def test_keyframe_pose_payload_size_and_trailing_error():
    rng = np.random.default_rng(14)
    payload = encode_keyframe_poses([(3, _random_pose(rng))])
    assert len(payload) == 4 + (8 + 7 * 4)
    with pytest.raises(ValueError, match="trailing"):
        decode_keyframe_poses(payload + b"\x00\x00")


def test_loop_signal_roundtrip_and_size():
    pairs = [(5, 900, 0.971), (2 ** 33, 1, 0.5)]
    payload = encode_loop_signal(pairs)
    assert len(payload) == 4 + 2 * (8 + 8 + 4)
    back = decode_loop_signal(payload)
    assert [(a, b) for a, b, _ in back] == [(a, b) for a, b, _ in pairs]
    for (_, _, s_in), (_, _, s_out) in zip(pairs, back):
        assert abs(s_out - s_in) < 1e-6
    with pytest.raises(ValueError, match="trailing"):
        decode_loop_signal(payload + b"\x00")


# ---------------------------------------------------------------------------
# Bandwidth ledger
# ---------------------------------------------------------------------------


def test_ledger_totals_match_hand_counted_bytes():
    ledger = BandwidthLedger()
    ledger.record(_message(MessageKind.DESCRIPTOR_ANNOUNCEMENT, 0, 1, 0, 0.0,
                           b"a" * 100))
    ledger.record(_message(MessageKind.DESCRIPTOR_ANNOUNCEMENT, 1, 0, 1, 0.0,
                           b"b" * 40))
    ledger.record(_message(MessageKind.NETWORK_PARAMETERS, 0, 1, 2, 0.0,
                           b"c" * 999))
    ledger.record(_message(MessageKind.KEYFRAME_POSES, 1, 2, 3, 0.0,
                           b"d" * 76))
    cols = ledger.column_totals()
    assert cols["VD"] == 140
    assert cols["NP"] == 999
    assert cols["Pose"] == 76
    assert cols["Signal"] == 0
    assert cols["Images"] == 0
    assert cols["Total"] == 140 + 999 + 76
    # Pair filter treats the pair as unordered and accepts either order.
    assert ledger.bytes_for(pair=(0, 1)) == 140 + 999
    assert ledger.bytes_for(pair=(1, 0)) == 140 + 999
    assert ledger.bytes_for(pair=(1, 2)) == 76
    assert ledger.bytes_for(kind=MessageKind.DESCRIPTOR_ANNOUNCEMENT) == 140
    assert ledger.pairs() == [(0, 1), (1, 2)]


def test_ledger_csv_rows_are_exact(tmp_path):
    ledger = BandwidthLedger()
    ledger.record(_message(MessageKind.LOOP_CLOSURE_SIGNAL, 2, 0, 0, 0.0,
                           b"x" * 24))
    ledger.record(_message(MessageKind.LOOP_CLOSURE_SIGNAL, 0, 2, 1, 0.0,
                           b"y" * 24))
    ledger.record(_message(MessageKind.KEYFRAME_POSES, 0, 2, 2, 0.0,
                           b"z" * 40))
    path = tmp_path / "ledger.csv"
    ledger.to_csv(path)
    lines = path.read_text(encoding="ascii").splitlines()
    assert lines[0] == "pair,kind,bytes,messages"
    assert "0-2,Signal,48,2" in lines
    assert "0-2,Pose,40,1" in lines
    assert len(lines) == 3


def test_ledger_matches_network_trace_byte_for_byte(tmp_path):
    rng = np.random.default_rng(15)
    net = SimulatedNetwork()
    net.add_link(0, 1, PeerLink(latency=0.01, bandwidth=1e6))
    ledger = BandwidthLedger()
    sizes = []
    for i in range(24):
        kind = [MessageKind.DESCRIPTOR_ANNOUNCEMENT,
                MessageKind.KEYFRAME_POSES,
                MessageKind.NETWORK_PARAMETERS,
                MessageKind.LOOP_CLOSURE_SIGNAL][i % 4]
        payload = bytes(rng.integers(0, 256, size=int(rng.integers(1, 400)),
                                     dtype=np.uint8))
        sender = i % 2
        msg = _message(kind, sender, 1 - sender, net.next_seq(),
                       0.001 * i, payload)
        sizes.append((int(kind), len(payload)))
        assert net.send(msg, ledger) is not None
    delivered = net.step(1e9)
    assert len(delivered) == 24
    assert net.pending_count == 0

    # Each trace row carries the payload byte count; summing the trace per
    # kind must reproduce the ledger exactly.
    per_kind_trace = {}
    for _, _, _, _, kind, nbytes in net.trace:
        per_kind_trace[kind] = per_kind_trace.get(kind, 0) + nbytes
    for kind in (MessageKind.DESCRIPTOR_ANNOUNCEMENT,
                 MessageKind.KEYFRAME_POSES,
                 MessageKind.NETWORK_PARAMETERS,
                 MessageKind.LOOP_CLOSURE_SIGNAL):
        assert ledger.bytes_for(kind=kind) == per_kind_trace[int(kind)]
    assert ledger.bytes_for(kind=MessageKind.IMAGES) == 0
    assert ledger.column_totals()["Images"] == 0
    assert ledger.column_totals()["Total"] == sum(n for _, n in sizes)

    trace_path = tmp_path / "trace.txt"
    net.export_trace(trace_path)
    rows = trace_path.read_text(encoding="ascii").splitlines()
    assert len(rows) == 24
    assert sum(int(row.split()[5]) for row in rows) == \
        ledger.column_totals()["Total"]


# ---------------------------------------------------------------------------
# Simulated network
# ---------------------------------------------------------------------------


def test_infinite_bandwidth_delivery_time_is_send_plus_latency():
    net = SimulatedNetwork()
    net.add_link(0, 1, PeerLink(latency=0.5))
    msg = _message(MessageKind.KEYFRAME_POSES, 0, 1, net.next_seq(), 1.0,
                   b"p" * 64)
    assert net.send(msg) == pytest.approx(1.5, abs=1e-15)
    assert net.step(1.49) == []
    out = net.step(1.5)
    assert len(out) == 1
    assert out[0][0] == pytest.approx(1.5) and out[0][1] == msg


def test_finite_bandwidth_serializes_messages_on_one_direction():
    net = SimulatedNetwork()
    net.add_link(0, 1, PeerLink(latency=0.25, bandwidth=100.0))
    payload = b"q" * 175  # wire size 200 -> 2.0 s on the pipe
    first = _message(MessageKind.NETWORK_PARAMETERS, 0, 1, net.next_seq(),
                     0.0, payload)
    second = _message(MessageKind.NETWORK_PARAMETERS, 0, 1, net.next_seq(),
                      0.0, payload)
    assert net.send(first) == pytest.approx(2.25)
    # The pipe is busy until 2.0, so the second transmission starts there.
    assert net.send(second) == pytest.approx(4.25)
    # The reverse direction has its own pipe and is not delayed.
    back = _message(MessageKind.NETWORK_PARAMETERS, 1, 0, net.next_seq(),
                    0.0, payload)
    assert net.send(back) == pytest.approx(2.25)


def test_delivery_order_is_fifo_per_direction():
    net = SimulatedNetwork()
    net.add_link(0, 1, PeerLink(bandwidth=10.0))
    big = _message(MessageKind.NETWORK_PARAMETERS, 0, 1, net.next_seq(), 0.0,
                   b"B" * 75)   # 10 s transmission
    tiny = _message(MessageKind.LOOP_CLOSURE_SIGNAL, 0, 1, net.next_seq(),
                    0.0, b"t" * 5)  # 3 s, but must wait for the pipe
    t_big = net.send(big)
    t_tiny = net.send(tiny)
    assert t_big == pytest.approx(10.0)
    assert t_tiny == pytest.approx(13.0)
    order = [msg.seq for _, msg in net.step(100.0)]
    assert order == [big.seq, tiny.seq]


def test_availability_window_delays_and_rejects_transmissions():
    net = SimulatedNetwork()
    net.add_link(0, 1, PeerLink(latency=1.0, bandwidth=10.0,
                                up_intervals=[(5.0, 9.0)]))
    fits = _message(MessageKind.KEYFRAME_POSES, 0, 1, net.next_seq(), 0.0,
                    b"k" * 5)   # 3 s transmission, fits in [5, 9)
    assert net.send(fits) == pytest.approx(9.0)  # starts at 5, +3 +latency
    never = _message(MessageKind.NETWORK_PARAMETERS, 0, 1, net.next_seq(),
                     0.0, b"n" * 75)  # 10 s transmission never fits
    ledger = BandwidthLedger()
    assert net.send(never, ledger) is None
    assert net.undeliverable == [never]
    # The attempt is still charged to the ledger.
    assert ledger.bytes_for(kind=MessageKind.NETWORK_PARAMETERS) == 75
    delivered = [msg for _, msg in net.step(100.0)]
    assert delivered == [fits]


def test_send_to_unknown_peer_raises():
    net = SimulatedNetwork()
    net.add_link(0, 1)
    msg = _message(MessageKind.KEYFRAME_POSES, 0, 2, 0, 0.0, b"")
    with pytest.raises(ValueError, match="no link"):
        net.send(msg)


def test_peer_link_validation():
    with pytest.raises(ValueError, match="latency"):
        PeerLink(latency=-0.1)
    with pytest.raises(ValueError, match="bandwidth"):
        PeerLink(bandwidth=0.0)


def test_step_orders_simultaneous_deliveries_by_sequence():
    net = SimulatedNetwork()
    net.add_link(0, 1)
    net.add_link(1, 2)
    a = _message(MessageKind.KEYFRAME_POSES, 2, 1, net.next_seq(), 3.0, b"a")
    b = _message(MessageKind.KEYFRAME_POSES, 0, 1, net.next_seq(), 3.0, b"b")
    net.send(b)
    net.send(a)
    seqs = [msg.seq for _, msg in net.step(3.0)]
    assert seqs == sorted(seqs)


# ---------------------------------------------------------------------------
# Protocol endpoint
# ---------------------------------------------------------------------------


def _fresh_endpoint_pair():
    net = SimulatedNetwork()
    net.add_link(0, 1)
    ledger = BandwidthLedger()
    return CommsEndpoint(0, net, ledger), net, ledger


def test_announce_descriptors_dedupes_per_recipient():
    endpoint, net, ledger = _fresh_endpoint_pair()
    rng = np.random.default_rng(16)
    descs = {i: rng.normal(size=256) for i in range(4)}
    first = endpoint.announce_descriptors([(0, descs[0]), (1, descs[1])],
                                          recipient=1, now=0.0)
    assert first is not None
    assert [kf for kf, _ in
            decode_descriptor_announcement(first.payload)] == [0, 1]
    # A repeat announcement with one fresh keyframe only carries that one.
    second = endpoint.announce_descriptors(
        [(1, descs[1]), (2, descs[2])], recipient=1, now=1.0)
    assert [kf for kf, _ in
            decode_descriptor_announcement(second.payload)] == [2]
    # Fully redundant announcements send nothing.
    assert endpoint.announce_descriptors([(0, descs[0]), (2, descs[2])],
                                         recipient=1, now=2.0) is None
    assert ledger.bytes_for(kind=MessageKind.DESCRIPTOR_ANNOUNCEMENT) == \
        len(first.payload) + len(second.payload)
    assert net.pending_count == 2


def test_loop_exchange_sends_signal_poses_parameters_in_order():
    endpoint, net, ledger = _fresh_endpoint_pair()
    rng = np.random.default_rng(17)
    msgs = endpoint.signal_loop_and_exchange(
        recipient=1,
        loop_pairs=[(4, 17, 0.93)],
        pose_entries=[(i, _random_pose(rng)) for i in range(3)],
        parameter_blob=b"\x07" * 513,
        now=2.5,
    )
    assert [m.kind for m in msgs] == [MessageKind.LOOP_CLOSURE_SIGNAL,
                                      MessageKind.KEYFRAME_POSES,
                                      MessageKind.NETWORK_PARAMETERS]
    assert [m.seq for m in msgs] == sorted(m.seq for m in msgs)
    assert all(m.t_send == 2.5 for m in msgs)
    cols = ledger.column_totals(pair=(0, 1))
    assert cols["Signal"] == len(msgs[0].payload)
    assert cols["Pose"] == len(msgs[1].payload)
    assert cols["NP"] == 513
    assert cols["Images"] == 0
    delivered = [m.kind for _, m in net.step(2.5)]
    assert delivered == [MessageKind.LOOP_CLOSURE_SIGNAL,
                         MessageKind.KEYFRAME_POSES,
                         MessageKind.NETWORK_PARAMETERS]
