"""Typed peer-to-peer messages, a simulated network, and byte accounting.

Wire format (little-endian, fully specified so accounting is bit-exact):

    envelope: payload_len u32 | kind u8 | seq u64 | sender u16 |
              recipient u16 | t_send f64          (25 bytes)
    payload:  kind-specific, see the codec functions

Payload layouts:
    DescriptorAnnouncement: count u32, then per keyframe id u64 + 256 f32
    KeyframePoses:          count u32, then per keyframe id u64 + 7 f32
                            (tx ty tz qx qy qz qw)
    LoopClosureSignal:      count u32, then per pair local u64 + remote u64
                            + score f32
    NetworkParameters:      opaque serialized field parameter blob

The ledger counts payload bytes per agent pair and message kind (envelope
overhead excluded, 25 bytes per message). Raw images are never transmitted;
the Images column exists only for comparison against centralized baselines
and is always zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dataclass_field
from enum import IntEnum

import numpy as np

from .core_math import SE3Pose, quat_to_rotmat, rotmat_to_quat

ENVELOPE_SIZE = 25
_ENVELOPE = struct.Struct("<IBQHHd")


class MessageKind(IntEnum):
    DESCRIPTOR_ANNOUNCEMENT = 1
    LOOP_CLOSURE_SIGNAL = 2
    KEYFRAME_POSES = 3
    NETWORK_PARAMETERS = 4
    IMAGES = 5  # reserved for baseline comparison; never sent


LEDGER_COLUMNS = {
    MessageKind.DESCRIPTOR_ANNOUNCEMENT: "VD",
    MessageKind.NETWORK_PARAMETERS: "NP",
    MessageKind.KEYFRAME_POSES: "Pose",
    MessageKind.LOOP_CLOSURE_SIGNAL: "Signal",
    MessageKind.IMAGES: "Images",
}


@dataclass(frozen=True)
class Message:
    """An immutable typed message with its serialized payload."""

    kind: MessageKind
    sender: int
    recipient: int
    seq: int
    t_send: float
    payload: bytes

    @property
    def payload_size(self):
        return len(self.payload)

    @property
    def wire_size(self):
        return ENVELOPE_SIZE + len(self.payload)

    def encode(self):
        header = _ENVELOPE.pack(len(self.payload), int(self.kind), self.seq,
                                self.sender, self.recipient, self.t_send)
        return header + self.payload

    @classmethod
    def decode(cls, data):
        if len(data) < ENVELOPE_SIZE:
            raise ValueError("truncated message envelope")
        length, kind, seq, sender, recipient, t_send = _ENVELOPE.unpack(
            data[:ENVELOPE_SIZE])
        if len(data) != ENVELOPE_SIZE + length:
            raise ValueError(
                f"payload length mismatch: envelope says {length}, "
                f"got {len(data) - ENVELOPE_SIZE}")
        return cls(kind=MessageKind(kind), sender=sender, recipient=recipient,
                   seq=seq, t_send=t_send,
                   payload=bytes(data[ENVELOPE_SIZE:]))


# ---------------------------------------------------------------------------
# Payload codecs
# ---------------------------------------------------------------------------


def encode_descriptor_announcement(entries):
    """Serialize (kf_id, 256-float descriptor) pairs."""
    parts = [struct.pack("<I", len(entries))]
    for kf_id, desc in entries:
        desc = np.asarray(desc, dtype="<f4")
        if desc.shape != (256,):
            raise ValueError("descriptor must have 256 entries")
        parts.append(struct.pack("<Q", kf_id))
        parts.append(desc.tobytes())
    return b"".join(parts)


def decode_descriptor_announcement(payload):
    count = struct.unpack_from("<I", payload, 0)[0]
    entries = []
    offset = 4
    for _ in range(count):
        kf_id = struct.unpack_from("<Q", payload, offset)[0]
        offset += 8
        desc = np.frombuffer(payload, dtype="<f4", count=256,
                             offset=offset).astype(np.float64)
        offset += 1024
        entries.append((kf_id, desc))
    if offset != len(payload):
        raise ValueError("trailing bytes in descriptor announcement")
    return entries


def encode_keyframe_poses(entries):
    """Serialize (kf_id, SE3Pose) pairs as translation + quaternion."""
    parts = [struct.pack("<I", len(entries))]
    for kf_id, pose in entries:
        q = rotmat_to_quat(pose.rotation)
        t = pose.translation
        parts.append(struct.pack("<Q7f", kf_id, t[0], t[1], t[2],
                                 q[0], q[1], q[2], q[3]))
    return b"".join(parts)


def decode_keyframe_poses(payload):
    count = struct.unpack_from("<I", payload, 0)[0]
    entries = []
    offset = 4
    for _ in range(count):
        vals = struct.unpack_from("<Q7f", payload, offset)
        offset += 36
        kf_id = vals[0]
        t = np.array(vals[1:4], dtype=np.float64)
        q = np.array(vals[4:8], dtype=np.float64)
        q /= np.linalg.norm(q)
        entries.append((kf_id, SE3Pose(rotation=quat_to_rotmat(q),
                                       translation=t)))
    if offset != len(payload):
        raise ValueError("trailing bytes in keyframe poses")
    return entries


def encode_loop_signal(pairs):
    """Serialize (local_kf, remote_kf, score) loop-pair triples."""
    parts = [struct.pack("<I", len(pairs))]
    for local_kf, remote_kf, score in pairs:
        parts.append(struct.pack("<QQf", local_kf, remote_kf, score))
    return b"".join(parts)


def decode_loop_signal(payload):
    count = struct.unpack_from("<I", payload, 0)[0]
    pairs = []
    offset = 4
    for _ in range(count):
        local_kf, remote_kf, score = struct.unpack_from("<QQf", payload,
                                                        offset)
        offset += 20
        pairs.append((local_kf, remote_kf, float(score)))
    if offset != len(payload):
        raise ValueError("trailing bytes in loop signal")
    return pairs


# ---------------------------------------------------------------------------
# Bandwidth ledger
# ---------------------------------------------------------------------------


class BandwidthLedger:
    """Cumulative payload bytes and message counts per pair and kind."""

    def __init__(self):
        self._bytes = {}
        self._count = {}

    def record(self, message):
        pair = (min(message.sender, message.recipient),
                max(message.sender, message.recipient))
        key = (pair, message.kind)
        self._bytes[key] = self._bytes.get(key, 0) + message.payload_size
        self._count[key] = self._count.get(key, 0) + 1

    def bytes_for(self, pair=None, kind=None):
        total = 0
        for (key_pair, key_kind), nbytes in self._bytes.items():
            if pair is not None and key_pair != tuple(sorted(pair)):
                continue
            if kind is not None and key_kind != kind:
                continue
            total += nbytes
        return total

    def column_totals(self, pair=None):
        """Totals keyed by ledger column name, plus Total."""
        out = {name: 0 for name in ("VD", "NP", "Pose", "Signal", "Images")}
        for kind, name in LEDGER_COLUMNS.items():
            out[name] = self.bytes_for(pair=pair, kind=kind)
        out["Total"] = sum(out[name] for name in
                           ("VD", "NP", "Pose", "Signal", "Images"))
        return out

    def pairs(self):
        return sorted({pair for pair, _ in self._bytes})

    def to_csv(self, path):
        """Write `pair,kind,bytes,messages` rows sorted by pair then kind."""
        with open(path, "w", encoding="ascii") as handle:
            handle.write("pair,kind,bytes,messages\n")
            for (pair, kind) in sorted(self._bytes,
                                       key=lambda k: (k[0], int(k[1]))):
                handle.write(
                    f"{pair[0]}-{pair[1]},{LEDGER_COLUMNS[kind]},"
                    f"{self._bytes[(pair, kind)]},"
                    f"{self._count[(pair, kind)]}\n")

    def format_table(self):
        """Human-readable per-pair table with the column totals."""
        lines = ["pair       VD          NP        Pose      Signal  "
                 "Images       Total"]
        for pair in self.pairs():
            cols = self.column_totals(pair=pair)
            lines.append(
                f"{pair[0]}-{pair[1]:<6} {cols['VD']:>9} {cols['NP']:>11} "
                f"{cols['Pose']:>11} {cols['Signal']:>11} "
                f"{cols['Images']:>7} {cols['Total']:>11}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Simulated network
# ---------------------------------------------------------------------------


@dataclass
class PeerLink:
    """Symmetric link properties; each direction has its own FIFO pipe."""

    latency: float = 0.0
    bandwidth: float = float("inf")  # bytes/second
    up_intervals: list = None        # [(start, end)), default always up

    def __post_init__(self):
        if self.latency < 0:
            raise ValueError("latency must be >= 0")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be > 0")
        if self.up_intervals is None:
            self.up_intervals = [(0.0, float("inf"))]

    def transmission_start(self, earliest, duration):
        """First time >= earliest when a transmission fits in an up interval.

        Returns None when the schedule never allows it.
        """
        for start, end in self.up_intervals:
            begin = max(earliest, start)
            if begin + duration <= end:
                return begin
        return None


@dataclass(order=True)
class _InFlight:
    deliver_at: float
    seq: int
    message: Message = dataclass_field(compare=False)


class SimulatedNetwork:
    """Deterministic point-to-point network with latency, bandwidth caps,
    availability schedules, and per-direction FIFO ordering.

    A message sent at t occupies its directed pipe for wire_size/bandwidth
    seconds starting at the first instant the link is up and the pipe is
    free; it is delivered latency seconds after transmission completes.
    """

    def __init__(self):
        self._links = {}
        self._pipes = {}        # (sender, recipient) -> busy-until time
        self._pending = []      # list of _InFlight, kept sorted on delivery
        self._seq = 0
        self.trace = []         # (t_send, t_recv, sender, recipient, kind, bytes)
        self.undeliverable = []

    def add_link(self, agent_a, agent_b, link=None):
        key = (min(agent_a, agent_b), max(agent_a, agent_b))
        self._links[key] = link or PeerLink()

    def link_between(self, agent_a, agent_b):
        key = (min(agent_a, agent_b), max(agent_a, agent_b))
        if key not in self._links:
            raise ValueError(f"no link between agents {agent_a} and {agent_b}")
        return self._links[key]

    def next_seq(self):
        seq = self._seq
        self._seq += 1
        return seq

    def send(self, message, ledger=None):
        """Enqueue a message; returns its scheduled delivery time or None
        when the availability schedule can never carry it."""
        link = self.link_between(message.sender, message.recipient)
        pipe = (message.sender, message.recipient)
        busy_until = self._pipes.get(pipe, 0.0)
        duration = 0.0 if np.isinf(link.bandwidth) \
            else message.wire_size / link.bandwidth
        start = link.transmission_start(max(message.t_send, busy_until),
                                        duration)
        if ledger is not None:
            ledger.record(message)
        if start is None:
            self.undeliverable.append(message)
            return None
        self._pipes[pipe] = start + duration
        deliver_at = start + duration + link.latency
        self._pending.append(_InFlight(deliver_at=deliver_at,
                                       seq=message.seq, message=message))
        self._pending.sort()
        return deliver_at

    def step(self, now):
        """Deliver all messages whose delivery time is <= now, in order."""
        delivered = []
        remaining = []
        for item in self._pending:
            if item.deliver_at <= now:
                delivered.append(item)
            else:
                remaining.append(item)
        self._pending = remaining
        out = []
        for item in delivered:
            msg = item.message
            self.trace.append((msg.t_send, item.deliver_at, msg.sender,
                               msg.recipient, int(msg.kind),
                               msg.payload_size))
            out.append((item.deliver_at, msg))
        return out

    @property
    def pending_count(self):
        return len(self._pending)

    def export_trace(self, path):
        """One line per delivery: t_send t_recv sender recipient kind bytes."""
        with open(path, "w", encoding="ascii") as handle:
            for t_send, t_recv, sender, recipient, kind, nbytes in self.trace:
                handle.write(f"{t_send:.9f} {t_recv:.9f} {sender} "
                             f"{recipient} {kind} {nbytes}\n")


# ---------------------------------------------------------------------------
# Agent-side protocol endpoint
# ---------------------------------------------------------------------------


class CommsEndpoint:
    """Per-agent protocol bookkeeping: dedupe of announced keyframes and
    construction of the loop-exchange message sequence."""

    def __init__(self, agent_id, network, ledger):
        self.agent_id = agent_id
        self.network = network
        self.ledger = ledger
        self._announced = {}  # recipient -> set of kf ids

    def _make(self, kind, recipient, payload, now):
        return Message(kind=kind, sender=self.agent_id, recipient=recipient,
                       seq=self.network.next_seq(), t_send=now,
                       payload=payload)

    def announce_descriptors(self, keyframe_entries, recipient, now):
        """Send descriptors of not-yet-announced keyframes to a peer.

        Args:
            keyframe_entries: list of (kf_id, descriptor).

        Returns:
            the sent Message, or None when every entry was already announced
            (re-announcements are dropped by the bookkeeping).
        """
        sent = self._announced.setdefault(recipient, set())
        fresh = [(kf_id, desc) for kf_id, desc in keyframe_entries
                 if kf_id not in sent]
        if not fresh:
            return None
        payload = encode_descriptor_announcement(fresh)
        msg = self._make(MessageKind.DESCRIPTOR_ANNOUNCEMENT, recipient,
                         payload, now)
        self.network.send(msg, self.ledger)
        sent.update(kf_id for kf_id, _ in fresh)
        return msg

    def signal_loop_and_exchange(self, recipient, loop_pairs, pose_entries,
                                 parameter_blob, now):
        """Send the loop signal followed by poses and field parameters.

        Returns:
            the three sent Messages in send order.
        """
        messages = [
            self._make(MessageKind.LOOP_CLOSURE_SIGNAL, recipient,
                       encode_loop_signal(loop_pairs), now),
            self._make(MessageKind.KEYFRAME_POSES, recipient,
                       encode_keyframe_poses(pose_entries), now),
            self._make(MessageKind.NETWORK_PARAMETERS, recipient,
                       bytes(parameter_blob), now),
        ]
        for msg in messages:
            self.network.send(msg, self.ledger)
        return messages
