"""Link-quality probing between peers.

Small fixed-size datagrams (33 bytes) are sent to each configured peer on
a short period; replies echo the sequence number and send timestamp, so
round-trip time needs no cross-host clock sync. Per peer we keep an
exponentially-averaged RTT, an RTT jitter EMA and a packet-loss fraction
over a sliding window, and derive the connection cost that feeds the
overlay optimizer:

    cost = ema_rtt * (1 + J * jitter / ema_rtt) * (1 / (1 - loss))^L

Every factor is 1 on a clean link, and the cost climbs steeply once loss
or jitter appear. A link at or past the loss cutoff (or silent for three
full windows) is unusable and leaves the graph.
"""
from __future__ import annotations

import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .clock import Clock
from .metrics import MetricValue

MAGIC = b"MLP1"
PACKET_LEN = 33
TYPE_REQUEST = 0
TYPE_REPLY = 1
_PACKET = struct.Struct(">4sBIQ16s")  # magic, ptype, seq, t_send_ns, sender_id

UNUSABLE = None  # link_cost() result for links that must leave the graph


@dataclass(frozen=True, slots=True)
class ProbePacket:
    ptype: int
    seq: int
    t_send_ns: int
    sender_id: bytes  # exactly 16 bytes

    def encode(self) -> bytes:
        return _PACKET.pack(MAGIC, self.ptype, self.seq, self.t_send_ns, self.sender_id)


def decode_packet(data: bytes) -> ProbePacket:
    if len(data) != PACKET_LEN:
        raise ValueError(f"probe datagram must be {PACKET_LEN} bytes, got {len(data)}")
    magic, ptype, seq, t_send, sender = _PACKET.unpack(data)
    if magic != MAGIC:
        raise ValueError("bad probe magic")
    if ptype not in (TYPE_REQUEST, TYPE_REPLY):
        raise ValueError(f"bad probe type {ptype}")
    return ProbePacket(ptype=ptype, seq=seq, t_send_ns=t_send, sender_id=sender)


def peer_id_bytes(peer_id: str) -> bytes:
    raw = peer_id.encode("utf-8")[:16]
    return raw.ljust(16, b"\0")


def peer_id_str(raw: bytes) -> str:
    return raw.rstrip(b"\0").decode("utf-8", errors="replace")


@dataclass
class ProbeConfig:
    period_ms: int = 2000
    alpha: float = 0.25        # RTT EMA gain
    gamma: float = 1.0 / 16.0  # jitter EMA gain
    window: int = 50           # loss window W
    reply_timeout_ms: int = 1000
    loss_cutoff: float = 0.5
    jitter_factor: float = 2.0  # J
    loss_exponent: float = 2.0  # L

    def __post_init__(self):
        if not (0 < self.alpha <= 1) or not (0 < self.gamma <= 1):
            raise ValueError("EMA gains must be in (0, 1]")
        if self.window < 10:
            raise ValueError("loss window must be >= 10")


class LinkStats:
    """Directed link estimators for one peer, updated by the prober."""

    def __init__(self, peer_id: str, config: ProbeConfig):
        self.peer_id = peer_id
        self.config = config
        self.ema_rtt: Optional[float] = None
        self.jitter = 0.0
        self.loss = 0.0
        self.samples = 0
        self.last_update: Optional[int] = None
        self.last_ack_ms: Optional[int] = None
        self._prev_rtt: Optional[float] = None
        # ring of recent sends: seq -> [sent_ms, acked]; sized to keep W
        # entries older than the reply timeout plus everything younger
        extra = (config.reply_timeout_ms // max(config.period_ms, 1)) + 8
        self._sends: deque = deque(maxlen=config.window + extra)

    def note_sent(self, seq: int, now_ms: float) -> None:
        self._sends.append([seq, now_ms, False])

    def note_ack(self, seq: int, now_ms: float) -> None:
        self.last_ack_ms = int(now_ms)
        for entry in reversed(self._sends):
            if entry[0] == seq:
                entry[2] = True
                return

    def record_sample(self, rtt_ms: float, now_ms: float) -> None:
        """Apply one RTT sample to the EMA and jitter recurrences."""
        a = self.config.alpha
        if self.ema_rtt is None:
            self.ema_rtt = rtt_ms
            self.jitter = 0.0
        else:
            self.ema_rtt = (1 - a) * self.ema_rtt + a * rtt_ms
            self.jitter += self.config.gamma * (abs(rtt_ms - self._prev_rtt) - self.jitter)
        self._prev_rtt = rtt_ms
        self.samples += 1
        self.last_update = int(now_ms)

    def record_loss(self, now_ms: float) -> float:
        """Loss over the last W sends old enough to have been answered."""
        timeout = self.config.reply_timeout_ms
        w = self.config.window
        eligible = [e for e in self._sends if now_ms - e[1] >= timeout]
        eligible = eligible[-w:]
        lost = sum(1 for e in eligible if not e[2])
        self.loss = lost / w
        self.last_update = int(now_ms)
        return self.loss

    def snapshot(self, now_ms: float) -> "LinkSnapshot":
        return LinkSnapshot(
            peer_id=self.peer_id, ema_rtt=self.ema_rtt, jitter=self.jitter,
            loss=self.loss, samples=self.samples,
            last_ack_age_ms=(None if self.last_ack_ms is None
                             else int(now_ms) - self.last_ack_ms),
            cost=link_cost(self, now_ms=now_ms),
        )


@dataclass(frozen=True, slots=True)
class LinkSnapshot:
    peer_id: str
    ema_rtt: Optional[float]
    jitter: float
    loss: float
    samples: int
    last_ack_age_ms: Optional[int]
    cost: Optional[float]


def cost_from(ema_rtt: Optional[float], jitter: float, loss: float,
              config: Optional[ProbeConfig] = None) -> Optional[float]:
    """The connection cost, or UNUSABLE past the loss cutoff / without samples."""
    cfg = config or ProbeConfig()
    if ema_rtt is None or ema_rtt < 0:
        return UNUSABLE
    if loss >= cfg.loss_cutoff:
        return UNUSABLE
    base = ema_rtt if ema_rtt > 0 else 1e-9
    jitter_term = 1.0 + cfg.jitter_factor * jitter / base
    loss_term = (1.0 / (1.0 - loss)) ** cfg.loss_exponent
    return ema_rtt * jitter_term * loss_term


def link_cost(stats: LinkStats, now_ms: Optional[float] = None) -> Optional[float]:
    if stats.samples == 0:
        return UNUSABLE
    if now_ms is not None and stats.last_ack_ms is not None:
        silent_for = now_ms - stats.last_ack_ms
        if silent_for > 3 * stats.config.window * stats.config.period_ms:
            return UNUSABLE
    return cost_from(stats.ema_rtt, stats.jitter, stats.loss, stats.config)


class Transport:
    """Datagram transport contract used by ProbeAgent.

    send() ships raw bytes toward an opaque address; incoming datagrams
    arrive on the receiver callback with the source address, which must be
    usable as a reply destination.
    """

    def send(self, addr, data: bytes) -> None:  # pragma: no cover - interface
        raise NotImplementedError

    def set_receiver(self, cb: Callable[[bytes, object], None]) -> None:  # pragma: no cover
        raise NotImplementedError

    def close(self) -> None:  # pragma: no cover - interface
        pass


class UdpTransport(Transport):
    """Real UDP on a bound socket; addresses are (host, port) pairs."""

    def __init__(self, bind: tuple[str, int] = ("127.0.0.1", 0)):
        import socket

        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(bind)
        self.sock.settimeout(0.1)
        self.addr = self.sock.getsockname()
        self._cb: Optional[Callable] = None
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def set_receiver(self, cb: Callable[[bytes, object], None]) -> None:
        self._cb = cb
        self._thread = threading.Thread(target=self._recv_loop,
                                        name=f"udp-recv:{self.addr[1]}", daemon=True)
        self._thread.start()

    def _recv_loop(self) -> None:
        import socket

        while not self._stop.is_set():
            try:
                data, src = self.sock.recvfrom(2048)
            except socket.timeout:
                continue
            except OSError:
                break
            if self._cb:
                self._cb(data, src)

    def send(self, addr, data: bytes) -> None:
        self.sock.sendto(data, addr)

    def close(self) -> None:
        self._stop.set()
        try:
            self.sock.close()
        except OSError:
            pass
        if self._thread:
            self._thread.join(timeout=2)


class ProbeAgent:
    """One node's prober: a sender loop plus the reply handler.

    Peers are (peer_id, address) pairs and can be swapped at runtime. Link
    stats per peer are published as metric values on the local flow
    (cluster "_links", params rtt_ms / jitter_ms / loss) after every loss
    sweep, which is also what the overlay optimizer consumes.
    """

    def __init__(self, agent_id: str, transport: Transport, clock: Clock,
                 config: Optional[ProbeConfig] = None,
                 emit: Optional[Callable[[list[MetricValue]], None]] = None,
                 farm: Optional[str] = None):
        self.agent_id = agent_id
        self.id16 = peer_id_bytes(agent_id)
        self.transport = transport
        self.clock = clock
        self.config = config or ProbeConfig()
        self.emit = emit
        self.farm = farm or agent_id
        self._lock = threading.Lock()
        self._peers: dict[str, object] = {}
        self._stats: dict[str, LinkStats] = {}
        self._seq: dict[str, int] = {}
        self.malformed = 0
        self.requests_seen = 0
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        transport.set_receiver(self.on_datagram)

    def set_peers(self, peers: dict[str, object]) -> None:
        """Reconfigure the peer set; stats for dropped peers are discarded."""
        with self._lock:
            self._peers = dict(peers)
            for pid in list(self._stats):
                if pid not in self._peers:
                    del self._stats[pid]
                    self._seq.pop(pid, None)
            for pid in self._peers:
                self._stats.setdefault(pid, LinkStats(pid, self.config))
                self._seq.setdefault(pid, 0)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._sender_loop,
                                        name=f"probe:{self.agent_id}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=2)
        self.transport.close()

    def _sender_loop(self) -> None:
        while not self._stop.is_set():
            self.probe_round()
            self.clock.sleep(self.config.period_ms)

    def probe_round(self) -> None:
        """Send one probe to every peer, then refresh loss and export stats."""
        now = self.clock.monotonic_ms()
        with self._lock:
            peers = list(self._peers.items())
        for pid, addr in peers:
            with self._lock:
                stats = self._stats.get(pid)
                if stats is None:
                    continue
                seq = self._seq[pid] = (self._seq[pid] + 1) & 0xFFFFFFFF
                stats.note_sent(seq, now)
            pkt = ProbePacket(TYPE_REQUEST, seq, self.clock.monotonic_ns(), self.id16)
            try:
                self.transport.send(addr, pkt.encode())
            except OSError:
                pass
        self.sweep_loss()

    def sweep_loss(self) -> None:
        now = self.clock.monotonic_ms()
        out: list[MetricValue] = []
        with self._lock:
            for pid, stats in self._stats.items():
                stats.record_loss(now)
                if self.emit and stats.samples:
                    t = self.clock.now_ms()
                    out.extend([
                        MetricValue(self.farm, "_links", pid, "rtt_ms", t, stats.ema_rtt),
                        MetricValue(self.farm, "_links", pid, "jitter_ms", t, stats.jitter),
                        MetricValue(self.farm, "_links", pid, "loss", t, stats.loss),
                    ])
        if out and self.emit:
            self.emit(out)

    def on_datagram(self, data: bytes, src) -> None:
        try:
            pkt = decode_packet(data)
        except ValueError:
            self.malformed += 1
            return
        if pkt.ptype == TYPE_REQUEST:
            self.requests_seen += 1
            reply = ProbePacket(TYPE_REPLY, pkt.seq, pkt.t_send_ns, self.id16)
            try:
                self.transport.send(src, reply.encode())
            except OSError:
                pass
            return
        # reply: RTT measured against our own monotonic clock
        peer = peer_id_str(pkt.sender_id)
        rtt_ms = (self.clock.monotonic_ns() - pkt.t_send_ns) / 1e6
        if rtt_ms < 0:
            self.malformed += 1
            return
        now = self.clock.monotonic_ms()
        with self._lock:
            stats = self._stats.get(peer)
            if stats is None:
                return
            stats.note_ack(pkt.seq, now)
            stats.record_sample(rtt_ms, now)

    def stats_snapshot(self) -> dict[str, LinkSnapshot]:
        now = self.clock.monotonic_ms()
        with self._lock:
            return {pid: s.snapshot(now) for pid, s in self._stats.items()}
