"""Deterministic discrete-event network connecting clients and servers.

The world reproduces the failure causes seen in the wild: seeded packet
loss, stateful firewalls that drop non-handshake packets on unseen 4-tuples,
and stateless load balancers that pick a backend by hashing the 4-tuple (so
a new source port may land on a backend that does not know the connection).

Everything is a pure function of the seed and the inputs: loss draws and
backend choices are keyed by stable hashes of the flow, never by shared RNG
stream position, so the event interleaving of concurrent sessions cannot
change any outcome.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Callable, IO, Iterable

from .endpoint import Addr, PathId, ServerBehavior, ServerEndpoint
from .wire import Datagram, PacketKind, frame_name, parse_datagram


class NetsimError(Exception):
    pass


class UnknownPath(NetsimError):
    pass


class DeadlineExceeded(NetsimError):
    pass


class TransportUnavailable(Exception):
    """Raised by the real-network seam, which ships as a stub."""


@dataclass(frozen=True)
class Impairments:
    loss_rate: float = 0.0
    latency_ms: int = 10
    firewall_blocks_new_paths: bool = False
    lb_backend_count: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must be within [0, 1]")
        if self.lb_backend_count < 1:
            raise ValueError("lb_backend_count must be >= 1")
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")


@dataclass(frozen=True)
class SimEvent:
    at: int
    kind: str  # "deliver" or "timer"
    to: Addr | None = None
    datagram: bytes | None = None
    src: Addr | None = None
    backend: int = -1
    owner: Callable[[int], None] | None = None


@dataclass(frozen=True)
class TraceRecord:
    t: int
    kind: str  # "send", "drop" or "deliver"
    dir: str  # "c2s" or "s2c"
    src: Addr
    dst: Addr
    datagram: Datagram
    reason: str = ""
    backend: int = -1

    def to_json(self) -> dict:
        frames = []
        for frame in self.datagram.frames:
            entry: dict = {"type": frame_name(frame)}
            for key, value in vars(frame).items():
                entry[key] = value.hex() if isinstance(value, bytes) else value
            if "transport_params" in entry:
                entry["transport_params"] = vars(frame.transport_params)
            frames.append(entry)
        record = {
            "t": self.t,
            "kind": self.kind,
            "dir": self.dir,
            "path": [f"{self.src[0]}:{self.src[1]}", f"{self.dst[0]}:{self.dst[1]}"],
            "packet": self.datagram.kind.value,
            "frames": frames,
        }
        if self.datagram.versions:
            record["versions"] = [f"0x{v:08x}" for v in self.datagram.versions]
        if self.reason:
            record["reason"] = self.reason
        if self.backend >= 0:
            record["backend"] = self.backend
        return record


@dataclass
class _Host:
    behavior: ServerBehavior | None
    impairments: Impairments
    backends: list[ServerEndpoint] = field(default_factory=list)
    seen_tuples: set[tuple[Addr, Addr]] = field(default_factory=set)


def _stable_u64(*parts: object) -> int:
    text = "|".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "big")


class World:
    """Single-threaded simulation world; run several worlds for parallelism."""

    def __init__(self, impairments: Impairments | None = None) -> None:
        self.impairments = impairments or Impairments()
        self.seed = self.impairments.seed
        self.now = 0
        self.trace: list[TraceRecord] = []
        self._queue: list[tuple[int, int, SimEvent]] = []
        self._tiebreak = 0
        self._hosts: dict[Addr, _Host] = {}
        self._clients: dict[Addr, Callable[[bytes, Addr, int], None]] = {}
        self._flow_seq: dict[tuple[Addr, Addr], int] = {}

    # -- topology ----------------------------------------------------------

    def add_host(
        self,
        ip: str,
        port: int,
        behavior: ServerBehavior | None,
        impairments: Impairments | None = None,
    ) -> Addr:
        """Register a server (or a silent host when behavior is None)."""
        addr = (ip, port)
        imp = impairments or self.impairments
        host = _Host(behavior=behavior, impairments=imp)
        if behavior is not None:
            for index in range(imp.lb_backend_count):
                rng = random.Random(_stable_u64(self.seed, "host", ip, port, index))
                host.backends.append(ServerEndpoint(behavior, addr, rng))
        self._hosts[addr] = host
        return addr

    def register_client(self, addr: Addr, on_datagram: Callable[[bytes, Addr, int], None]) -> None:
        self._clients[addr] = on_datagram

    def unregister_client(self, addr: Addr) -> None:
        self._clients.pop(addr, None)

    def host_addrs(self) -> list[Addr]:
        return list(self._hosts)

    # -- event queue ---------------------------------------------------------

    def _push(self, event: SimEvent) -> None:
        self._tiebreak += 1
        heapq.heappush(self._queue, (event.at, self._tiebreak, event))

    def schedule_timer(self, at: int, owner: Callable[[int], None]) -> None:
        self._push(SimEvent(at=max(at, self.now), kind="timer", owner=owner))

    # -- sending ---------------------------------------------------------------

    def backend_index(self, src: Addr, dst: Addr) -> int:
        host = self._hosts[dst]
        count = host.impairments.lb_backend_count
        return _stable_u64(self.seed, "lb", src[0], src[1], dst[0], dst[1]) % count

    def _loss_draw(self, src: Addr, dst: Addr) -> bool:
        flow = (src, dst)
        n = self._flow_seq.get(flow, 0)
        self._flow_seq[flow] = n + 1
        host = dst if dst in self._hosts else src
        rate = self._hosts[host].impairments.loss_rate if host in self._hosts else 0.0
        if rate <= 0.0:
            return False
        draw = _stable_u64(self.seed, "loss", src[0], src[1], dst[0], dst[1], n)
        return draw / 2**64 < rate

    def send(self, data: bytes, src: Addr, dst: Addr) -> None:
        """Send one datagram; impairments may drop or reroute it."""
        if src in self._clients:
            direction = "c2s"
        elif src in self._hosts:
            direction = "s2c"
        else:
            raise UnknownPath(f"sender {src} is not registered")
        dgram = parse_datagram(data)
        self.trace.append(TraceRecord(self.now, "send", direction, src, dst, dgram))

        if direction == "c2s" and dst not in self._hosts:
            self.trace.append(TraceRecord(self.now, "drop", direction, src, dst, dgram, "no_host"))
            return
        host = self._hosts[dst] if direction == "c2s" else self._hosts[src]
        if self._loss_draw(src, dst):
            self.trace.append(TraceRecord(self.now, "drop", direction, src, dst, dgram, "loss"))
            return
        backend = -1
        if direction == "c2s":
            if (
                host.impairments.firewall_blocks_new_paths
                and dgram.kind is PacketKind.SHORT
                and (src, dst) not in host.seen_tuples
            ):
                self.trace.append(
                    TraceRecord(self.now, "drop", direction, src, dst, dgram, "firewall")
                )
                return
            backend = self.backend_index(src, dst)
        self._push(
            SimEvent(
                at=self.now + host.impairments.latency_ms,
                kind="deliver",
                to=dst,
                datagram=data,
                src=src,
                backend=backend,
            )
        )

    # -- running -----------------------------------------------------------------

    def run_until_idle(self, deadline_ms: int | None = None) -> list[TraceRecord]:
        """Process queued events in timestamp order until the queue drains."""
        while self._queue:
            at, _, event = self._queue[0]
            if deadline_ms is not None and at > deadline_ms:
                raise DeadlineExceeded(f"next event at {at} exceeds deadline {deadline_ms}")
            heapq.heappop(self._queue)
            self.now = max(self.now, at)
            if event.kind == "timer":
                event.owner(self.now)
            else:
                self._deliver(event)
        return self.trace

    def _deliver(self, event: SimEvent) -> None:
        data, src, dst = event.datagram, event.src, event.to
        dgram = parse_datagram(data)
        backend = event.backend
        if dst in self._clients:
            self.trace.append(TraceRecord(self.now, "deliver", "s2c", src, dst, dgram))
            self._clients[dst](data, src, self.now)
            return
        host = self._hosts.get(dst)
        if host is None:
            return
        if dgram.kind is not PacketKind.SHORT:
            host.seen_tuples.add((src, dst))
        self.trace.append(
            TraceRecord(self.now, "deliver", "c2s", src, dst, dgram, backend=backend)
        )
        if host.behavior is None:
            return  # silent host: reachable but never answers
        endpoint = host.backends[backend if backend >= 0 else 0]
        path = PathId(local=dst, remote=src)
        for reply_path, reply in endpoint.handle(data, path, self.now):
            self.send(reply, src=reply_path.local, dst=reply_path.remote)

    # -- trace export ---------------------------------------------------------------

    def export_trace(self, fp: IO[str]) -> None:
        """Write the trace as JSONL, one record per event."""
        for record in self.trace:
            fp.write(json.dumps(record.to_json(), separators=(",", ":")) + "\n")


# --- transport seam ---------------------------------------------------------------


class SimTransport:
    """Adapter giving the discovery and scan pipelines a simulated network."""

    def __init__(self, world: World, client_ip: str = "198.51.100.1", base_port: int = 40000):
        self.world = world
        self.client_ip = client_ip
        self._next_port = base_port

    def allocate_port(self) -> int:
        port = self._next_port
        self._next_port += 1
        return port

    def allocate_addr(self) -> Addr:
        return (self.client_ip, self.allocate_port())


class RealTransport:
    """Seam for a genuine UDP/QUIC stack; intentionally not implemented.

    Driving real networks would require actual TLS 1.3 handshakes and packet
    protection; every operation therefore reports the transport as
    unavailable.
    """

    @property
    def world(self) -> World:
        raise TransportUnavailable("real network transport is a stub")

    def allocate_port(self) -> int:
        raise TransportUnavailable("real network transport is a stub")

    def allocate_addr(self) -> Addr:
        raise TransportUnavailable("real network transport is a stub")
