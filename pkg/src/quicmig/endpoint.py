"""Client and server connection state machines.

The client walks the full migration sequence: handshake, connection-ID
exchange, active migration with path validation, and a post-migration HTTP
request.  The server side models the behaviors that make migrations fail in
the wild: servers that never issue a spare CID, servers that disable
migration via transport parameter, servers that ignore path challenges, and
load-balanced backends that silently drop challenges for connections they do
not own.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Union

from .wire import (
    CHALLENGE_LEN,
    DEFAULT_CID_LEN,
    QUIC_V1,
    ConnectionClose,
    ConnectionId,
    CryptoClientHello,
    CryptoServerHello,
    Datagram,
    Frame,
    HttpGet,
    HttpResponse,
    LongHeader,
    NewConnectionId,
    PacketKind,
    PathChallenge,
    PathResponse,
    PROBE_SIZE,
    RetireConnectionId,
    ShortHeader,
    TransportParams,
    encode_datagram,
    encode_version_negotiation,
    parse_datagram,
)

DEFAULT_HANDSHAKE_TIMEOUT_MS = 3000
DEFAULT_PATH_TIMEOUT_MS = 1000
DEFAULT_PATH_RETRIES = 2

CLOSE_SNI_REQUIRED = 0x0101
CLOSE_ALPN_REJECTED = 0x0102

Addr = tuple[str, int]


class EndpointError(Exception):
    """Base class for connection state machine errors."""


class WrongPhase(EndpointError):
    pass


class NoSpareCid(EndpointError):
    pass


class MigrationDisabled(EndpointError):
    pass


class LimitExceeded(EndpointError):
    pass


class LocalCidRequired(EndpointError):
    pass


class ProtocolViolation(EndpointError):
    pass


class Phase(Enum):
    IDLE = "idle"
    HANDSHAKE_SENT = "handshake_sent"
    ESTABLISHED = "established"
    PROBING = "probing"
    MIGRATED = "migrated"
    CLOSED = "closed"


@dataclass(frozen=True)
class PathId:
    """One network path: exact (local, remote) 4-tuple."""

    local: Addr
    remote: Addr


@dataclass
class CidEntry:
    seq: int
    cid: ConnectionId
    used: bool = False
    retired: bool = False


@dataclass(frozen=True)
class ServerBehavior:
    """Independent toggles describing how a simulated server acts."""

    requires_sni: bool = False
    issues_extra_cid: bool = True
    disable_active_migration: bool = False
    answers_path_challenge: bool = True
    http_server_header: str = "nginx"
    alpn_allowlist: tuple[str, ...] = ("h3",)


# --- events -------------------------------------------------------------------


@dataclass(frozen=True)
class HandshakeComplete:
    params: TransportParams


@dataclass(frozen=True)
class CidReceived:
    seq: int


@dataclass(frozen=True)
class PathValidated:
    path: PathId


@dataclass(frozen=True)
class PathValidationFailed:
    path: PathId
    reason: str


@dataclass(frozen=True)
class HttpDone:
    status: int
    server_header: str


@dataclass(frozen=True)
class ClosedByPeer:
    code: int


@dataclass(frozen=True)
class Timeout:
    what: str  # "handshake" or "path"


Event = Union[
    HandshakeComplete,
    CidReceived,
    PathValidated,
    PathValidationFailed,
    HttpDone,
    ClosedByPeer,
    Timeout,
]

Outgoing = list[tuple[PathId, bytes]]


def _rand_cid(rng: random.Random) -> ConnectionId:
    return ConnectionId(rng.randbytes(DEFAULT_CID_LEN))


class ClientConnection:
    """Client side of one connection, driven by datagrams and timer ticks.

    All methods run on the connection's single logical owner; instances are
    not shared between concurrent sessions.
    """

    def __init__(
        self,
        local: Addr,
        remote: Addr,
        *,
        rng: random.Random,
        sni: str | None = None,
        handshake_timeout_ms: int = DEFAULT_HANDSHAKE_TIMEOUT_MS,
        path_timeout_ms: int = DEFAULT_PATH_TIMEOUT_MS,
        path_retries: int = DEFAULT_PATH_RETRIES,
    ) -> None:
        self.phase = Phase.IDLE
        self.local_cids: list[CidEntry] = []
        self.peer_cids: list[CidEntry] = []
        self.active_path = PathId(local, remote)
        self.probing_path: PathId | None = None
        self.pending_challenge: bytes | None = None
        self.peer_params: TransportParams | None = None
        self.sni_sent: str | None = sni
        self.close_reason: str | None = None

        self._rng = rng
        self._handshake_timeout_ms = handshake_timeout_ms
        self._path_timeout_ms = path_timeout_ms
        self._path_retries = path_retries

        self._scid: ConnectionId | None = None
        self._initial_dcid: ConnectionId | None = None
        self._active_dcid_seq: int | None = None
        self._pre_migration_dcid_seq: int | None = None
        self._probing_dcid_seq: int | None = None
        self._old_cid_retired = False
        self._handshake_deadline: int | None = None
        self._probe_deadline: int | None = None
        self._probe_retries_left = 0

    # -- helpers ---------------------------------------------------------

    @property
    def scid(self) -> ConnectionId | None:
        return self._scid

    def _peer_entry(self, seq: int) -> CidEntry:
        for entry in self.peer_cids:
            if entry.seq == seq:
                return entry
        raise KeyError(seq)

    def _active_dcid(self) -> ConnectionId:
        return self._peer_entry(self._active_dcid_seq).cid

    def _short(self, path: PathId, dcid: ConnectionId, frames: list[Frame]) -> tuple[PathId, bytes]:
        dgram = Datagram(ShortHeader(dcid), frames=tuple(frames))
        return path, encode_datagram(dgram)

    def next_wakeup(self) -> int | None:
        """Earliest timestamp at which on_timer has work to do."""
        deadlines = [d for d in (self._handshake_deadline, self._probe_deadline) if d is not None]
        return min(deadlines) if deadlines else None

    def _violate(self, reason: str) -> None:
        self.phase = Phase.CLOSED
        self.close_reason = reason
        raise ProtocolViolation(reason)

    # -- operations ------------------------------------------------------

    def start(self, now: int) -> Outgoing:
        """Send the Initial carrying the Client Hello; enter handshake."""
        if self.phase is not Phase.IDLE:
            raise WrongPhase(f"start in phase {self.phase.value}")
        self._scid = _rand_cid(self._rng)
        self._initial_dcid = _rand_cid(self._rng)
        self.local_cids.append(CidEntry(seq=0, cid=self._scid, used=True))
        hello = CryptoClientHello(sni=self.sni_sent, alpn="h3")
        header = LongHeader(PacketKind.INITIAL, QUIC_V1, self._initial_dcid, self._scid)
        data = encode_datagram(Datagram(header, frames=(hello,)), pad_to=PROBE_SIZE)
        self.phase = Phase.HANDSHAKE_SENT
        self._handshake_deadline = now + self._handshake_timeout_ms
        return [(self.active_path, data)]

    def handle(self, data: bytes, arriving_path: PathId, now: int) -> tuple[Outgoing, list[Event]]:
        """Process one incoming datagram; may raise ProtocolViolation."""
        if self.phase is Phase.CLOSED:
            return [], []
        dgram = parse_datagram(data)
        events: list[Event] = []
        out: Outgoing = []
        if dgram.kind is PacketKind.VERSION_NEGOTIATION:
            return [], []  # the scanner negotiates v1 directly; probes live in discovery
        if isinstance(dgram.header, LongHeader):
            peer_scid = dgram.header.scid
        else:
            peer_scid = None
            if not any(
                e.cid == dgram.header.dcid and not e.retired for e in self.local_cids
            ):
                return [], []  # not addressed to us
        for frame in dgram.frames:
            if isinstance(frame, CryptoServerHello):
                if self.phase is not Phase.HANDSHAKE_SENT:
                    continue
                if dgram.header.dcid != self._scid:
                    self._violate("server hello does not echo our scid")
                self.peer_cids.append(CidEntry(seq=0, cid=peer_scid, used=True))
                self._active_dcid_seq = 0
                self.peer_params = frame.transport_params
                self.phase = Phase.ESTABLISHED
                self._handshake_deadline = None
                events.append(HandshakeComplete(frame.transport_params))
            elif isinstance(frame, NewConnectionId):
                known = {e.seq: e for e in self.peer_cids}
                if frame.seq in known:
                    if known[frame.seq].cid != frame.cid:
                        self._violate(f"new_connection_id reuses seq {frame.seq}")
                    continue  # duplicate delivery
                for entry in self.peer_cids:
                    if entry.seq < frame.retire_prior_to:
                        entry.retired = True
                self.peer_cids.append(CidEntry(seq=frame.seq, cid=frame.cid))
                events.append(CidReceived(frame.seq))
            elif isinstance(frame, PathResponse):
                if self.pending_challenge is None:
                    continue  # stale response
                if frame.data != self.pending_challenge:
                    self._violate("path response data does not match the challenge")
                if arriving_path != self.probing_path:
                    continue  # must arrive on the probed path
                self._pre_migration_dcid_seq = self._active_dcid_seq
                self.active_path = self.probing_path
                self._active_dcid_seq = self._probing_dcid_seq
                self.probing_path = None
                self.pending_challenge = None
                self._probing_dcid_seq = None
                self._probe_deadline = None
                self.phase = Phase.MIGRATED
                events.append(PathValidated(self.active_path))
            elif isinstance(frame, HttpResponse):
                events.append(HttpDone(frame.status, frame.server_header))
            elif isinstance(frame, ConnectionClose):
                self.phase = Phase.CLOSED
                self.close_reason = f"peer close 0x{frame.code:04x}"
                events.append(ClosedByPeer(frame.code))
            elif isinstance(frame, RetireConnectionId):
                for entry in self.local_cids:
                    if entry.seq == frame.seq:
                        entry.retired = True
        return out, events

    def issue_cid(self) -> Outgoing:
        """Issue a fresh CID to the server via NEW_CONNECTION_ID."""
        if self.phase is not Phase.ESTABLISHED:
            raise WrongPhase(f"issue_cid in phase {self.phase.value}")
        issued = len(self.local_cids) - 1  # handshake CID does not count
        if issued + 1 > self.peer_params.active_cid_limit:
            raise LimitExceeded(
                f"peer stores at most {self.peer_params.active_cid_limit} issued cids"
            )
        seq = max(e.seq for e in self.local_cids) + 1
        entry = CidEntry(seq=seq, cid=_rand_cid(self._rng))
        self.local_cids.append(entry)
        frame = NewConnectionId(seq=seq, retire_prior_to=0, cid=entry.cid)
        return [self._short(self.active_path, self._active_dcid(), [frame])]

    def begin_migration(self, new_local: Addr, now: int) -> Outgoing:
        """Probe a new local address with a PATH_CHALLENGE on a fresh DCID."""
        if self.phase is not Phase.ESTABLISHED:
            raise WrongPhase(f"begin_migration in phase {self.phase.value}")
        if self.peer_params is not None and self.peer_params.disable_active_migration:
            raise MigrationDisabled("peer set disable_active_migration")
        spares = [e for e in self.peer_cids if not e.used and not e.retired]
        if not spares:
            raise NoSpareCid("server never issued a spare connection id")
        if not any(e.seq > 0 and not e.retired for e in self.local_cids):
            raise LocalCidRequired("issue a cid to the server before migrating")
        spare = min(spares, key=lambda e: e.seq)
        spare.used = True
        self.pending_challenge = self._rng.randbytes(CHALLENGE_LEN)
        self.probing_path = PathId(new_local, self.active_path.remote)
        self._probing_dcid_seq = spare.seq
        self.phase = Phase.PROBING
        self._probe_deadline = now + self._path_timeout_ms
        self._probe_retries_left = self._path_retries
        challenge = PathChallenge(self.pending_challenge)
        return [self._short(self.probing_path, spare.cid, [challenge])]

    def retire_old(self) -> Outgoing:
        """Retire the pre-migration server CID; idempotent after the first call."""
        if self.phase is not Phase.MIGRATED:
            raise WrongPhase(f"retire_old in phase {self.phase.value}")
        if self._old_cid_retired:
            return []
        entry = self._peer_entry(self._pre_migration_dcid_seq)
        entry.retired = True
        self._old_cid_retired = True
        frame = RetireConnectionId(entry.seq)
        return [self._short(self.active_path, self._active_dcid(), [frame])]

    def http_get(self, path: str = "/") -> Outgoing:
        if self.phase not in (Phase.ESTABLISHED, Phase.MIGRATED):
            raise WrongPhase(f"http_get in phase {self.phase.value}")
        return [self._short(self.active_path, self._active_dcid(), [HttpGet(path)])]

    def on_timer(self, now: int) -> tuple[Outgoing, list[Event]]:
        """Expire the handshake or the path probe; retransmit challenges."""
        out: Outgoing = []
        events: list[Event] = []
        if (
            self.phase is Phase.HANDSHAKE_SENT
            and self._handshake_deadline is not None
            and now >= self._handshake_deadline
        ):
            self.phase = Phase.CLOSED
            self.close_reason = "handshake timeout"
            self._handshake_deadline = None
            events.append(Timeout("handshake"))
        if (
            self.phase is Phase.PROBING
            and self._probe_deadline is not None
            and now >= self._probe_deadline
        ):
            if self._probe_retries_left > 0:
                self._probe_retries_left -= 1
                self._probe_deadline = now + self._path_timeout_ms
                spare = self._peer_entry(self._probing_dcid_seq)
                challenge = PathChallenge(self.pending_challenge)
                out.append(self._short(self.probing_path, spare.cid, [challenge]))
            else:
                failed_path = self.probing_path
                self.probing_path = None
                self.pending_challenge = None
                self._probing_dcid_seq = None
                self._probe_deadline = None
                self.phase = Phase.ESTABLISHED  # old path still valid, old CID kept
                events.append(Timeout("path"))
                events.append(PathValidationFailed(failed_path, "timeout"))
        return out, events


# --- server side ---------------------------------------------------------------


@dataclass
class _ServerConn:
    local_cids: list[CidEntry]
    client_cids: list[CidEntry]
    params: TransportParams
    handshake_path: PathId
    path_dcid_seq: dict[PathId, int] = field(default_factory=dict)
    extra_issued: bool = False
    closed: bool = False


class ServerEndpoint:
    """One backend instance of a simulated HTTP/3 server.

    Load-balanced deployments instantiate several backends per address; a
    backend silently drops short-header packets whose DCID it never issued,
    which is what breaks migration behind 4-tuple-hashing balancers.
    """

    def __init__(self, behavior: ServerBehavior, addr: Addr, rng: random.Random) -> None:
        self.behavior = behavior
        self.addr = addr
        self._rng = rng
        self._conns: list[_ServerConn] = []

    def _conn_for_dcid(self, dcid: ConnectionId) -> _ServerConn | None:
        for conn in self._conns:
            if any(e.cid == dcid for e in conn.local_cids):
                return conn
        return None

    def _reply_dcid(self, conn: _ServerConn, path: PathId) -> ConnectionId:
        """Pick the client CID for a path; new paths get an unused client CID."""
        if path in conn.path_dcid_seq:
            seq = conn.path_dcid_seq[path]
        elif path == conn.handshake_path:
            seq = 0
        else:
            fresh = [e for e in conn.client_cids if not e.used and not e.retired]
            entry = min(fresh, key=lambda e: e.seq) if fresh else conn.client_cids[0]
            entry.used = True
            seq = entry.seq
        conn.path_dcid_seq[path] = seq
        for entry in conn.client_cids:
            if entry.seq == seq:
                return entry.cid
        raise KeyError(seq)

    def _short(self, path: PathId, dcid: ConnectionId, frames: list[Frame]) -> tuple[PathId, bytes]:
        reply = PathId(local=self.addr, remote=path.remote)
        return reply, encode_datagram(Datagram(ShortHeader(dcid), frames=tuple(frames)))

    def handle(self, data: bytes, arriving_path: PathId, now: int) -> Outgoing:
        dgram = parse_datagram(data)
        if dgram.kind is PacketKind.VERSION_NEGOTIATION:
            return []
        if dgram.kind is PacketKind.INITIAL:
            if dgram.header.version != QUIC_V1:
                # Unknown or reserved version: answer with version negotiation.
                reply = encode_version_negotiation(
                    dcid=dgram.header.scid, scid=dgram.header.dcid, versions=[QUIC_V1]
                )
                return [(PathId(local=self.addr, remote=arriving_path.remote), reply)]
            return self._handle_initial(dgram, arriving_path)
        return self._handle_short(dgram, arriving_path)

    def _handle_initial(self, dgram: Datagram, path: PathId) -> Outgoing:
        hello = next((f for f in dgram.frames if isinstance(f, CryptoClientHello)), None)
        if hello is None:
            return []
        client_scid = dgram.header.scid
        scid = _rand_cid(self._rng)

        def close(code: int) -> Outgoing:
            header = LongHeader(PacketKind.INITIAL, QUIC_V1, client_scid, scid)
            data = encode_datagram(Datagram(header, frames=(ConnectionClose(code),)))
            return [(PathId(local=self.addr, remote=path.remote), data)]

        if self.behavior.requires_sni and hello.sni is None:
            return close(CLOSE_SNI_REQUIRED)
        if hello.alpn not in self.behavior.alpn_allowlist:
            return close(CLOSE_ALPN_REJECTED)

        params = TransportParams(
            disable_active_migration=self.behavior.disable_active_migration,
            active_cid_limit=2,
        )
        conn = _ServerConn(
            local_cids=[CidEntry(seq=0, cid=scid, used=True)],
            client_cids=[CidEntry(seq=0, cid=client_scid, used=True)],
            params=params,
            handshake_path=path,
        )
        conn.path_dcid_seq[path] = 0
        self._conns.append(conn)
        header = LongHeader(PacketKind.INITIAL, QUIC_V1, client_scid, scid)
        reply = encode_datagram(Datagram(header, frames=(CryptoServerHello(params),)))
        return [(PathId(local=self.addr, remote=path.remote), reply)]

    def _handle_short(self, dgram: Datagram, path: PathId) -> Outgoing:
        conn = self._conn_for_dcid(dgram.header.dcid)
        if conn is None or conn.closed:
            return []  # misrouted or dead connection: drop silently
        out: Outgoing = []
        for frame in dgram.frames:
            if isinstance(frame, PathChallenge):
                if self.behavior.answers_path_challenge:
                    dcid = self._reply_dcid(conn, path)
                    out.append(self._short(path, dcid, [PathResponse(frame.data)]))
            elif isinstance(frame, NewConnectionId):
                if all(e.seq != frame.seq for e in conn.client_cids):
                    conn.client_cids.append(CidEntry(seq=frame.seq, cid=frame.cid))
                if (
                    self.behavior.issues_extra_cid
                    and not self.behavior.disable_active_migration
                    and not conn.extra_issued
                ):
                    conn.extra_issued = True
                    extra = CidEntry(seq=1, cid=_rand_cid(self._rng))
                    conn.local_cids.append(extra)
                    dcid = self._reply_dcid(conn, path)
                    nci = NewConnectionId(seq=1, retire_prior_to=0, cid=extra.cid)
                    out.append(self._short(path, dcid, [nci]))
            elif isinstance(frame, RetireConnectionId):
                for entry in conn.local_cids:
                    if entry.seq == frame.seq:
                        entry.retired = True
            elif isinstance(frame, HttpGet):
                dcid = self._reply_dcid(conn, path)
                resp = HttpResponse(200, self.behavior.http_server_header)
                out.append(self._short(path, dcid, [resp]))
            elif isinstance(frame, ConnectionClose):
                conn.closed = True
        return out
