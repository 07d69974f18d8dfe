"""Wire formats shared by the simulated QUIC endpoints.

Only the forced version-negotiation probe and its response follow the real
QUIC v1 long-header layout, so that discovery would behave identically
against genuine servers.  Everything else (the post-handshake frames) uses a
compact tagged format private to this simulator: packet protection, varint
packet numbers and coalesced packets are deliberately not modeled.  A real
network adapter would additionally have to place a genuine TLS Client Hello
where the probe carries zero padding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Union

MIN_CID_LEN = 1
MAX_CID_LEN = 20
#: Connection-ID length used by all endpoints in this model.
DEFAULT_CID_LEN = 8
CHALLENGE_LEN = 8
#: Anti-amplification floor: client Initials and probes are padded to this.
PROBE_SIZE = 1200

QUIC_V1 = 0x00000001
#: Reserved-pattern version (low nibble of every byte is 0xa) used to force
#: version negotiation.  Any 0x?a?a?a?a value works; one is fixed for
#: determinism.
FORCED_VN_VERSION = 0x1A2A3A4A

_LONG_FLAGS = 0xC0  # long-header bit + fixed bit
_SHORT_FLAGS = 0x40  # fixed bit only

_U32 = struct.Struct(">I")
_U16 = struct.Struct(">H")


class WireError(Exception):
    """Base class for encode/parse failures."""


class Truncated(WireError):
    pass


class UnknownFrameType(WireError):
    pass


class InvalidVersion(WireError):
    pass


class CidTooShort(WireError):
    pass


class NotVersionNegotiation(WireError):
    pass


class EchoMismatch(WireError):
    pass


class ConnectionId(bytes):
    """Opaque connection identifier, 1 to 20 octets, immutable."""

    def __new__(cls, value: bytes | bytearray | memoryview = b"\x00") -> "ConnectionId":
        raw = bytes(value)
        if not MIN_CID_LEN <= len(raw) <= MAX_CID_LEN:
            raise ValueError(
                f"connection id must be {MIN_CID_LEN}..{MAX_CID_LEN} octets, got {len(raw)}"
            )
        return super().__new__(cls, raw)

    def __repr__(self) -> str:
        return f"ConnectionId({self.hex()})"


class PacketKind(Enum):
    INITIAL = "initial"
    VERSION_NEGOTIATION = "vn"
    SHORT = "short"


@dataclass(frozen=True)
class TransportParams:
    """Subset of transport parameters relevant to migration."""

    disable_active_migration: bool = False
    active_cid_limit: int = 2

    def __post_init__(self) -> None:
        if not 0 <= self.active_cid_limit <= 255:
            raise ValueError("active_cid_limit must fit in one octet")
        if not self.disable_active_migration and self.active_cid_limit < 2:
            raise ValueError("active_cid_limit must be >= 2 when migration is enabled")


@dataclass(frozen=True)
class LongHeader:
    packet_kind: PacketKind
    version: int
    dcid: ConnectionId
    scid: ConnectionId

    def __post_init__(self) -> None:
        if self.packet_kind is PacketKind.VERSION_NEGOTIATION and self.version != 0:
            raise ValueError("version negotiation packets carry version 0")
        if self.packet_kind is PacketKind.INITIAL and self.version == 0:
            raise ValueError("initial packets carry a non-zero version")
        if self.packet_kind is PacketKind.SHORT:
            raise ValueError("short headers are not long headers")


@dataclass(frozen=True)
class ShortHeader:
    dcid: ConnectionId

    def __post_init__(self) -> None:
        if len(self.dcid) != DEFAULT_CID_LEN:
            raise ValueError(f"short-header dcid must be {DEFAULT_CID_LEN} octets")


Header = Union[LongHeader, ShortHeader]


# --- frames -----------------------------------------------------------------


@dataclass(frozen=True)
class CryptoClientHello:
    """Stand-in for the TLS Client Hello: carries only SNI and ALPN."""

    sni: str | None = None
    alpn: str = "h3"

    def __post_init__(self) -> None:
        if self.sni == "":
            object.__setattr__(self, "sni", None)
        if not self.alpn:
            raise ValueError("alpn must be non-empty")


@dataclass(frozen=True)
class CryptoServerHello:
    """Stand-in for the TLS Server Hello plus transport parameters."""

    transport_params: TransportParams


@dataclass(frozen=True)
class NewConnectionId:
    seq: int
    retire_prior_to: int
    cid: ConnectionId

    def __post_init__(self) -> None:
        if self.retire_prior_to > self.seq:
            raise ValueError("retire_prior_to must not exceed seq")


@dataclass(frozen=True)
class RetireConnectionId:
    seq: int


@dataclass(frozen=True)
class PathChallenge:
    data: bytes

    def __post_init__(self) -> None:
        if len(self.data) != CHALLENGE_LEN:
            raise ValueError(f"path challenge data must be {CHALLENGE_LEN} octets")


@dataclass(frozen=True)
class PathResponse:
    data: bytes

    def __post_init__(self) -> None:
        if len(self.data) != CHALLENGE_LEN:
            raise ValueError(f"path response data must be {CHALLENGE_LEN} octets")


@dataclass(frozen=True)
class HttpGet:
    path: str = "/"


@dataclass(frozen=True)
class HttpResponse:
    status: int
    server_header: str


@dataclass(frozen=True)
class ConnectionClose:
    code: int


Frame = Union[
    CryptoClientHello,
    CryptoServerHello,
    NewConnectionId,
    RetireConnectionId,
    PathChallenge,
    PathResponse,
    HttpGet,
    HttpResponse,
    ConnectionClose,
]

_FT_CLIENT_HELLO = 0x01
_FT_SERVER_HELLO = 0x02
_FT_NEW_CONNECTION_ID = 0x07
_FT_RETIRE_CONNECTION_ID = 0x08
_FT_PATH_CHALLENGE = 0x09
_FT_PATH_RESPONSE = 0x0A
_FT_HTTP_GET = 0x10
_FT_HTTP_RESPONSE = 0x11
_FT_CONNECTION_CLOSE = 0x12
_FT_PADDING = 0x00

FRAME_NAMES = {
    CryptoClientHello: "crypto_client_hello",
    CryptoServerHello: "crypto_server_hello",
    NewConnectionId: "new_connection_id",
    RetireConnectionId: "retire_connection_id",
    PathChallenge: "path_challenge",
    PathResponse: "path_response",
    HttpGet: "http_get",
    HttpResponse: "http_response",
    ConnectionClose: "connection_close",
}


def frame_name(frame: Frame) -> str:
    return FRAME_NAMES[type(frame)]


def encode_frames(frames: Iterable[Frame]) -> bytes:
    """Encode frames as type octet + fixed/length-prefixed body."""
    out = bytearray()
    for frame in frames:
        if isinstance(frame, CryptoClientHello):
            sni = (frame.sni or "").encode()
            alpn = frame.alpn.encode()
            out.append(_FT_CLIENT_HELLO)
            out += _U16.pack(len(sni)) + sni
            out.append(len(alpn))
            out += alpn
        elif isinstance(frame, CryptoServerHello):
            tp = frame.transport_params
            out.append(_FT_SERVER_HELLO)
            out.append(1 if tp.disable_active_migration else 0)
            out.append(tp.active_cid_limit)
        elif isinstance(frame, NewConnectionId):
            out.append(_FT_NEW_CONNECTION_ID)
            out += _U32.pack(frame.seq) + _U32.pack(frame.retire_prior_to)
            out.append(len(frame.cid))
            out += frame.cid
        elif isinstance(frame, RetireConnectionId):
            out.append(_FT_RETIRE_CONNECTION_ID)
            out += _U32.pack(frame.seq)
        elif isinstance(frame, PathChallenge):
            out.append(_FT_PATH_CHALLENGE)
            out += frame.data
        elif isinstance(frame, PathResponse):
            out.append(_FT_PATH_RESPONSE)
            out += frame.data
        elif isinstance(frame, HttpGet):
            path = frame.path.encode()
            out.append(_FT_HTTP_GET)
            out += _U16.pack(len(path)) + path
        elif isinstance(frame, HttpResponse):
            hdr = frame.server_header.encode()
            out.append(_FT_HTTP_RESPONSE)
            out += _U16.pack(frame.status) + _U16.pack(len(hdr)) + hdr
        elif isinstance(frame, ConnectionClose):
            out.append(_FT_CONNECTION_CLOSE)
            out += _U16.pack(frame.code)
        else:
            raise UnknownFrameType(f"cannot encode {type(frame).__name__}")
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0) -> None:
        self.data = data
        self.pos = pos

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int) -> bytes:
        if self.remaining() < n:
            raise Truncated(f"need {n} octets, have {self.remaining()}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_frames(payload: bytes) -> list[Frame]:
    """Decode a frame sequence; zero octets are padding and are skipped."""
    rd = _Reader(payload)
    frames: list[Frame] = []
    while rd.remaining():
        ftype = rd.u8()
        if ftype == _FT_PADDING:
            continue
        if ftype == _FT_CLIENT_HELLO:
            sni = rd.take(rd.u16()).decode()
            alpn = rd.take(rd.u8()).decode()
            frames.append(CryptoClientHello(sni=sni or None, alpn=alpn))
        elif ftype == _FT_SERVER_HELLO:
            disable = rd.u8() != 0
            limit = rd.u8()
            frames.append(
                CryptoServerHello(TransportParams(disable, limit))
            )
        elif ftype == _FT_NEW_CONNECTION_ID:
            seq = rd.u32()
            rpt = rd.u32()
            cid = ConnectionId(rd.take(rd.u8()))
            frames.append(NewConnectionId(seq, rpt, cid))
        elif ftype == _FT_RETIRE_CONNECTION_ID:
            frames.append(RetireConnectionId(rd.u32()))
        elif ftype == _FT_PATH_CHALLENGE:
            frames.append(PathChallenge(rd.take(CHALLENGE_LEN)))
        elif ftype == _FT_PATH_RESPONSE:
            frames.append(PathResponse(rd.take(CHALLENGE_LEN)))
        elif ftype == _FT_HTTP_GET:
            frames.append(HttpGet(rd.take(rd.u16()).decode()))
        elif ftype == _FT_HTTP_RESPONSE:
            status = rd.u16()
            frames.append(HttpResponse(status, rd.take(rd.u16()).decode()))
        elif ftype == _FT_CONNECTION_CLOSE:
            frames.append(ConnectionClose(rd.u16()))
        else:
            raise UnknownFrameType(f"frame type 0x{ftype:02x}")
    return frames


# --- headers and datagrams ---------------------------------------------------


@dataclass(frozen=True)
class Datagram:
    """One parsed UDP payload: a header plus frames or a version list."""

    header: Header
    frames: tuple[Frame, ...] = ()
    versions: tuple[int, ...] = ()

    @property
    def kind(self) -> PacketKind:
        if isinstance(self.header, ShortHeader):
            return PacketKind.SHORT
        return self.header.packet_kind

    def frame_names(self) -> list[str]:
        return [frame_name(f) for f in self.frames]


def encode_long_header(header: LongHeader) -> bytes:
    out = bytearray([_LONG_FLAGS])
    out += _U32.pack(header.version)
    out.append(len(header.dcid))
    out += header.dcid
    out.append(len(header.scid))
    out += header.scid
    return bytes(out)


def parse_long_header(data: bytes) -> tuple[LongHeader, int]:
    """Parse a long header, returning it and the payload offset."""
    rd = _Reader(data)
    flags = rd.u8()
    if not flags & 0x80:
        raise Truncated("not a long header")
    version = rd.u32()
    dcid = ConnectionId(rd.take(rd.u8()))
    scid = ConnectionId(rd.take(rd.u8()))
    kind = PacketKind.VERSION_NEGOTIATION if version == 0 else PacketKind.INITIAL
    return LongHeader(kind, version, dcid, scid), rd.pos


def encode_datagram(dgram: Datagram, pad_to: int = 0) -> bytes:
    if isinstance(dgram.header, ShortHeader):
        out = bytearray([_SHORT_FLAGS])
        out += dgram.header.dcid
        out += encode_frames(dgram.frames)
    elif dgram.header.packet_kind is PacketKind.VERSION_NEGOTIATION:
        out = bytearray(encode_long_header(dgram.header))
        for version in dgram.versions:
            out += _U32.pack(version)
    else:
        out = bytearray(encode_long_header(dgram.header))
        out += encode_frames(dgram.frames)
    if len(out) < pad_to:
        out += bytes(pad_to - len(out))
    return bytes(out)


def parse_datagram(data: bytes) -> Datagram:
    if not data:
        raise Truncated("empty datagram")
    if data[0] & 0x80:
        header, offset = parse_long_header(data)
        if header.packet_kind is PacketKind.VERSION_NEGOTIATION:
            body = data[offset:]
            if len(body) % 4:
                raise Truncated("version list is not a multiple of 4 octets")
            versions = tuple(_U32.unpack_from(body, i)[0] for i in range(0, len(body), 4))
            return Datagram(header, versions=versions)
        return Datagram(header, frames=tuple(decode_frames(data[offset:])))
    rd = _Reader(data, pos=1)
    dcid = ConnectionId(rd.take(DEFAULT_CID_LEN))
    return Datagram(ShortHeader(dcid), frames=tuple(decode_frames(data[rd.pos :])))


# --- discovery probe ----------------------------------------------------------


def has_forced_version_pattern(version: int) -> bool:
    """True when the low nibble of every version byte is 0xa (reserved)."""
    return all((version >> shift) & 0x0F == 0x0A for shift in (0, 8, 16, 24))


def encode_probe(forced_version: int, dcid: ConnectionId, scid: ConnectionId) -> bytes:
    """Build the 1200-octet Initial that forces a version negotiation.

    The header octets follow the genuine QUIC v1 long-header layout; the
    payload is zero padding standing in for the Client Hello.
    """
    if not has_forced_version_pattern(forced_version):
        raise InvalidVersion(f"0x{forced_version:08x} lacks the reserved ?a?a?a?a pattern")
    if len(dcid) < DEFAULT_CID_LEN:
        raise CidTooShort(f"probe dcid must be >= {DEFAULT_CID_LEN} octets")
    header = LongHeader(PacketKind.INITIAL, forced_version, dcid, scid)
    return encode_datagram(Datagram(header), pad_to=PROBE_SIZE)


def encode_version_negotiation(
    dcid: ConnectionId, scid: ConnectionId, versions: Iterable[int]
) -> bytes:
    """Build a Version Negotiation reply (dcid must echo the probe's scid)."""
    header = LongHeader(PacketKind.VERSION_NEGOTIATION, 0, dcid, scid)
    return encode_datagram(Datagram(header, versions=tuple(versions)))


def parse_version_negotiation(datagram: bytes, sent_scid: ConnectionId) -> list[int]:
    """Extract the supported-version list, verifying the SCID echo."""
    header, offset = parse_long_header(datagram)
    if header.version != 0:
        raise NotVersionNegotiation(f"version 0x{header.version:08x} is not 0")
    if header.dcid != sent_scid:
        raise EchoMismatch("response dcid does not echo our scid")
    body = datagram[offset:]
    if not body or len(body) % 4:
        raise Truncated("version list missing or not a multiple of 4 octets")
    return [_U32.unpack_from(body, i)[0] for i in range(0, len(body), 4)]
