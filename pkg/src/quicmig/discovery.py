"""Target discovery: responsiveness probing and SNI assignment.

Builds the scan target set in two steps.  First, candidate addresses are
probed with a forced version negotiation (a long-header Initial carrying a
reserved version number); an address is responsive iff it answers with a
well-formed Version Negotiation that echoes our SCID.  Second, a
pre-resolved domain,ip map is inverted so responsive addresses can be
scanned with a matching SNI.
"""

from __future__ import annotations

import csv
import ipaddress
import random
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator

from .errors import ParseError
from .netsim import SimTransport, World
from .wire import (
    DEFAULT_CID_LEN,
    FORCED_VN_VERSION,
    ConnectionId,
    WireError,
    encode_probe,
    parse_version_negotiation,
)

DEFAULT_REPLY_WINDOW_MS = 2000

_LABEL = r"[a-z0-9]([a-z0-9-]{0,61}[a-z0-9])?"
_DOMAIN_RE = re.compile(rf"^{_LABEL}(\.{_LABEL})+$")


def _canon_ip(text: str) -> str:
    return str(ipaddress.ip_address(text.strip()))


def _ip_sort_key(ip: str):
    parsed = ipaddress.ip_address(ip)
    return (parsed.version, int(parsed))


@dataclass(frozen=True)
class Target:
    """One scannable endpoint; snis are lowercase, deduplicated and sorted."""

    ip: str
    port: int
    snis: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "ip", _canon_ip(self.ip))
        snis = tuple(sorted(set(s.lower() for s in self.snis)))
        object.__setattr__(self, "snis", snis)


@dataclass(frozen=True)
class DomainRecord:
    domain: str
    addresses: tuple[str, ...]

    def __post_init__(self) -> None:
        if not _DOMAIN_RE.match(self.domain):
            raise ValueError(f"not a valid dns name: {self.domain!r}")


class PrefixSet:
    """Set of CIDR prefixes supporting membership tests for both families."""

    def __init__(self, prefixes: Iterable[str] = ()) -> None:
        self._nets: list[tuple[int, int, int, int]] = []  # version, netint, plen, mask
        self.prefixes: list[str] = []
        for prefix in prefixes:
            self.add(prefix)

    def add(self, prefix: str) -> None:
        net = ipaddress.ip_network(prefix.strip(), strict=False)
        bits = 32 if net.version == 4 else 128
        mask = ((1 << net.prefixlen) - 1) << (bits - net.prefixlen) if net.prefixlen else 0
        self._nets.append((net.version, int(net.network_address), net.prefixlen, mask))
        self.prefixes.append(str(net))

    def contains(self, ip: str) -> bool:
        parsed = ipaddress.ip_address(ip)
        value = int(parsed)
        for version, netint, _, mask in self._nets:
            if version == parsed.version and value & mask == netint:
                return True
        return False

    def __len__(self) -> int:
        return len(self._nets)


def load_blocklist(path: str) -> PrefixSet:
    """Load one CIDR per line; '#' starts a comment."""
    blocklist = PrefixSet()
    with open(path, encoding="utf-8") as fp:
        for lineno, raw in enumerate(fp, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                blocklist.add(line)
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from exc
    return blocklist


def load_address_list(path: str, default_port: int = 443) -> list[tuple[str, int]]:
    """Load one address per line, with an optional ',port' suffix."""
    out: list[tuple[str, int]] = []
    with open(path, encoding="utf-8") as fp:
        for lineno, raw in enumerate(fp, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            ip, _, port_text = line.partition(",")
            try:
                port = int(port_text) if port_text else default_port
                out.append((_canon_ip(ip), port))
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from exc
    return out


def iter_domain_records(path: str) -> Iterator[tuple[int, DomainRecord]]:
    with open(path, encoding="utf-8", newline="") as fp:
        for lineno, row in enumerate(csv.reader(fp), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise ParseError(path, lineno, f"expected 'domain,ip', got {row!r}")
            domain, ip = row[0].strip().lower(), row[1].strip()
            try:
                record = DomainRecord(domain, (_canon_ip(ip),))
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from exc
            yield lineno, record


def load_domain_map(path: str) -> dict[str, list[str]]:
    """Invert 'domain,ip' lines into address -> sorted unique domains."""
    index: dict[str, set[str]] = {}
    for _, record in iter_domain_records(path):
        for address in record.addresses:
            index.setdefault(address, set()).add(record.domain)
    return {ip: sorted(domains) for ip, domains in index.items()}


class SniMode(Enum):
    WITH_SNI = "with-sni"
    NO_SNI = "no-sni"


def build_targets(
    responsive: Iterable[str],
    domain_map: dict[str, list[str]],
    mode: SniMode,
    port: int = 443,
) -> list[Target]:
    """Attach SNIs (WITH_SNI keeps only mapped addresses) and sort by ip."""
    seen: dict[str, None] = {}
    for ip in responsive:
        seen.setdefault(_canon_ip(ip), None)
    targets = []
    for ip in seen:
        if mode is SniMode.WITH_SNI:
            domains = domain_map.get(ip)
            if not domains:
                continue
            targets.append(Target(ip, port, tuple(domains)))
        else:
            targets.append(Target(ip, port))
    targets.sort(key=lambda t: _ip_sort_key(t.ip))
    return targets


def probe_responsive(
    addresses: Iterable[str],
    port: int,
    rate_pps: int,
    blocklist: PrefixSet,
    transport: SimTransport,
    reply_window_ms: int = DEFAULT_REPLY_WINDOW_MS,
) -> list[tuple[str, list[int]]]:
    """Probe addresses for QUIC support via forced version negotiation.

    Exactly one probe is sent per non-blocklisted address, paced so that no
    one-second window carries more than rate_pps datagrams.  Replies are
    collected until reply_window_ms after the last probe.  Returns the
    responsive addresses in input order with their advertised version lists.
    """
    if rate_pps <= 0:
        raise ValueError("rate_pps must be positive")
    world: World = transport.world
    local = transport.allocate_addr()

    eligible: list[str] = []
    seen: set[str] = set()
    for ip in addresses:
        canon = _canon_ip(ip)
        if canon in seen or blocklist.contains(canon):
            continue
        seen.add(canon)
        eligible.append(canon)

    rng = random.Random(world.seed ^ 0x70726F6265)  # independent probe stream
    sent: dict[tuple[str, int], ConnectionId] = {}
    replies: dict[str, list[int]] = {}
    t0 = world.now
    last_send = t0
    cutoff = [0]

    def on_datagram(data: bytes, src: tuple[str, int], now: int) -> None:
        if now > cutoff[0] or src not in sent or src[0] in replies:
            return
        try:
            versions = parse_version_negotiation(data, sent[src])
        except WireError:
            return
        replies[src[0]] = versions

    world.register_client(local, on_datagram)

    def make_sender(ip: str):
        def fire(now: int) -> None:
            scid = ConnectionId(rng.randbytes(DEFAULT_CID_LEN))
            dcid = ConnectionId(rng.randbytes(DEFAULT_CID_LEN))
            sent[(ip, port)] = scid
            world.send(encode_probe(FORCED_VN_VERSION, dcid, scid), src=local, dst=(ip, port))

        return fire

    for index, ip in enumerate(eligible):
        at = t0 + ((index + 1) * 1000) // rate_pps
        last_send = at
        world.schedule_timer(at, make_sender(ip))
    cutoff[0] = last_send + reply_window_ms

    world.run_until_idle()
    world.unregister_client(local)
    return [(ip, replies[ip]) for ip in eligible if ip in replies]
