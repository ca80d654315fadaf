"""The SOCKS5 subset IM clients need: no authentication, CONNECT only."""

from __future__ import annotations

import asyncio
import errno
import ipaddress
import socket
import struct

VERSION = 5
METHOD_NO_AUTH = 0x00
METHOD_NONE_ACCEPTABLE = 0xFF
CMD_CONNECT = 0x01
ATYP_IPV4 = 0x01
ATYP_DOMAIN = 0x03
ATYP_IPV6 = 0x04

REP_SUCCEEDED = 0x00
REP_GENERAL_FAILURE = 0x01
REP_NOT_ALLOWED = 0x02
REP_NETWORK_UNREACHABLE = 0x03
REP_HOST_UNREACHABLE = 0x04
REP_CONNECTION_REFUSED = 0x05
REP_TTL_EXPIRED = 0x06
REP_COMMAND_NOT_SUPPORTED = 0x07
REP_ADDRESS_NOT_SUPPORTED = 0x08


class SocksError(Exception):
    def __init__(self, message: str, reply: int | None = REP_GENERAL_FAILURE):
        super().__init__(message)
        self.reply = reply


def encode_address(host: str, port: int) -> bytes:
    try:
        ip = ipaddress.ip_address(host)
    except ValueError:
        raw = host.encode("idna")
        if len(raw) > 255:
            raise SocksError("domain name too long", REP_ADDRESS_NOT_SUPPORTED) from None
        return bytes([ATYP_DOMAIN, len(raw)]) + raw + struct.pack(">H", port)
    atyp = ATYP_IPV4 if ip.version == 4 else ATYP_IPV6
    return bytes([atyp]) + ip.packed + struct.pack(">H", port)


def decode_address(data: bytes) -> tuple[str, int, int]:
    """(host, port, bytes consumed) from an ATYP-prefixed address."""
    if not data:
        raise SocksError("missing address", REP_ADDRESS_NOT_SUPPORTED)
    atyp = data[0]
    if atyp == ATYP_IPV4:
        end = 5
        host = str(ipaddress.IPv4Address(data[1:5]))
    elif atyp == ATYP_IPV6:
        end = 17
        host = str(ipaddress.IPv6Address(data[1:17]))
    elif atyp == ATYP_DOMAIN:
        n = data[1]
        end = 2 + n
        host = data[2:end].decode("idna")
    else:
        raise SocksError(f"address type {atyp} not supported", REP_ADDRESS_NOT_SUPPORTED)
    if len(data) < end + 2:
        raise SocksError("truncated address", REP_GENERAL_FAILURE)
    port = struct.unpack(">H", data[end:end + 2])[0]
    return host, port, end + 2


def reply(code: int, host: str = "0.0.0.0", port: int = 0) -> bytes:
    return bytes([VERSION, code, 0x00]) + encode_address(host, port)


def reply_for_error(exc: BaseException) -> int:
    """Map a connect failure to the closest SOCKS5 reply code."""
    if isinstance(exc, ConnectionRefusedError):
        return REP_CONNECTION_REFUSED
    if isinstance(exc, socket.gaierror):
        return REP_HOST_UNREACHABLE
    if isinstance(exc, (asyncio.TimeoutError, TimeoutError)):
        return REP_TTL_EXPIRED
    if isinstance(exc, OSError):
        if exc.errno == errno.ENETUNREACH:
            return REP_NETWORK_UNREACHABLE
        if exc.errno in (errno.EHOSTUNREACH, errno.EHOSTDOWN):
            return REP_HOST_UNREACHABLE
        if exc.errno == errno.ECONNREFUSED:
            return REP_CONNECTION_REFUSED
    return REP_GENERAL_FAILURE


async def server_handshake(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> tuple[str, int]:
    """Run the server side up to (not including) the final reply.

    Returns the requested (host, port). On a protocol error the matching
    reply has already been written when one exists.
    """
    head = await reader.readexactly(2)
    if head[0] != VERSION:
        raise SocksError(f"SOCKS version {head[0]} not supported", None)
    methods = await reader.readexactly(head[1])
    if METHOD_NO_AUTH not in methods:
        writer.write(bytes([VERSION, METHOD_NONE_ACCEPTABLE]))
        await writer.drain()
        raise SocksError("client offers no acceptable auth method", None)
    writer.write(bytes([VERSION, METHOD_NO_AUTH]))
    await writer.drain()

    ver, cmd, _rsv, atyp = await reader.readexactly(4)
    if ver != VERSION:
        raise SocksError(f"SOCKS version {ver} in request", None)
    if atyp == ATYP_IPV4:
        rest = await reader.readexactly(4 + 2)
    elif atyp == ATYP_IPV6:
        rest = await reader.readexactly(16 + 2)
    elif atyp == ATYP_DOMAIN:
        n = (await reader.readexactly(1))[0]
        rest = bytes([n]) + await reader.readexactly(n + 2)
    else:
        writer.write(reply(REP_ADDRESS_NOT_SUPPORTED))
        await writer.drain()
        raise SocksError(f"address type {atyp} not supported", REP_ADDRESS_NOT_SUPPORTED)
    if cmd != CMD_CONNECT:
        writer.write(reply(REP_COMMAND_NOT_SUPPORTED))
        await writer.drain()
        raise SocksError(f"command {cmd} not supported", REP_COMMAND_NOT_SUPPORTED)
    host, port, _ = decode_address(bytes([atyp]) + rest)
    return host, port


async def client_connect(reader: asyncio.StreamReader, writer: asyncio.StreamWriter, host: str, port: int) -> int:
    """Client side of the handshake; returns the server's reply code."""
    writer.write(bytes([VERSION, 1, METHOD_NO_AUTH]))
    await writer.drain()
    ver, method = await reader.readexactly(2)
    if ver != VERSION or method != METHOD_NO_AUTH:
        raise SocksError(f"server refused no-auth (method 0x{method:02x})")
    writer.write(bytes([VERSION, CMD_CONNECT, 0x00]) + encode_address(host, port))
    await writer.drain()
    ver, rep, _rsv, atyp = await reader.readexactly(4)
    if atyp == ATYP_IPV4:
        await reader.readexactly(6)
    elif atyp == ATYP_IPV6:
        await reader.readexactly(18)
    elif atyp == ATYP_DOMAIN:
        n = (await reader.readexactly(1))[0]
        await reader.readexactly(n + 2)
    return rep
