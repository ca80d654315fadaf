"""RemoteIMProxy: terminates tunnels and connects to the requested servers."""

from __future__ import annotations

import asyncio
import logging

from .config import ProxyConfig
from .crypto import NONCE_SIZE, session_ciphers
from .frames import ControlKind, Frame, FrameError, FrameType, control_kind, encode_close, encode_reply
from .socks import REP_SUCCEEDED, SocksError, decode_address, reply_for_error
from .tunnel import (Capture, DelayLine, Obfuscator, ProxySession, TunnelReader, TunnelWriter, close_writer,
                     eof_writer, silence_ticker)

log = logging.getLogger(__name__)


class RemoteProxy:
    def __init__(self, cfg: ProxyConfig, capture: bool = False):
        self.cfg = cfg
        self.capture = capture
        self.sessions: list[ProxySession] = []
        self._server: asyncio.base_events.Server | None = None
        self._tasks: set[asyncio.Task] = set()

    async def start(self, host: str | None = None, port: int | None = None) -> tuple[str, int]:
        h, p = self.cfg.remote_listen
        self._server = await asyncio.start_server(self._on_tunnel, host or h, p if port is None else port)
        addr = self._server.sockets[0].getsockname()
        log.info("remote proxy listening on %s:%s", addr[0], addr[1])
        return addr[0], addr[1]

    async def serve_forever(self) -> None:
        await self._server.serve_forever()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for t in list(self._tasks):
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)

    async def _on_tunnel(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        self._tasks.add(task)
        session = ProxySession("remote", self.cfg.obfuscation, client=writer.get_extra_info("peername"),
                               capture=Capture() if self.capture else None)
        self.sessions.append(session)
        try:
            await self._run_session(session, reader, writer)
        except FrameError as exc:
            session.error = f"malformed tunnel frame: {exc}"
            log.warning("session %d torn down: %s", session.id, session.error)
        except (ConnectionError, asyncio.IncompleteReadError) as exc:
            session.error = session.error or f"connection lost: {exc!r}"
        finally:
            close_writer(writer)
            session.done.set()
            self._tasks.discard(task)

    async def _run_session(self, session: ProxySession, reader, writer) -> None:
        nonce = await reader.readexactly(NONCE_SIZE)
        send_c, recv_c = session_ciphers(self.cfg.psk, nonce, local_side=False)
        tw = TunnelWriter(writer, send_c, session, up=False)
        tr = TunnelReader(reader, recv_c, session, up=True)

        first = await tr.read_frame()
        while first is not None and first.type == FrameType.DUMMY:
            first = await tr.read_frame()
        if first is None:
            return
        if first.type != FrameType.CONTROL or control_kind(first.payload) != ControlKind.CONNECT:
            raise FrameError("first frame must be a CONNECT control frame")
        try:
            host, port, _ = decode_address(first.payload[1:])
        except SocksError as exc:
            tw.send([Frame(FrameType.CONTROL, encode_reply(exc.reply))])
            await tw.drain()
            return
        session.upstream = (host, port)

        try:
            d_reader, d_writer = await asyncio.wait_for(asyncio.open_connection(host, port),
                                                        self.cfg.connect_timeout)
        except (OSError, asyncio.TimeoutError) as exc:
            code = reply_for_error(exc)
            session.error = f"connect to {host}:{port} failed: {exc!r}"
            tw.send([Frame(FrameType.CONTROL, encode_reply(code))])
            await tw.drain()
            return

        try:
            tw.send([Frame(FrameType.CONTROL, encode_reply(REP_SUCCEEDED))])
            await tw.drain()
            ob = Obfuscator(self.cfg.obfuscation, self.cfg.seed, session.id)
            stop = asyncio.Event()
            line = DelayLine(tw, ob)
            ticker = asyncio.ensure_future(silence_ticker(tw, ob, self.cfg.silence_interval, stop))
            try:
                await asyncio.gather(self._pump_up(tr, d_writer, session), self._pump_down(d_reader, line, ob, stop))
            finally:
                stop.set()
                await ticker
                if not line.task.done():
                    line.task.cancel()
        finally:
            close_writer(d_writer)

    async def _pump_up(self, tr: TunnelReader, d_writer, session: ProxySession) -> None:
        """Tunnel to destination. Upstream is never delayed."""
        c = session.counters
        while True:
            frame = await tr.read_frame()
            if frame is None:
                break
            if frame.type == FrameType.DATA:
                d_writer.write(frame.payload)
                c.real_delivered += len(frame.payload)
                await d_writer.drain()
            elif frame.type == FrameType.DUMMY:
                c.dummy_dropped += len(frame.payload)
            elif control_kind(frame.payload) == ControlKind.CLOSE:
                break
        eof_writer(d_writer)

    async def _pump_down(self, d_reader, line: DelayLine, ob: Obfuscator, stop: asyncio.Event) -> None:
        """Destination to tunnel, through the delay line."""
        try:
            while True:
                chunk = await d_reader.read(self.cfg.chunk_size)
                if not chunk:
                    break
                line.submit(ob.data_frames(chunk))
        finally:
            stop.set()
            line.submit([Frame(FrameType.CONTROL, encode_close())])
            await line.finish()


async def run_remote(cfg: ProxyConfig, capture: bool = False) -> None:
    """Serve the remote proxy until cancelled."""
    proxy = RemoteProxy(cfg, capture)
    await proxy.start()
    try:
        await proxy.serve_forever()
    finally:
        await proxy.close()
