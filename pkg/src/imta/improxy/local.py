"""LocalIMProxy: SOCKS5 on the user's machine, tunnelling to the remote peer."""

from __future__ import annotations

import asyncio
import logging

from .config import ProxyConfig
from .crypto import new_nonce, session_ciphers
from .frames import ControlKind, Frame, FrameError, FrameType, control_kind, encode_close, encode_connect
from .socks import REP_GENERAL_FAILURE, REP_SUCCEEDED, SocksError, reply, server_handshake
from .tunnel import (Capture, Obfuscator, ProxySession, TunnelReader, TunnelWriter, close_writer,
                     eof_writer, silence_ticker)

log = logging.getLogger(__name__)


class LocalProxy:
    def __init__(self, cfg: ProxyConfig, capture: bool = False):
        self.cfg = cfg
        self.capture = capture
        self.sessions: list[ProxySession] = []
        self._server: asyncio.base_events.Server | None = None
        self._tasks: set[asyncio.Task] = set()

    async def start(self, host: str | None = None, port: int | None = None) -> tuple[str, int]:
        h, p = self.cfg.local_listen
        self._server = await asyncio.start_server(self._on_client, host or h, p if port is None else port)
        addr = self._server.sockets[0].getsockname()
        log.info("local proxy listening on %s:%s", addr[0], addr[1])
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

    async def _on_client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        self._tasks.add(task)
        session = ProxySession("local", self.cfg.obfuscation, client=writer.get_extra_info("peername"),
                               capture=Capture() if self.capture else None)
        self.sessions.append(session)
        try:
            await self._run_session(session, reader, writer)
        except (ConnectionError, asyncio.IncompleteReadError) as exc:
            session.error = session.error or f"connection lost: {exc!r}"
        finally:
            close_writer(writer)
            session.done.set()
            self._tasks.discard(task)

    async def _run_session(self, session: ProxySession, reader, writer) -> None:
        try:
            host, port = await server_handshake(reader, writer)
        except SocksError as exc:
            session.error = str(exc)
            log.info("session %d: %s", session.id, exc)
            return
        session.upstream = (host, port)

        try:
            t_reader, t_writer = await asyncio.wait_for(
                asyncio.open_connection(*self.cfg.remote), self.cfg.connect_timeout)
        except (OSError, asyncio.TimeoutError) as exc:
            session.error = f"remote proxy unreachable: {exc!r}"
            writer.write(reply(REP_GENERAL_FAILURE))
            await writer.drain()
            return

        try:
            nonce = new_nonce()
            t_writer.write(nonce)
            send_c, recv_c = session_ciphers(self.cfg.psk, nonce, local_side=True)
            tw = TunnelWriter(t_writer, send_c, session, up=True)
            tr = TunnelReader(t_reader, recv_c, session, up=False)
            tw.send([Frame(FrameType.CONTROL, encode_connect(host, port))])
            await tw.drain()

            status = await self._await_reply(tr)
            writer.write(reply(status))
            await writer.drain()
            if status != REP_SUCCEEDED:
                session.error = f"remote reported SOCKS reply 0x{status:02x}"
                return

            ob = Obfuscator(self.cfg.obfuscation, self.cfg.seed, session.id)
            stop = asyncio.Event()
            ticker = asyncio.ensure_future(silence_ticker(tw, ob, self.cfg.silence_interval, stop))
            try:
                await asyncio.gather(self._pump_up(reader, tw, ob, stop), self._pump_down(tr, writer, session))
            finally:
                stop.set()
                await ticker
        except FrameError as exc:
            session.error = f"malformed tunnel frame: {exc}"
            log.warning("session %d: %s", session.id, session.error)
        finally:
            close_writer(t_writer)

    async def _await_reply(self, tr: TunnelReader) -> int:
        while True:
            frame = await tr.read_frame()
            if frame is None:
                return REP_GENERAL_FAILURE
            if frame.type == FrameType.DUMMY:
                continue
            if frame.type != FrameType.CONTROL or control_kind(frame.payload) != ControlKind.REPLY:
                raise FrameError("expected a REPLY control frame")
            return frame.payload[1] if len(frame.payload) > 1 else REP_GENERAL_FAILURE

    async def _pump_up(self, reader, tw: TunnelWriter, ob: Obfuscator, stop: asyncio.Event) -> None:
        try:
            while True:
                chunk = await reader.read(self.cfg.chunk_size)
                if not chunk:
                    break
                tw.send(ob.data_frames(chunk))
                await tw.drain()
        finally:
            stop.set()
            tw.send([Frame(FrameType.CONTROL, encode_close())])
            try:
                await tw.drain()
            except ConnectionError:
                pass

    async def _pump_down(self, tr: TunnelReader, writer, session: ProxySession) -> None:
        c = session.counters
        while True:
            frame = await tr.read_frame()
            if frame is None:
                break
            if frame.type == FrameType.DATA:
                writer.write(frame.payload)
                c.real_delivered += len(frame.payload)
                await writer.drain()
            elif frame.type == FrameType.DUMMY:
                c.dummy_dropped += len(frame.payload)
            elif control_kind(frame.payload) == ControlKind.CLOSE:
                break
        eof_writer(writer)


async def run_local(cfg: ProxyConfig, capture: bool = False) -> None:
    """Serve the local proxy until cancelled."""
    proxy = LocalProxy(cfg, capture)
    await proxy.start()
    try:
        await proxy.serve_forever()
    finally:
        await proxy.close()
