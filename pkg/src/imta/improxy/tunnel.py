"""Session state and the encrypted, framed link between the two proxies."""

from __future__ import annotations

import asyncio
import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..obfuscate import ObfuscationConfig
from ..trace import PacketTrace
from .crypto import StreamCipher
from .frames import HEADER_SIZE, Frame, FrameError, FrameType, dummy_frames, encode_frame, parse_header

log = logging.getLogger(__name__)

_session_ids = itertools.count(1)


class Capture:
    """Wire-side log of tunnel frames: arrival time, encrypted size, direction."""

    def __init__(self):
        self.t0 = time.perf_counter()
        self.times: list[float] = []
        self.sizes: list[int] = []
        self.up: list[bool] = []

    def record(self, size: int, up: bool) -> None:
        self.times.append(time.perf_counter() - self.t0)
        self.sizes.append(size)
        self.up.append(up)

    def __len__(self) -> int:
        return len(self.times)

    def trace(self) -> PacketTrace:
        # two directions are logged by different tasks; keep the merge ordered
        order = np.argsort(np.asarray(self.times), kind="stable")
        return PacketTrace(np.asarray(self.times)[order], np.asarray(self.sizes, dtype=np.int64)[order],
                           np.asarray(self.up, dtype=bool)[order])


@dataclass
class Counters:
    real_sent: int = 0  # Data payload bytes this side put on the tunnel
    dummy_sent: int = 0
    real_delivered: int = 0  # Data payload bytes written to this side's endpoint
    dummy_dropped: int = 0
    dummy_frames_sent: int = 0


@dataclass
class ProxySession:
    side: str  # "local" or "remote"
    obfuscation: ObfuscationConfig
    id: int = field(default_factory=lambda: next(_session_ids))
    client: tuple | None = None
    upstream: tuple[str, int] | None = None
    counters: Counters = field(default_factory=Counters)
    capture: Capture | None = None
    done: asyncio.Event = field(default_factory=asyncio.Event)
    error: str | None = None


def capture_side_channel(session: ProxySession) -> PacketTrace:
    """The frames seen on the tunnel for ``session``, in line-trace form."""
    if session.capture is None:
        raise ValueError(f"session {session.id} was not started with capture enabled")
    return session.capture.trace()


class TunnelWriter:
    """Encrypts and writes whole frames; each ``send`` is atomic on the stream."""

    def __init__(self, writer: asyncio.StreamWriter, cipher: StreamCipher, session: ProxySession, up: bool):
        self.writer = writer
        self.cipher = cipher
        self.session = session
        self.up = up
        self.last_data = time.monotonic()
        self.closed = False

    def send(self, frames: list[Frame]) -> None:
        if self.writer.is_closing():
            return
        c = self.session.counters
        for f in frames:
            wire = self.cipher.apply(encode_frame(f))
            self.writer.write(wire)
            if self.session.capture is not None:
                self.session.capture.record(len(wire), self.up)
            if f.type == FrameType.DATA:
                c.real_sent += len(f.payload)
                self.last_data = time.monotonic()
            elif f.type == FrameType.DUMMY:
                c.dummy_sent += len(f.payload)
                c.dummy_frames_sent += 1

    async def drain(self) -> None:
        if not self.writer.is_closing():
            await self.writer.drain()


class TunnelReader:
    def __init__(self, reader: asyncio.StreamReader, cipher: StreamCipher, session: ProxySession, up: bool):
        self.reader = reader
        self.cipher = cipher
        self.session = session
        self.up = up

    async def read_frame(self) -> Frame | None:
        """The next frame, or None at a clean end of stream."""
        try:
            head = self.cipher.apply(await self.reader.readexactly(HEADER_SIZE))
        except asyncio.IncompleteReadError as exc:
            if exc.partial:
                raise FrameError("tunnel closed inside a frame header") from None
            return None
        ftype, length = parse_header(head)
        try:
            payload = self.cipher.apply(await self.reader.readexactly(length)) if length else b""
        except asyncio.IncompleteReadError:
            raise FrameError(f"tunnel closed inside a {length}-byte frame") from None
        if self.session.capture is not None:
            self.session.capture.record(HEADER_SIZE + length, self.up)
        return Frame(ftype, payload)


class Obfuscator:
    """Per-session random choices for padding and silence dummies."""

    def __init__(self, cfg: ObfuscationConfig, seed: int | None, session_id: int):
        self.cfg = cfg
        self.rng = np.random.default_rng(None if seed is None else [seed, session_id])
        self._sizes = cfg.dummy_size_model() if cfg.p_padding > 0 else None

    def data_frames(self, chunk: bytes) -> list[Frame]:
        """A Data frame for ``chunk``, followed by its padding when enabled."""
        frames = [Frame(FrameType.DATA, chunk)]
        if self.cfg.r_padding > 0:
            extra = int(round(self.rng.uniform(0.0, self.cfg.r_padding) * len(chunk)))
            frames += dummy_frames(extra)
        return frames

    def silence_dummy(self) -> list[Frame]:
        if self.cfg.p_padding <= 0 or self.rng.random() >= self.cfg.p_padding:
            return []
        size = max(1, int(round(float(self._sizes.quantile(self.rng.random())))))
        return dummy_frames(size)

    def delay(self) -> float:
        return float(self.rng.exponential(self.cfg.mean_delay)) if self.cfg.delays_enabled else 0.0


async def silence_ticker(tw: TunnelWriter, ob: Obfuscator, interval: float, stop: asyncio.Event) -> None:
    """Inject dummy events into intervals with no Data frames."""
    if ob.cfg.p_padding <= 0:
        return
    while not stop.is_set():
        try:
            await asyncio.wait_for(stop.wait(), interval)
            return
        except asyncio.TimeoutError:
            pass
        if time.monotonic() - tw.last_data >= interval:
            frames = ob.silence_dummy()
            if frames:
                tw.send(frames)
                await tw.drain()


class DelayLine:
    """Releases frame groups after exponential holds without reordering them."""

    def __init__(self, tw: TunnelWriter, ob: Obfuscator):
        self.tw = tw
        self.ob = ob
        self.queue: asyncio.Queue = asyncio.Queue()
        self._last = 0.0
        self.task = asyncio.ensure_future(self._run())

    def submit(self, frames: list[Frame]) -> None:
        loop = asyncio.get_running_loop()
        release = max(loop.time() + self.ob.delay(), self._last)
        self._last = release
        self.queue.put_nowait((release, frames))

    async def finish(self) -> None:
        self.queue.put_nowait((0.0, None))
        await self.task

    async def _run(self) -> None:
        loop = asyncio.get_running_loop()
        while True:
            release, frames = await self.queue.get()
            if frames is None:
                return
            wait = release - loop.time()
            if wait > 0:
                await asyncio.sleep(wait)
            self.tw.send(frames)
            try:
                await self.tw.drain()
            except ConnectionError:
                return


def close_writer(writer: asyncio.StreamWriter | None) -> None:
    if writer is not None and not writer.is_closing():
        writer.close()


def eof_writer(writer: asyncio.StreamWriter) -> None:
    """Half-close toward an endpoint, or close when half-close is unavailable."""
    try:
        if writer.can_write_eof():
            writer.write_eof()
        else:
            writer.close()
    except (OSError, RuntimeError):
        writer.close()
