"""TCP proxy for fault injection between a mobile node and the base station.

``cut(seconds)`` drops every proxied connection and stops listening for that
long, so the downstream side sees a closed stream followed by refused
connects until the proxy comes back on the same port.
"""

from __future__ import annotations

import asyncio


class FaultProxy:
    def __init__(self, upstream_host: str, upstream_port: int, host: str = "127.0.0.1"):
        self.upstream = (upstream_host, upstream_port)
        self.host = host
        self.port: int | None = None
        self.accepted = 0
        self.cuts: list[tuple[float, float]] = []  # loop times (start, end)
        self._server: asyncio.base_events.Server | None = None
        self._pairs: set[asyncio.Task] = set()

    async def start(self):
        self._server = await asyncio.start_server(self._on_connect, self.host, self.port or 0, reuse_address=True)
        self.port = self._server.sockets[0].getsockname()[1]
        return self

    async def _pipe(self, reader, writer):
        try:
            while data := await reader.read(65536):
                writer.write(data)
                await writer.drain()
        except (ConnectionError, OSError):
            pass
        finally:
            writer.close()

    async def _on_connect(self, reader, writer):
        self.accepted += 1
        try:
            up_reader, up_writer = await asyncio.open_connection(*self.upstream)
        except OSError:
            writer.close()
            return
        task = asyncio.current_task()
        self._pairs.add(task)
        try:
            await asyncio.gather(self._pipe(reader, up_writer), self._pipe(up_reader, writer))
        except asyncio.CancelledError:
            pass
        finally:
            self._pairs.discard(task)
            writer.close()
            up_writer.close()

    async def cut(self, seconds: float):
        loop = asyncio.get_running_loop()
        start = loop.time()
        self._server.close()
        for t in list(self._pairs):
            t.cancel()
        await self._server.wait_closed()
        await asyncio.sleep(seconds)
        await self.start()
        self.cuts.append((start, loop.time()))

    async def close(self):
        if self._server is not None:
            self._server.close()
        for t in list(self._pairs):
            t.cancel()
        await asyncio.sleep(0)
