"""An asyncio event loop driven by virtual time.

The loop never sleeps: whenever no callback is ready it jumps the clock to the
next scheduled timer. Code written against plain asyncio (``sleep``,
``wait_for``, streams) runs unchanged and fully deterministically, as long as
nothing performs real I/O or touches threads.
"""

from __future__ import annotations

import asyncio
import selectors


class Deadlock(RuntimeError):
    """Raised when the loop has nothing ready and nothing scheduled."""


class _VirtualSelector(selectors.BaseSelector):
    def __init__(self, loop: "VirtualClockLoop"):
        self._loop = loop
        self._map: dict = {}

    def register(self, fileobj, events, data=None):
        key = selectors.SelectorKey(fileobj, _fd(fileobj), events, data)
        self._map[fileobj] = key
        return key

    def unregister(self, fileobj):
        return self._map.pop(fileobj)

    def modify(self, fileobj, events, data=None):
        self._map.pop(fileobj, None)
        return self.register(fileobj, events, data)

    def select(self, timeout=None):
        if timeout is None:
            raise Deadlock("virtual loop idle with no scheduled events")
        if timeout > 0:
            loop = self._loop
            # jump exactly onto the next deadline; adding the float timeout can
            # round back to "now" and spin forever
            nxt = loop._scheduled[0]._when if loop._scheduled else loop._now + timeout
            loop._now = max(loop._now + timeout, nxt)
        return []

    def get_map(self):
        return self._map

    def close(self):
        self._map.clear()


def _fd(fileobj) -> int:
    return fileobj if isinstance(fileobj, int) else fileobj.fileno()


class VirtualClockLoop(asyncio.SelectorEventLoop):
    def __init__(self, start: float = 0.0):
        self._now = start
        super().__init__(selector=_VirtualSelector(self))
        # timers within this window of "now" fire together
        self._clock_resolution = 1e-9

    def time(self) -> float:
        return self._now


def run(main, start: float = 0.0):
    """Run coroutine ``main`` to completion on a fresh virtual-time loop."""
    loop = VirtualClockLoop(start)
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(main)
    finally:
        try:
            _cancel_all(loop)
        finally:
            asyncio.set_event_loop(None)
            loop.close()


def _cancel_all(loop: asyncio.AbstractEventLoop) -> None:
    tasks = [t for t in asyncio.all_tasks(loop) if not t.done()]
    if not tasks:
        return
    for t in tasks:
        t.cancel()
    try:
        loop.run_until_complete(asyncio.gather(*tasks, return_exceptions=True))
    except Deadlock:
        pass
