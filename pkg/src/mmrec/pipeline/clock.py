from __future__ import annotations

import threading
import time


class WallClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, dt: float) -> None:
        if dt > 0:
            time.sleep(dt)


class VirtualClock:
    """Thread-safe simulated time; ``sleep`` advances it instead of blocking."""

    def __init__(self, start: float = 0.0):
        self._t = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._t

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError("cannot move a clock backwards")
        with self._lock:
            self._t += dt
            return self._t

    def sleep(self, dt: float) -> None:
        if dt > 0:
            self.advance(dt)
