"""Schedulers: a virtual clock for simulation and a threaded real-time one.

Both expose ``now()``, ``call_at(t, fn, *args)``, ``call_later(dt, fn, *args)``
and ``call_soon(fn, *args)``; each returns a handle with ``cancel()``.
Timers are absolute deadlines, so a slow callback never shifts later ones.
"""
import heapq
import itertools
import threading
import time


class Timer:
    __slots__ = ("when", "fn", "args", "cancelled")

    def __init__(self, when, fn, args):
        self.when = when
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class VirtualClock:
    """Single-threaded discrete-event scheduler.

    Events at equal times run in scheduling order, so a run is a pure
    function of the callbacks and their seeded randomness.
    """

    def __init__(self, start=0.0):
        self._now = float(start)
        self._queue = []
        self._seq = itertools.count()
        self.events_run = 0

    def now(self):
        return self._now

    __call__ = now

    def call_at(self, when, fn, *args):
        t = Timer(max(float(when), self._now), fn, args)
        heapq.heappush(self._queue, (t.when, next(self._seq), t))
        return t

    def call_later(self, delay, fn, *args):
        return self.call_at(self._now + delay, fn, *args)

    def call_soon(self, fn, *args):
        return self.call_at(self._now, fn, *args)

    def pending(self):
        return sum(1 for _, _, t in self._queue if not t.cancelled)

    def step(self):
        while self._queue:
            when, _, t = heapq.heappop(self._queue)
            if t.cancelled:
                continue
            self._now = when
            self.events_run += 1
            t.fn(*t.args)
            return True
        return False

    def run_until(self, until):
        q = self._queue
        while q:
            if q[0][2].cancelled:
                heapq.heappop(q)  # else step() would skip past ``until``
                continue
            if q[0][0] > until:
                break
            self.step()
        self._now = max(self._now, float(until))

    def run(self, max_events=None):
        n = 0
        while self.step():
            n += 1
            if max_events is not None and n >= max_events:
                break

    def advance(self, dt):
        self.run_until(self._now + dt)


class RealtimeScheduler:
    """Runs callbacks on one worker thread at wall-clock deadlines.

    All state changes made from callbacks are therefore serialized, which is
    how the node daemon keeps its identity state single-writer.
    """

    def __init__(self, clock=time.time):
        self.clock = clock
        self._queue = []
        self._seq = itertools.count()
        self._cv = threading.Condition()
        self._stopped = False
        self._thread = None
        self.errors = []

    def now(self):
        return self.clock()

    __call__ = now

    def call_at(self, when, fn, *args):
        t = Timer(when, fn, args)
        with self._cv:
            heapq.heappush(self._queue, (when, next(self._seq), t))
            self._cv.notify()
        return t

    def call_later(self, delay, fn, *args):
        return self.call_at(self.clock() + delay, fn, *args)

    def call_soon(self, fn, *args):
        return self.call_at(self.clock(), fn, *args)

    def start(self):
        self._thread = threading.Thread(target=self._loop, name="scheduler", daemon=True)
        self._thread.start()
        return self

    def stop(self, wait=True):
        with self._cv:
            self._stopped = True
            self._cv.notify()
        if wait and self._thread:
            self._thread.join()

    def _loop(self):
        while True:
            with self._cv:
                while not self._stopped:
                    if self._queue:
                        delay = self._queue[0][0] - self.clock()
                        if delay <= 0:
                            break
                        self._cv.wait(min(delay, 1.0))
                    else:
                        self._cv.wait()
                if self._stopped:
                    return
                _, _, t = heapq.heappop(self._queue)
            if t.cancelled:
                continue
            try:
                t.fn(*t.args)
            except Exception as e:  # keep the daemon alive; surface later
                self.errors.append(e)
