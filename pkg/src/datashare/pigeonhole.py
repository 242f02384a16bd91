"""The communication server: a bulletin board plus one-time mailboxes.

``PigeonholeServer`` is the transport-independent core.  ``serve`` exposes
it over TCP with the framed wire protocol, ``PigeonholeClient`` talks to
that, and ``LocalTransport`` drives the core in-process through the same
frame codec (so byte counts are the real serialized sizes).

The server never sees who is calling: mailbox operations carry only an
address and a ciphertext.
"""
import argparse
import asyncio
import logging
import os
import socket
import sqlite3
import threading
import time
from dataclasses import dataclass

from . import cuckoo
from .crypto import AE_OVERHEAD, DIGEST_SIZE
from .wire import (MAX_FRAME, FrameError, MonitorKind, Op, Status, decode_body,
                   decode_frame, encode_frame, pack_fields, read_frame, read_u64,
                   recv_frame, response, split_response, u64, unpack_fields)

log = logging.getLogger(__name__)

DAY = 86400.0
MLEN = 1024
ENVELOPE_BYTES = MLEN + AE_OVERHEAD
ADDR_SIZE = DIGEST_SIZE
PREFIX_SIZE = 2
MAX_BROADCAST = 4 * 1024 * 1024
READ_BUDGET = 8 * 1024 * 1024
FEED_INTERVAL = 5.0  # seconds of notifications batched into one feed frame


def to_ms(t):
    return int(round(t * 1000))


@dataclass(frozen=True)
class BulletinEntry:
    seq: int
    payload: bytes
    posted_at: float

    def encode(self):
        return pack_fields([u64(self.seq), u64(to_ms(self.posted_at)), self.payload])

    @classmethod
    def decode(cls, data):
        seq, ts, payload = unpack_fields(data, 3)
        return cls(read_u64(seq), payload, read_u64(ts) / 1000)


class PigeonholeServer:
    def __init__(self, clock=time.time, data_dir=None, retention=7 * DAY,
                 bulletin_retention=30 * DAY, envelope_bytes=ENVELOPE_BYTES,
                 max_broadcast=MAX_BROADCAST, record_transcript=False,
                 feed_interval=FEED_INTERVAL):
        self.clock = clock
        self.feed_interval = feed_interval
        self.retention = retention
        self.bulletin_retention = bulletin_retention
        self.envelope_bytes = envelope_bytes
        self.max_broadcast = max_broadcast
        self.transcript = [] if record_transcript else None
        self.expired_bytes = 0  # ciphertext bytes dropped after retention
        self._subs = {}
        self._sub_ids = 0
        self._lock = threading.RLock()
        self._last_prune = None
        if data_dir:
            os.makedirs(data_dir, exist_ok=True)
            path = os.path.join(data_dir, "pigeonhole.sqlite3")
        else:
            path = ":memory:"
        self.db = sqlite3.connect(path, check_same_thread=False, isolation_level=None)
        if data_dir:
            self.db.execute("PRAGMA journal_mode=WAL")
            self.db.execute("PRAGMA synchronous=FULL")
        self.db.executescript("""
            CREATE TABLE IF NOT EXISTS bulletin (
                seq INTEGER PRIMARY KEY AUTOINCREMENT, posted_at REAL NOT NULL, payload BLOB NOT NULL);
            CREATE TABLE IF NOT EXISTS mailbox (
                addr BLOB PRIMARY KEY, posted_at REAL NOT NULL, ct BLOB NOT NULL);
            CREATE INDEX IF NOT EXISTS mailbox_time ON mailbox(posted_at);
            CREATE INDEX IF NOT EXISTS bulletin_time ON bulletin(posted_at);
        """)

    def close(self):
        self.db.close()

    # -- bulletin board --

    def bb_broadcast(self, payload):
        if len(payload) > self.max_broadcast:
            return Status.OVERSIZE, None
        with self._lock:
            self._maybe_prune()
            cur = self.db.execute("INSERT INTO bulletin (posted_at, payload) VALUES (?, ?)",
                                  (self.clock(), bytes(payload)))
            return Status.OK, cur.lastrowid

    def bb_read(self, after_seq=0, budget=None):
        with self._lock:
            self._maybe_prune()
            cutoff = self.clock() - self.bulletin_retention
            rows = self.db.execute(
                "SELECT seq, payload, posted_at FROM bulletin WHERE seq > ? AND posted_at >= ? "
                "ORDER BY seq", (after_seq, cutoff))
            out, size = [], 0
            for seq, payload, ts in rows:
                if budget is not None and out and size + len(payload) > budget:
                    break
                out.append(BulletinEntry(seq, bytes(payload), ts))
                size += len(payload)
            return out

    # -- pigeonhole --

    def ph_put(self, addr, ct):
        if len(addr) != ADDR_SIZE or len(ct) != self.envelope_bytes:
            return Status.BAD_LENGTH
        with self._lock:
            self._maybe_prune()
            now = self.clock()
            row = self.db.execute("SELECT ct, posted_at FROM mailbox WHERE addr = ?",
                                  (bytes(addr),)).fetchone()
            if row is not None:
                if now - row[1] <= self.retention:
                    # identical retry of an acked put is fine
                    return Status.OK if bytes(row[0]) == bytes(ct) else Status.COLLISION
                self.expired_bytes += len(row[0])
                self.db.execute("DELETE FROM mailbox WHERE addr = ?", (bytes(addr),))
            self.db.execute("INSERT INTO mailbox (addr, posted_at, ct) VALUES (?, ?, ?)",
                            (bytes(addr), now, bytes(ct)))
            if self.transcript is not None:
                self.transcript.append(("put", now, bytes(addr), len(ct)))
            subs = list(self._subs.values())
        prefix = bytes(addr[:PREFIX_SIZE])
        for fn in subs:
            fn(prefix)
        return Status.OK

    def ph_get(self, addr):
        with self._lock:
            now = self.clock()
            if self.transcript is not None:
                self.transcript.append(("get", now, bytes(addr), 0))
            row = self.db.execute("SELECT ct, posted_at FROM mailbox WHERE addr = ?",
                                  (bytes(addr),)).fetchone()
            if row is None or now - row[1] > self.retention:
                return None
            return bytes(row[0])

    def addresses_since(self, last_online):
        with self._lock:
            now = self.clock()
            lo = max(last_online, now - self.retention)
            rows = self.db.execute("SELECT addr FROM mailbox WHERE posted_at >= ?", (lo,))
            return [bytes(r[0]) for r in rows]

    def monitor_bulk(self, last_online):
        addrs = self.addresses_since(last_online)
        params = cuckoo.notification_params(max(16, len(addrs)))
        return cuckoo.compress(addrs, params)

    def subscribe(self, fn):
        with self._lock:
            self._sub_ids += 1
            sid = self._sub_ids
            self._subs[sid] = fn

        def cancel():
            with self._lock:
                self._subs.pop(sid, None)
        return cancel

    # -- maintenance and accounting --

    def _maybe_prune(self):
        now = self.clock()
        if self._last_prune is None or now - self._last_prune >= 3600:
            self.prune(now)

    def prune(self, now=None):
        now = self.clock() if now is None else now
        with self._lock:
            self._last_prune = now
            cutoff = now - self.retention
            self.expired_bytes += self.db.execute(
                "SELECT COALESCE(SUM(LENGTH(ct)), 0) FROM mailbox WHERE posted_at < ?",
                (cutoff,)).fetchone()[0]
            self.db.execute("DELETE FROM mailbox WHERE posted_at < ?", (cutoff,))
            self.db.execute("DELETE FROM bulletin WHERE posted_at < ?",
                            (now - self.bulletin_retention,))

    def storage_bytes(self):
        with self._lock:
            m = self.db.execute("SELECT COALESCE(SUM(LENGTH(ct)) + COUNT(*) * ?, 0) FROM mailbox",
                                (ADDR_SIZE,)).fetchone()[0]
            b = self.db.execute("SELECT COALESCE(SUM(LENGTH(payload)), 0) FROM bulletin").fetchone()[0]
            return int(m), int(b)

    def mailbox_count(self):
        with self._lock:
            return self.db.execute("SELECT COUNT(*) FROM mailbox").fetchone()[0]

    # -- wire dispatch --

    def handle(self, body):
        """Answer one request frame body (monitor handled by the caller)."""
        try:
            op, fields = decode_body(body)
            op = Op(op)
        except (FrameError, ValueError):
            return response(0, Status.MALFORMED)
        try:
            if op is Op.BB_BROADCAST:
                (payload,) = _expect(fields, 1)
                st, seq = self.bb_broadcast(payload)
                return response(op, st, [u64(seq)] if seq is not None else [])
            if op is Op.BB_READ:
                (after,) = _expect(fields, 1)
                entries = self.bb_read(read_u64(after), budget=READ_BUDGET)
                return response(op, Status.OK, [e.encode() for e in entries])
            if op is Op.PH_PUT:
                addr, ct = _expect(fields, 2)
                return response(op, self.ph_put(addr, ct))
            if op is Op.PH_GET:
                (addr,) = _expect(fields, 1)
                ct = self.ph_get(addr)
                if ct is None:
                    return response(op, Status.NOT_FOUND)
                return response(op, Status.OK, [ct])
            if op is Op.MONITOR:
                (since,) = _expect(fields, 1)
                return self.monitor_bulk_frame(read_u64(since) / 1000)
        except FrameError:
            return response(op, Status.MALFORMED)
        return response(op, Status.MALFORMED)

    def monitor_bulk_frame(self, last_online):
        now = self.clock()
        cf = self.monitor_bulk(last_online)
        return response(Op.MONITOR, Status.OK,
                        [bytes([MonitorKind.BULK]), cf.to_bytes(), u64(to_ms(now))])


def _expect(fields, n):
    if len(fields) != n:
        raise FrameError(f"expected {n} fields")
    return fields


def feed_frame(prefixes):
    return response(Op.MONITOR, Status.OK, [bytes([MonitorKind.FEED]), b"".join(prefixes)])


FEED_OVERHEAD = len(feed_frame([]))


def parse_monitor_frame(frame_op, fields):
    st, rest = split_response(Op.MONITOR, frame_op, fields)
    if st is not Status.OK or not rest:
        raise FrameError(f"monitor failed: {st.name}")
    kind = MonitorKind(rest[0][0])
    if kind is MonitorKind.BULK:
        return kind, (cuckoo.CuckooFilter.from_bytes(rest[1]), read_u64(rest[2]) / 1000)
    blob = rest[1]
    return kind, [blob[k:k + PREFIX_SIZE] for k in range(0, len(blob), PREFIX_SIZE)]


# -- client side -------------------------------------------------------------

class _ClientOps:
    """Request/response helpers shared by the local and TCP transports."""

    sent = 0
    received = 0

    def _call(self, op, fields):
        raise NotImplementedError

    def bb_broadcast(self, payload):
        st, rest = self._call(Op.BB_BROADCAST, [payload])
        if st is not Status.OK:
            raise ValueError(f"broadcast rejected: {st.name}")
        return read_u64(rest[0])

    def bb_read(self, after_seq=0):
        out = []
        while True:
            st, rest = self._call(Op.BB_READ, [u64(after_seq)])
            if st is not Status.OK:
                raise ValueError(f"read failed: {st.name}")
            if not rest:
                return out
            batch = [BulletinEntry.decode(r) for r in rest]
            out.extend(batch)
            after_seq = batch[-1].seq

    def ph_put(self, addr, ct):
        st, _ = self._call(Op.PH_PUT, [addr, ct])
        return st

    def ph_get(self, addr):
        st, rest = self._call(Op.PH_GET, [addr])
        return rest[0] if st is Status.OK else None


class LocalTransport(_ClientOps):
    """In-process client of a PigeonholeServer using real frames.

    ``sent`` / ``received`` count frame bytes in each direction.  Feed
    notifications are delivered one by one but accounted as the TCP server
    sends them: one frame per ``feed_interval`` window that saw any puts.
    """

    def __init__(self, server):
        self.server = server
        self.sent = 0
        self.received = 0
        self.requests = 0
        self.notified = 0
        self._feed_window = None

    def _call(self, op, fields):
        frame = encode_frame(op, fields)
        self.sent += len(frame)
        self.requests += 1
        resp = self.server.handle(frame[4:])
        self.received += len(resp)
        fop, rfields = decode_frame(resp)
        return split_response(op, fop, rfields)

    def monitor(self, last_online, on_prefixes):
        """Returns (bulk filter, server time, cancel).  Feed arrives via callback."""
        frame = encode_frame(Op.MONITOR, [u64(to_ms(last_online))])
        self.sent += len(frame)

        def on_put(prefix):
            self.notified += 1
            self.received += len(prefix)
            w = int(self.server.clock() // self.server.feed_interval) \
                if self.server.feed_interval > 0 else None
            if w is None or w != self._feed_window:
                self._feed_window = w
                self.received += FEED_OVERHEAD
            on_prefixes([prefix])
        cancel = self.server.subscribe(on_put)
        resp = self.server.handle(frame[4:])
        self.received += len(resp)
        _, (cf, now) = parse_monitor_frame(*decode_frame(resp))
        return cf, now, cancel


class PigeonholeClient(_ClientOps):
    """Blocking TCP client.  One request at a time per instance."""

    def __init__(self, host, port, timeout=30.0):
        self.addr = (host, port)
        self.timeout = timeout
        self.sock = None
        self.sent = 0
        self.received = 0
        self._lock = threading.Lock()

    def _connect(self):
        if self.sock is None:
            self.sock = socket.create_connection(self.addr, timeout=self.timeout)
        return self.sock

    def close(self):
        if self.sock is not None:
            self.sock.close()
            self.sock = None

    def _call(self, op, fields):
        frame = encode_frame(op, fields)
        with self._lock:
            try:
                s = self._connect()
                s.sendall(frame)
                body = recv_frame(s)
            except (OSError, ConnectionError):
                self.close()
                raise
        self.sent += len(frame)
        self.received += len(body) + 4
        fop, rfields = decode_body(body)
        return split_response(op, fop, rfields)

    def monitor(self, last_online, on_prefixes):
        """Open a dedicated monitor connection; feed runs on a reader thread."""
        s = socket.create_connection(self.addr, timeout=self.timeout)
        s.sendall(encode_frame(Op.MONITOR, [u64(to_ms(last_online))]))
        _, (cf, now) = parse_monitor_frame(*decode_body(recv_frame(s)))
        s.settimeout(None)
        stop = threading.Event()

        def reader():
            while not stop.is_set():
                try:
                    kind, prefixes = parse_monitor_frame(*decode_body(recv_frame(s)))
                except (OSError, ConnectionError, FrameError):
                    return
                if kind is MonitorKind.FEED and prefixes:
                    on_prefixes(prefixes)
        threading.Thread(target=reader, name="monitor", daemon=True).start()

        def cancel():
            stop.set()
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        return cf, now, cancel


# -- TCP server --------------------------------------------------------------

async def _serve_conn(core, reader, writer):
    try:
        while True:
            try:
                body = await read_frame(reader, MAX_FRAME)
            except FrameError:
                writer.write(response(0, Status.MALFORMED))
                break
            if body is None:
                break
            if body and body[0] == Op.MONITOR:
                await _monitor_stream(core, body, writer)
                break
            writer.write(core.handle(body))
            await writer.drain()
    except (ConnectionError, asyncio.IncompleteReadError):
        pass
    finally:
        writer.close()


async def _monitor_stream(core, body, writer):
    loop = asyncio.get_running_loop()
    queue = asyncio.Queue()
    cancel = core.subscribe(lambda p: loop.call_soon_threadsafe(queue.put_nowait, p))
    try:
        writer.write(core.handle(body))
        await writer.drain()
        while True:
            batch = [await queue.get()]
            if core.feed_interval > 0:
                await asyncio.sleep(core.feed_interval)
            while not queue.empty() and len(batch) < 65536:
                batch.append(queue.get_nowait())
            writer.write(feed_frame(batch))
            await writer.drain()
    finally:
        cancel()


async def serve(core, host="127.0.0.1", port=0):
    """Start serving; returns the asyncio Server (use ``.sockets`` for the port)."""
    return await asyncio.start_server(lambda r, w: _serve_conn(core, r, w), host, port)


class ServerThread:
    """Run the TCP server on a background event loop (tests, local demos)."""

    def __init__(self, core, host="127.0.0.1", port=0):
        self.core = core
        self.loop = asyncio.new_event_loop()
        self._ready = threading.Event()
        self._host, self._port = host, port
        self.thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        asyncio.set_event_loop(self.loop)
        self.server = self.loop.run_until_complete(serve(self.core, self._host, self._port))
        self.port = self.server.sockets[0].getsockname()[1]
        self._ready.set()
        self.loop.run_forever()
        # let cancelled connection handlers finish before the loop goes away
        tasks = asyncio.all_tasks(self.loop)
        for task in tasks:
            task.cancel()
        self.loop.run_until_complete(asyncio.gather(*tasks, return_exceptions=True))
        self.loop.close()

    def start(self):
        self.thread.start()
        self._ready.wait()
        return self

    def stop(self):
        def _close():
            self.server.close()
            self.loop.stop()
        self.loop.call_soon_threadsafe(_close)
        self.thread.join(timeout=5)


def parse_endpoint(s):
    host, _, port = s.rpartition(":")
    return host or "127.0.0.1", int(port)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="datashare-server", description="Run the communication server.")
    ap.add_argument("--listen", default="127.0.0.1:7400", help="host:port")
    ap.add_argument("--data-dir", default=None, help="sqlite storage directory (default: in memory)")
    ap.add_argument("--retention-days", type=float, default=7.0)
    ap.add_argument("--bulletin-retention-days", type=float, default=30.0)
    ap.add_argument("--max-envelope-bytes", type=int, default=ENVELOPE_BYTES,
                    help="fixed ciphertext length every put must have")
    ap.add_argument("--feed-interval", type=float, default=FEED_INTERVAL,
                    help="seconds of notifications batched per feed frame")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    core = PigeonholeServer(data_dir=args.data_dir, retention=args.retention_days * DAY,
                            bulletin_retention=args.bulletin_retention_days * DAY,
                            envelope_bytes=args.max_envelope_bytes,
                            feed_interval=args.feed_interval)
    host, port = parse_endpoint(args.listen)

    async def run():
        srv = await serve(core, host, port)
        log.info("listening on %s", ", ".join(str(s.getsockname()) for s in srv.sockets))
        async with srv:
            await srv.serve_forever()
    try:
        asyncio.run(run())
    except KeyboardInterrupt:
        pass


if __name__ == "__main__":
    main()
