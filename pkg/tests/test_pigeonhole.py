import os
import threading
import time

import pytest

from datashare import pigeonhole as ph
from datashare.pigeonhole import (DAY, ENVELOPE_BYTES, LocalTransport, PigeonholeClient,
                                  PigeonholeServer, ServerThread)
from datashare.wire import Op, Status, decode_frame, encode_frame, split_response


def addr(i, head=b""):
    return (head + i.to_bytes(4, "big")).ljust(32, b"\x11")


def ct(i=0):
    return bytes([i % 256]) * ENVELOPE_BYTES


@pytest.fixture
def server(fake_clock):
    s = PigeonholeServer(clock=fake_clock)
    yield s
    s.close()


def test_broadcast_read_order(server):
    seqs = [server.bb_broadcast(b"p%d" % i)[1] for i in range(5)]
    assert seqs == sorted(seqs)
    got = server.bb_read(0)
    assert [e.payload for e in got] == [b"p%d" % i for i in range(5)]
    assert [e.payload for e in server.bb_read(seqs[2])] == [b"p3", b"p4"]


def test_concurrent_broadcasts_get_unique_seqs(server):
    out = []
    lock = threading.Lock()

    def post(i):
        st, seq = server.bb_broadcast(b"x%d" % i)
        with lock:
            out.append(seq)
    threads = [threading.Thread(target=post, args=(i,)) for i in range(100)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(out)) == 100
    assert len(server.bb_read(0)) == 100


def test_oversize_broadcast(fake_clock):
    s = PigeonholeServer(clock=fake_clock, max_broadcast=10)
    assert s.bb_broadcast(b"x" * 11) == (Status.OVERSIZE, None)
    assert s.bb_broadcast(b"x" * 10)[0] is Status.OK


def test_bulletin_retention(server, fake_clock):
    server.bb_broadcast(b"old")
    fake_clock.t += 29 * DAY
    server.bb_broadcast(b"new")
    assert [e.payload for e in server.bb_read(0)] == [b"old", b"new"]
    fake_clock.t += 2 * DAY
    assert [e.payload for e in server.bb_read(0)] == [b"new"]


def test_put_get(server):
    a = addr(1)
    assert server.ph_get(a) is None
    assert server.ph_put(a, ct(1)) is Status.OK
    assert server.ph_get(a) == ct(1)
    # an identical retry is acknowledged, a different ciphertext is not
    assert server.ph_put(a, ct(1)) is Status.OK
    assert server.ph_put(a, ct(2)) is Status.COLLISION
    assert server.ph_get(a) == ct(1)


def test_put_lengths(server):
    assert server.ph_put(addr(1), ct()[:-1]) is Status.BAD_LENGTH
    assert server.ph_put(addr(1)[:31], ct()) is Status.BAD_LENGTH
    assert server.ph_put(addr(1), ct() + b"\0") is Status.BAD_LENGTH


def test_expiry(server, fake_clock):
    a = addr(7)
    server.ph_put(a, ct(3))
    fake_clock.t += 7 * DAY - 1
    assert server.ph_get(a) == ct(3)
    fake_clock.t += 2
    assert server.ph_get(a) is None
    # the address may be reused once expired
    assert server.ph_put(a, ct(4)) is Status.OK
    assert server.expired_bytes == ENVELOPE_BYTES


def test_prune_counts_expired(server, fake_clock):
    for i in range(5):
        server.ph_put(addr(i), ct(i))
    fake_clock.t += 8 * DAY
    server.prune()
    assert server.mailbox_count() == 0
    assert server.expired_bytes == 5 * ENVELOPE_BYTES


def test_storage_bytes(server):
    for i in range(3):
        server.ph_put(addr(i), ct(i))
    server.bb_broadcast(b"abc")
    assert server.storage_bytes() == (3 * (ENVELOPE_BYTES + 32), 3)


def test_monitor_bulk(server, fake_clock):
    early = [addr(i) for i in range(20)]
    for a in early:
        server.ph_put(a, ct())
    t0 = fake_clock.t
    fake_clock.t += 100
    late = [addr(i + 100) for i in range(20)]
    for a in late:
        server.ph_put(a, ct())
    cf = server.monitor_bulk(t0 + 50)
    assert all(a in cf for a in late)
    # only what arrived since last_online, up to false positives
    assert sum(a in cf for a in early) <= 2


def test_feed_and_prefix_collision(server):
    got = []
    cancel = server.subscribe(got.append)
    a1 = b"\xab\xcd" + b"\x01" * 30
    a2 = b"\xab\xcd" + b"\x02" * 30
    server.ph_put(a1, ct())
    server.ph_put(a2, ct())
    assert got == [b"\xab\xcd", b"\xab\xcd"]
    # both receivers waiting on that prefix wake and check their own address
    assert server.ph_get(a1) == ct() and server.ph_get(a2) == ct()
    cancel()
    server.ph_put(addr(9), ct())
    assert len(got) == 2


def test_handle_malformed(server):
    for bad in (b"", b"\x7f", b"\x03\x00\x00\x00\x10ab", encode_frame(Op.PH_GET, [])[4:]):
        op, fields = decode_frame(server.handle(bad))
        assert fields[0] == bytes([Status.MALFORMED])


def test_handle_frames(server):
    body = encode_frame(Op.PH_PUT, [addr(1), ct()])[4:]
    op, fields = decode_frame(server.handle(body))
    assert split_response(Op.PH_PUT, op, fields) == (Status.OK, [])
    resp = server.handle(encode_frame(Op.PH_GET, [addr(1)])[4:])
    assert len(resp) == ph.ENVELOPE_BYTES + 14  # len, op, status field, ct field length


def test_local_transport_accounting(server):
    tr = LocalTransport(server)
    tr.ph_put(addr(1), ct())
    assert tr.sent == 1097 and tr.received == 10
    assert tr.ph_get(addr(1)) == ct()
    assert tr.ph_get(addr(2)) is None
    assert tr.received == 10 + 1066 + 10
    assert tr.bb_broadcast(b"x" * 32) == 1
    assert [e.payload for e in tr.bb_read()] == [b"x" * 32]


def test_local_feed_windows(server, fake_clock):
    tr = LocalTransport(server)
    seen = []
    cf, now, cancel = tr.monitor(fake_clock.t - 10, seen.extend)
    base = tr.received
    tr.ph_put(addr(1), ct())
    tr.ph_put(addr(2), ct())
    after_two = tr.received
    fake_clock.t += 10
    tr.ph_put(addr(3), ct())
    # one frame overhead per feed window plus 2 bytes per prefix
    assert after_two - base == 2 * 10 + ph.FEED_OVERHEAD + 4
    assert tr.received - after_two == 10 + ph.FEED_OVERHEAD + 2
    assert len(seen) == 3
    cancel()


def test_persistence(tmp_path, fake_clock):
    s = PigeonholeServer(clock=fake_clock, data_dir=str(tmp_path))
    s.ph_put(addr(1), ct(5))
    s.bb_broadcast(b"kept")
    s.close()
    s = PigeonholeServer(clock=fake_clock, data_dir=str(tmp_path))
    assert s.ph_get(addr(1)) == ct(5)
    assert [e.payload for e in s.bb_read(0)] == [b"kept"]
    s.close()
    assert os.path.exists(tmp_path / "pigeonhole.sqlite3")


def test_tcp_roundtrip():
    core = PigeonholeServer(feed_interval=0.05)
    srv = ServerThread(core).start()
    try:
        c = PigeonholeClient("127.0.0.1", srv.port, timeout=5)
        seen = []
        got = threading.Event()

        def on_prefixes(ps):
            seen.extend(ps)
            if len(seen) >= 3:
                got.set()
        cf, now, cancel = c.monitor(time.time() - 1, on_prefixes)
        assert abs(now - time.time()) < 5
        assert c.bb_broadcast(b"params") == 1
        assert c.bb_read(0)[0].payload == b"params"
        for i in range(3):
            assert c.ph_put(addr(i), ct(i)) is Status.OK
        assert c.ph_put(addr(0), ct(9)) is Status.COLLISION
        assert c.ph_get(addr(1)) == ct(1)
        assert c.ph_get(addr(50)) is None
        assert got.wait(5)
        assert sorted(seen) == sorted(addr(i)[:2] for i in range(3))
        cancel()
        c.close()
        # a reconnecting client sees the earlier puts in its bulk filter
        c2 = PigeonholeClient("127.0.0.1", srv.port, timeout=5)
        cf, _, cancel2 = c2.monitor(time.time() - 60, lambda ps: None)
        assert all(addr(i) in cf for i in range(3))
        cancel2()
        c2.close()
    finally:
        srv.stop()
        core.close()


def test_tcp_many_reads():
    core = PigeonholeServer(feed_interval=0)
    srv = ServerThread(core).start()
    try:
        c = PigeonholeClient("127.0.0.1", srv.port, timeout=5)
        for i in range(50):
            c.bb_broadcast(os.urandom(200))
        assert [e.seq for e in c.bb_read(0)] == list(range(1, 51))
        c.close()
    finally:
        srv.stop()
        core.close()


def test_cli_rejects_bad_args():
    with pytest.raises(SystemExit):
        ph.main(["--listen"])
    assert ph.parse_endpoint("10.0.0.1:99") == ("10.0.0.1", 99)
    assert ph.parse_endpoint(":7400") == ("127.0.0.1", 7400)
