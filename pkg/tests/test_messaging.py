import random

import numpy as np
import pytest
from scipy import stats

from datashare import crypto, messaging as msg
from datashare.clock import VirtualClock
from datashare.pigeonhole import DAY, ENVELOPE_BYTES, MLEN, LocalTransport, PigeonholeServer
from datashare.wire import Status


def world(seed=0, feed_interval=5.0):
    clock = VirtualClock(10 * DAY)
    server = PigeonholeServer(clock=clock, feed_interval=feed_interval)
    rng = random.Random(seed)

    def node():
        return msg.Mailer(LocalTransport(server), clock, rng)
    return clock, server, rng, node


def test_derive_separates_counters_and_roles():
    shared, pk = b"s" * 32, b"p" * 32
    a0, k0 = msg.derive(shared, pk, 0)
    a1, k1 = msg.derive(shared, pk, 1)
    assert len({a0, k0, a1, k1}) == 4
    assert msg.derive(shared, pk, 0) == (a0, k0)
    assert msg.derive(shared, b"q" * 32, 0)[0] != a0


def test_both_sides_derive_the_same_address():
    rng = random.Random(1)
    s, r = crypto.KeyPair.generate(rng), crypto.KeyPair.generate(rng)
    assert msg.derive(crypto.dh(s.sk, r.pk), s.pk, 3) == msg.derive(crypto.dh(r.sk, s.pk), s.pk, 3)


@pytest.mark.parametrize("payload", [b"", b"hi", b"x" * msg.MAX_PAYLOAD])
def test_envelopes_have_fixed_length(payload):
    key = bytes(32)
    ct = msg.seal(key, msg.KIND_REAL, payload, random.Random(0))
    assert len(ct) == ENVELOPE_BYTES
    assert msg.open_envelope(key, ct) == (msg.KIND_REAL, payload)
    with pytest.raises(crypto.AuthenticationError):
        msg.open_envelope(b"\1" * 32, ct)


def test_oversize_payload():
    with pytest.raises(msg.MessageTooLarge):
        msg.encode_plaintext(msg.KIND_REAL, b"x" * (msg.MAX_PAYLOAD + 1))
    assert len(msg.encode_plaintext(msg.KIND_DUMMY, b"")) == MLEN


def test_bad_plaintext_header():
    with pytest.raises(ValueError):
        msg.decode_plaintext(b"\x07" + bytes(MLEN - 1))
    with pytest.raises(ValueError):
        msg.decode_plaintext(b"\x01\xff\xff" + bytes(MLEN - 3))


def test_cover_key_entry_roundtrip():
    kp = crypto.KeyPair.generate(random.Random(2))
    nym = b"n" * 32
    assert msg.decode_cover_key(msg.encode_cover_key(nym, kp.pk)) == (nym, kp.pk)
    with pytest.raises(ValueError):
        msg.decode_cover_key(b"\x01junk")


def test_send_then_receive_online():
    clock, server, rng, node = world()
    a, b = node(), node()
    ka, kb = crypto.KeyPair.generate(rng), crypto.KeyPair.generate(rng)
    got = []
    b.go_online()
    b.recv_process(kb, ka.pk, got.append, repeat=True)
    for text in (b"one", b"two", b"three"):
        a.send_raw(ka, kb.pk, text)
    clock.run_until(clock.now() + 60)
    assert [d.payload for d in got] == [b"one", b"two", b"three"]
    assert [d.counter for d in got] == [0, 1, 2]
    assert b.channel(kb.pk, ka.pk).n_r == 3 and a.channel(ka.pk, kb.pk).n_s == 3


def test_offline_receiver_catches_up_from_bulk():
    clock, server, rng, node = world()
    a, b = node(), node()
    ka, kb = crypto.KeyPair.generate(rng), crypto.KeyPair.generate(rng)
    got = []
    b.recv_process(kb, ka.pk, got.append)
    a.send_raw(ka, kb.pk, b"while away")
    clock.advance(3600)
    assert got == []
    b.go_online()
    clock.advance(1)
    assert [d.payload for d in got] == [b"while away"]
    assert b.stats["probes"] == 1


def test_receive_times_out_after_retention():
    clock, server, rng, node = world()
    b = node()
    kb, ka = crypto.KeyPair.generate(rng), crypto.KeyPair.generate(rng)
    got = []
    b.go_online()
    b.recv_process(kb, ka.pk, got.append)
    clock.advance(7 * DAY - 1)
    assert got == []
    clock.advance(2)
    assert got == [None]
    assert b.waiting_count() == 0


def test_prefix_false_positive_then_real_delivery():
    clock, server, rng, node = world()
    a, b = node(), node()
    ka, kb = crypto.KeyPair.generate(rng), crypto.KeyPair.generate(rng)
    got = []
    b.go_online()
    rp = b.recv_process(kb, ka.pk, got.append)
    # someone else's envelope whose address shares the 2-byte prefix
    other = rp.addr[:2] + bytes(30)
    assert other != rp.addr
    assert server.ph_put(other, bytes(ENVELOPE_BYTES)) is Status.OK
    clock.advance(1)
    assert got == [] and b.stats["false_probes"] == 1
    a.send_raw(ka, kb.pk, b"real")
    clock.advance(1)
    assert [d.payload for d in got] == [b"real"]


def test_forged_envelope_at_address_is_rejected():
    clock, server, rng, node = world()
    b = node()
    ka, kb = crypto.KeyPair.generate(rng), crypto.KeyPair.generate(rng)
    got = []
    b.go_online()
    rp = b.recv_process(kb, ka.pk, got.append)
    server.ph_put(rp.addr, bytes(ENVELOPE_BYTES))
    clock.advance(1)
    assert got == [] and b.stats["bad_envelopes"] == 1


def test_collision_retry_skips_counter():
    clock, server, rng, node = world()
    a = node()
    ka, kb = crypto.KeyPair.generate(rng), crypto.KeyPair.generate(rng)
    addr0, _ = msg.derive(crypto.dh(ka.sk, kb.pk), ka.pk, 0)
    server.ph_put(addr0, bytes(ENVELOPE_BYTES))
    used = a.send_raw(ka, kb.pk, b"x")
    assert used != addr0 and a.stats["collisions"] == 1
    assert a.channel(ka.pk, kb.pk).n_s == 2


def cover_pair(seed, rate, record=True):
    clock, server, rng, node = world(seed)
    ma, mb = node(), node()
    ka, kb = crypto.KeyPair.generate(rng), crypto.KeyPair.generate(rng)
    directory = lambda: [ka.pk, kb.pk]
    got = []
    ca = msg.CoverProcess(ma, ka, b"A" * 32, directory, rate, rng=random.Random(seed),
                          record_sends=record, broadcast=lambda p: None)
    cb = msg.CoverProcess(mb, kb, b"B" * 32, directory, rate, rng=random.Random(seed + 1),
                          on_real=got.append, broadcast=lambda p: None)
    return clock, ca, cb, ma, mb, got


def test_real_message_replaces_one_dummy():
    rate = 48 / DAY
    runs = []
    for real in (False, True):
        clock, ca, cb, ma, mb, got = cover_pair(5, rate)
        ca.start()
        if real:
            ca.hidden_send(None, cb.kp.pk, b"hello")
        clock.run_until(clock.now() + DAY)
        runs.append(ca)
    plain, with_real = runs
    assert [r.time for r in plain.sends] == [r.time for r in with_real.sends]
    assert with_real.counts["real"] == 1
    assert with_real.counts["dummy"] == plain.counts["dummy"] - 1


def test_cover_channel_delivers_real_message():
    clock, ca, cb, ma, mb, got = cover_pair(3, 48 / DAY)
    for m in (ma, mb):
        m.go_online()
    ca.start()
    cb.start()
    cb.observe_cover_key(b"A" * 32, ca.cover_kp.pk)
    ca.hidden_send(None, cb.kp.pk, b"over cover")
    clock.run_until(clock.now() + DAY)
    assert [d.payload for d in got] == [b"over cover"]


def test_cover_gaps_are_exponential():
    rate = 1.0
    clock, ca, cb, *_ = cover_pair(11, rate)
    ca.start()
    clock.run_until(clock.now() + 10000)
    times = np.array([r.time for r in ca.sends])
    gaps = np.diff(times)
    assert len(gaps) > 9000
    assert abs(gaps.mean() - 1 / rate) / (1 / rate) < 0.05
    assert stats.kstest(gaps, "expon", args=(0, 1 / rate)).pvalue > 0.001


def test_anon_queue_rides_any_stream():
    clock, ca, cb, *_ = cover_pair(4, 48 / DAY)
    ca.start()
    stranger = crypto.KeyPair.generate(random.Random(9))
    ca.hidden_send(stranger, crypto.KeyPair.generate(random.Random(10)).pk, b"to a query key")
    assert len(ca.anon_queue) == 1 and ca.pending() == 1
    clock.run_until(clock.now() + DAY)
    assert ca.pending() == 0 and ca.counts["real"] == 1


def test_queued_while_stopped_waits():
    clock, ca, cb, *_ = cover_pair(6, 48 / DAY)
    ca.start()
    ca.stop()
    ca.hidden_send(None, cb.kp.pk, b"later")
    clock.run_until(clock.now() + DAY)
    assert ca.counts["real"] == 0 and ca.pending() == 1
    ca.start()
    clock.run_until(clock.now() + 2 * DAY)
    assert ca.pending() == 0


def test_latency_quantile():
    rate = 4 / DAY
    assert msg.latency_quantile(rate, 0.95) / 3600 == pytest.approx(17.97, abs=0.01)
