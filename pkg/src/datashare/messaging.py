"""Client side of the pigeonhole: addressing, envelopes, receiving, cover traffic.

Sender and receiver derive the same one-time mailbox address and key from
their Diffie-Hellman secret, the sender's public key and a per-channel
counter.  Every envelope is an AE ciphertext over exactly ``MLEN`` bytes of
plaintext whose first byte says whether it is real or a dummy.

``Mailer`` owns the counters and the waiting receive processes of one node.
``CoverProcess`` sends a message to every recipient at Poisson firing times,
substituting queued real messages for dummies, and listens for the cover
messages of others.  Both run on a scheduler from :mod:`datashare.clock`.
"""
import logging
import math
import struct
from collections import deque
from dataclasses import dataclass

from . import crypto
from .pigeonhole import MLEN, PREFIX_SIZE
from .wire import Status, pack_fields, unpack_fields

log = logging.getLogger(__name__)

DAY = 86400.0
KIND_DUMMY = 0
KIND_REAL = 1
_PT_HEADER = struct.Struct(">BH")
MAX_PAYLOAD = MLEN - _PT_HEADER.size
RECV_TIMEOUT = 7 * DAY

BB_COVER_KEY = 0x03


class MessageTooLarge(ValueError):
    pass


def derive(shared, pk_sender, n):
    """(addr, key) for message number ``n`` from ``pk_sender`` on this secret."""
    parts = [shared, pk_sender, n.to_bytes(8, "big")]
    return crypto.hash_bytes(b"addr", parts), crypto.hash_bytes(b"key", parts)


def encode_plaintext(kind, payload):
    if len(payload) > MAX_PAYLOAD:
        raise MessageTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    body = _PT_HEADER.pack(kind, len(payload)) + payload
    return body + b"\x00" * (MLEN - len(body))


def decode_plaintext(pt):
    if len(pt) != MLEN:
        raise ValueError("plaintext has wrong length")
    kind, n = _PT_HEADER.unpack_from(pt)
    if kind not in (KIND_DUMMY, KIND_REAL) or n > MAX_PAYLOAD:
        raise ValueError("bad plaintext header")
    return kind, pt[_PT_HEADER.size:_PT_HEADER.size + n]


def seal(key, kind, payload, rng=None):
    return crypto.ae_encrypt(key, encode_plaintext(kind, payload), rng)


def open_envelope(key, ct):
    return decode_plaintext(crypto.ae_decrypt(key, ct))


def encode_cover_key(nym, pk_c):
    return bytes([BB_COVER_KEY]) + pack_fields([nym, pk_c])


def decode_cover_key(payload):
    if not payload or payload[0] != BB_COVER_KEY:
        raise ValueError("not a cover key entry")
    nym, pk = unpack_fields(payload[1:], 2)
    return nym, crypto.decode_element(pk)


@dataclass
class ChannelState:
    n_s: int = 0
    n_r: int = 0


@dataclass
class Delivery:
    pk_sender: bytes
    kind: int
    payload: bytes
    counter: int
    time: float


class RecvProcess:
    """One waiting receive on (sk_R, pk_S).  Re-arms itself if ``repeat``."""

    def __init__(self, mailer, kp, pk_sender, callback, repeat, timeout):
        self.mailer = mailer
        self.kp = kp
        self.pk_sender = pk_sender
        self.callback = callback
        self.repeat = repeat
        self.timeout = timeout
        self.shared = crypto.dh(kp.sk, pk_sender)
        self.addr = self.key = None
        self.active = False
        self._timer = None
        self.delivered = 0

    @property
    def channel(self):
        return self.mailer.channel(self.kp.pk, self.pk_sender)

    def arm(self):
        self.addr, self.key = derive(self.shared, self.pk_sender, self.channel.n_r)
        self.active = True
        self.mailer._index(self)
        if self._timer:
            self._timer.cancel()
        if self.timeout is not None:
            self._timer = self.mailer.scheduler.call_later(self.timeout, self._expire)
        if self.mailer.maybe_posted(self.addr):
            self.mailer.scheduler.call_soon(self.probe)

    def _expire(self):
        if self.active:
            self.cancel()
            self.callback(None)

    def cancel(self):
        self.active = False
        if self._timer:
            self._timer.cancel()
        self.mailer._unindex(self)

    def probe(self):
        if not self.active or not self.mailer.online:
            return False
        ct = self.mailer.transport.ph_get(self.addr)
        self.mailer.stats["probes"] += 1
        if ct is None:
            self.mailer.stats["false_probes"] += 1
            return False
        try:
            kind, payload = open_envelope(self.key, ct)
        except (crypto.AuthenticationError, crypto.MalformedCiphertext, ValueError):
            self.mailer.stats["bad_envelopes"] += 1
            return False
        ch = self.channel
        n = ch.n_r
        ch.n_r += 1
        self.delivered += 1
        self.mailer._unindex(self)
        self.active = False
        if self._timer:
            self._timer.cancel()
        if self.repeat:
            self.arm()
        self.callback(Delivery(self.pk_sender, kind, payload, n, self.mailer.scheduler.now()))
        return True


class Mailer:
    """Counters, receive processes and the monitor subscription of one node."""

    def __init__(self, transport, scheduler, rng=None, recv_timeout=RECV_TIMEOUT):
        self.transport = transport
        self.scheduler = scheduler
        self.rng = crypto.default_rng(rng)
        self.recv_timeout = recv_timeout
        self.channels = {}
        self.online = False
        self.last_online = 0.0
        self._waiting = {}
        self._recent = {}
        self._bulk = None
        self._cancel_monitor = None
        self.stats = {"puts": 0, "probes": 0, "false_probes": 0, "bad_envelopes": 0,
                      "collisions": 0, "notifications": 0}

    def channel(self, my_pk, their_pk):
        key = (my_pk, their_pk)
        ch = self.channels.get(key)
        if ch is None:
            ch = self.channels[key] = ChannelState()
        return ch

    # -- sending --

    def send_raw(self, kp, pk_R, payload, kind=KIND_REAL):
        """Post one envelope from ``kp`` to ``pk_R``.  Returns the address used."""
        if len(payload) > MAX_PAYLOAD:
            raise MessageTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
        shared = crypto.dh(kp.sk, pk_R)
        ch = self.channel(kp.pk, pk_R)
        for attempt in range(2):
            addr, key = derive(shared, kp.pk, ch.n_s)
            ct = seal(key, kind, payload, self.rng)
            st = self.transport.ph_put(addr, ct)
            if st is Status.OK:
                ch.n_s += 1
                self.stats["puts"] += 1
                return addr
            if st is Status.COLLISION and attempt == 0:
                self.stats["collisions"] += 1
                ch.n_s += 1
                continue
            raise RuntimeError(f"put rejected: {st.name}")
        raise RuntimeError("put rejected after collision retry")

    # -- receiving --

    def recv_process(self, kp, pk_S, callback, repeat=False, timeout="default"):
        """Wait for the next message from ``pk_S`` to ``kp``.

        ``callback(delivery)`` runs on success and ``callback(None)`` on
        timeout.  With ``repeat`` the process re-arms after every message.
        """
        if timeout == "default":
            timeout = self.recv_timeout
        rp = RecvProcess(self, kp, pk_S, callback, repeat, timeout)
        rp.arm()
        return rp

    def _index(self, rp):
        # dict keeps insertion order so probe order is reproducible
        self._waiting.setdefault(rp.addr[:PREFIX_SIZE], {})[rp] = None

    def _unindex(self, rp):
        if rp.addr is None:
            return
        s = self._waiting.get(rp.addr[:PREFIX_SIZE])
        if s is not None:
            s.pop(rp, None)
            if not s:
                del self._waiting[rp.addr[:PREFIX_SIZE]]

    def maybe_posted(self, addr):
        """Could ``addr`` already hold a message we were notified about?"""
        if not self.online:
            return False
        if addr[:PREFIX_SIZE] in self._recent:
            return True
        return self._bulk is not None and addr in self._bulk

    def waiting_count(self):
        return sum(len(s) for s in self._waiting.values())

    # -- monitoring --

    def go_online(self):
        if self.online:
            return
        self.online = True
        bulk, _, cancel = self.transport.monitor(self.last_online, self._on_prefixes)
        self._bulk = bulk
        self._cancel_monitor = cancel
        for s in list(self._waiting.values()):
            for rp in list(s):
                if rp.addr in bulk:
                    self.scheduler.call_soon(rp.probe)

    def go_offline(self):
        if not self.online:
            return
        self.online = False
        self.last_online = self.scheduler.now()
        if self._cancel_monitor:
            self._cancel_monitor()
        self._cancel_monitor = None
        self._bulk = None
        self._recent.clear()

    def _on_prefixes(self, prefixes):
        self.scheduler.call_soon(self._dispatch, list(prefixes))

    def _dispatch(self, prefixes):
        if not self.online:
            return
        now = self.scheduler.now()
        for p in prefixes:
            self.stats["notifications"] += 1
            self._recent[p] = now
            for rp in list(self._waiting.get(p, ())):
                rp.probe()
        if len(self._recent) > 50000:
            cutoff = now - self.recv_timeout
            self._recent = {k: t for k, t in self._recent.items() if t >= cutoff}


def exp_delay(rng, rate):
    """Exponential delay with mean 1/rate; ``rng`` is a random.Random."""
    return rng.expovariate(rate)


@dataclass
class QueuedMessage:
    kp: object  # KeyPair to send under, or None for the current cover key
    pk_R: bytes
    payload: bytes
    enqueued_at: float
    tag: object = None


@dataclass
class SendRecord:
    time: float
    recipient: bytes
    kind: int
    latency: float = None
    tag: object = None


class CoverProcess:
    """Poisson cover traffic to every recipient in a directory.

    ``rate`` is the per-recipient send rate in messages per second; cover
    keys refresh at ``key_rate`` (default rate / 4).  ``directory`` returns
    the current recipient public keys.  Real messages received on cover
    channels go to ``on_real(delivery)``.
    """

    def __init__(self, mailer, kp, nym, directory, rate, key_rate=None, rng=None,
                 on_real=None, broadcast=None, record_sends=False):
        self.mailer = mailer
        self.kp = kp  # medium-term key; cover messages to us are received with it
        self.nym = nym
        self.directory = directory
        self.rate = rate
        self.key_rate = rate / 4 if key_rate is None else key_rate
        self.rng = rng
        self.on_real = on_real
        self.broadcast = broadcast or (lambda payload: mailer.transport.bb_broadcast(payload))
        self.queues = {}
        self.anon_queue = deque()
        self.cover_kp = None
        self.running = False
        self._timers = {}
        self._key_timer = None
        self._listeners = {}  # pk_c -> RecvProcess
        self._latest_key = {}  # nym -> (pk_c, time)
        self._expiry = {}
        self.sends = [] if record_sends else None
        self.latencies = []
        self.counts = {"real": 0, "dummy": 0, "cover_keys": 0}

    @property
    def scheduler(self):
        return self.mailer.scheduler

    # -- queueing --

    def hidden_send(self, kp, pk_R, payload, tag=None):
        if len(payload) > MAX_PAYLOAD:
            raise MessageTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
        msg = QueuedMessage(kp, pk_R, payload, self.scheduler.now(), tag)
        if pk_R in self._timers or pk_R in set(self.directory()):
            self.queues.setdefault(pk_R, deque()).append(msg)
        else:
            # recipient has no cover stream of its own (e.g. a query key):
            # the next firing of any stream carries it
            self.anon_queue.append(msg)

    def pending(self):
        return sum(len(q) for q in self.queues.values()) + len(self.anon_queue)

    # -- lifecycle --

    def start(self):
        if self.running:
            return
        self.running = True
        self._new_cover_key()
        self.update_directory()

    def stop(self):
        self.running = False
        for t in self._timers.values():
            t.cancel()
        self._timers.clear()
        if self._key_timer:
            self._key_timer.cancel()
        for rp in self._listeners.values():
            rp.cancel()
        self._listeners.clear()
        for t in self._expiry.values():
            t.cancel()
        self._expiry.clear()

    def update_directory(self):
        if not self.running:
            return
        current = set(self.directory())
        current.discard(self.kp.pk)
        for pk in list(self._timers):
            if pk not in current:
                self._timers.pop(pk).cancel()
        for pk in sorted(current):
            if pk not in self._timers:
                self._schedule(pk)

    def set_key(self, kp):
        """Switch the medium-term key we receive cover messages on."""
        old = self.kp
        self.kp = kp
        if self.running and old.pk != kp.pk:
            for pk_c, rp in list(self._listeners.items()):
                rp.cancel()
                self._listeners[pk_c] = self.mailer.recv_process(
                    kp, pk_c, self._on_cover_delivery, repeat=True)

    # -- sending --

    def _schedule(self, pk):
        delay = exp_delay(self.rng, self.rate)
        self._timers[pk] = self.scheduler.call_later(delay, self._fire, pk)

    def _fire(self, pk):
        if not self.running:
            return
        now = self.scheduler.now()
        q = self.queues.get(pk)
        if q:
            msg = q.popleft()
        elif self.anon_queue:
            msg = self.anon_queue.popleft()
        else:
            msg = None
        if msg is None:
            self.mailer.send_raw(self.cover_kp, pk, b"", KIND_DUMMY)
            self.counts["dummy"] += 1
            rec = SendRecord(now, pk, KIND_DUMMY)
        else:
            self.mailer.send_raw(msg.kp or self.cover_kp, msg.pk_R, msg.payload, KIND_REAL)
            self.counts["real"] += 1
            lat = now - msg.enqueued_at
            self.latencies.append(lat)
            rec = SendRecord(now, msg.pk_R, KIND_REAL, lat, msg.tag)
        if self.sends is not None:
            self.sends.append(rec)
        self._schedule(pk)

    def _new_cover_key(self):
        if not self.running:
            return
        self.cover_kp = crypto.KeyPair.generate(self.mailer.rng)
        self.broadcast(encode_cover_key(self.nym, self.cover_kp.pk))
        self.counts["cover_keys"] += 1
        self._key_timer = self.scheduler.call_later(
            exp_delay(self.rng, self.key_rate), self._new_cover_key)

    # -- receiving cover messages --

    def observe_cover_key(self, nym, pk_c, posted_at=None):
        """Called for every cover key seen on the bulletin board."""
        if not self.running or nym == self.nym or pk_c in self._listeners:
            return
        now = self.scheduler.now()
        posted_at = now if posted_at is None else posted_at
        prev = self._latest_key.get(nym)
        if prev is not None and prev[1] > posted_at:
            # an older key showing up late: only listen through its grace period
            self._listen(pk_c, posted_at)
            self._expire_at(pk_c, prev[1] + 1 / self.key_rate)
            return
        self._latest_key[nym] = (pk_c, posted_at)
        self._listen(pk_c, posted_at)
        if prev is not None:
            self._expire_at(prev[0], posted_at + 1 / self.key_rate)

    def _listen(self, pk_c, posted_at):
        self._listeners[pk_c] = self.mailer.recv_process(
            self.kp, pk_c, self._on_cover_delivery, repeat=True)

    def _expire_at(self, pk_c, when):
        def expire():
            rp = self._listeners.pop(pk_c, None)
            if rp is not None:
                rp.cancel()
            self._expiry.pop(pk_c, None)
        self._expiry[pk_c] = self.scheduler.call_at(when, expire)

    def listening_keys(self):
        return set(self._listeners)

    def _on_cover_delivery(self, d):
        if d is None:
            return
        if d.kind == KIND_REAL and self.on_real is not None:
            self.on_real(d)


def latency_quantile(rate, q):
    """Analytic q-quantile of an Exp(rate) latency."""
    return -math.log(1 - q) / rate

