"""Cover-traffic simulations: latency, bandwidth, unobservability.

Latency runs the real ``CoverProcess`` against a mailer that drops
envelopes, so only the scheduling is exercised.  Bandwidth is a per-journalist
accounting model fed with frame sizes from the real wire codec and with
Poisson send counts.  Unobservability runs small full deployments (real
envelopes, real server) and returns what the server sees from one sender.
"""
import math
import random
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .. import crypto
from ..clock import VirtualClock
from ..messaging import (KIND_REAL, CoverProcess, Mailer, decode_cover_key, encode_cover_key,
                         latency_quantile)
from ..pigeonhole import (ADDR_SIZE, ENVELOPE_BYTES, FEED_INTERVAL, FEED_OVERHEAD, PREFIX_SIZE,
                          BulletinEntry, LocalTransport, PigeonholeServer, feed_frame)
from ..wire import Op, Status, encode_frame, response, u64

DAY = 86400.0
HOUR = 3600.0
POLL_INTERVAL = 300.0


# -- latency -------------------------------------------------------------------

class _DropMailer:
    """Just enough of a Mailer for CoverProcess: sends go nowhere."""

    def __init__(self, scheduler, rng, on_send=None):
        self.scheduler = scheduler
        self.rng = rng
        self.transport = None
        self.on_send = on_send
        self.puts = 0

    def send_raw(self, kp, pk_R, payload, kind=KIND_REAL):
        self.puts += 1
        if self.on_send is not None:
            self.on_send(kind)


def simulate_latency(rate_per_day, n_messages=100_000, seed=0, gap_mean=None):
    """Hidden-send latencies (seconds) for ``n_messages`` messages to one recipient.

    One message is in flight at a time; the next one is queued an
    exponential gap (mean ``gap_mean``, default one cover interval) after
    the previous one went out, so queueing times are independent of the
    cover process.
    """
    rng = random.Random(seed)
    clock = VirtualClock()
    rate = rate_per_day / DAY
    gap_mean = 1 / rate if gap_mean is None else gap_mean
    peer = b"\x42" * 32

    def enqueue():
        cp.hidden_send(None, peer, b"x")

    def on_send(kind):
        if kind == KIND_REAL and cp.counts["real"] < n_messages:
            clock.call_later(rng.expovariate(1 / gap_mean), enqueue)

    mailer = _DropMailer(clock, rng, on_send)
    cp = CoverProcess(mailer, crypto.KeyPair.generate(rng), b"sim", lambda: [peer], rate,
                      rng=rng, broadcast=lambda payload: None)
    cp.start()
    clock.call_soon(enqueue)
    while cp.counts["real"] < n_messages + 1 and clock.pending():
        clock.step()
    cp.stop()
    return np.asarray(cp.latencies[:n_messages])


def latency_summary(lat, rate_per_day):
    rate = rate_per_day / DAY
    return {
        "rate_per_day": rate_per_day,
        "samples": len(lat),
        "mean_min": float(np.mean(lat)) / 60,
        "p95_min": float(np.quantile(lat, 0.95)) / 60,
        "analytic_mean_min": 1 / rate / 60,
        "analytic_p95_min": latency_quantile(rate, 0.95) / 60,
    }


# -- bandwidth model ---------------------------------------------------------------

def frame_sizes(envelope_bytes=ENVELOPE_BYTES):
    """Serialized sizes of every frame the model counts, from the wire codec."""
    addr = bytes(ADDR_SIZE)
    ct = bytes(envelope_bytes)
    nym, pk = bytes(16), bytes(crypto.ELEMENT_SIZE)
    cover_key = encode_cover_key(nym, pk)
    entry = BulletinEntry(1, cover_key, 0.0).encode()
    return {
        "put_req": len(encode_frame(Op.PH_PUT, [addr, ct])),
        "put_resp": len(response(Op.PH_PUT, Status.OK)),
        "get_req": len(encode_frame(Op.PH_GET, [addr])),
        "get_found": len(response(Op.PH_GET, Status.OK, [ct])),
        "get_missing": len(response(Op.PH_GET, Status.NOT_FOUND)),
        "bb_post_req": len(encode_frame(Op.BB_BROADCAST, [cover_key])),
        "bb_post_resp": len(response(Op.BB_BROADCAST, Status.OK, [u64(1)])),
        "bb_read_req": len(encode_frame(Op.BB_READ, [u64(0)])),
        "bb_read_resp": len(response(Op.BB_READ, Status.OK, [])),
        "bb_entry": len(entry) + 4,
        "feed_overhead": FEED_OVERHEAD,
        "prefix": PREFIX_SIZE,
        "envelope": envelope_bytes,
        "stored_envelope": envelope_bytes + ADDR_SIZE,
    }


@dataclass
class BandwidthModel:
    """Daily bytes of one journalist in a population of ``journalists``.

    Counted: puts and their acks, fetches of messages addressed to us, the
    notification feed (2-byte prefixes of every put in the system, batched
    per ``feed_interval``), cover-key broadcasts and reading everyone else's,
    and bulletin polling.  Not counted in ``total``: fetches triggered by
    prefix collisions (reported as ``false_probes``) and transport
    overheads below the framing layer.
    """
    journalists: int
    rate_per_day: float
    key_rate_per_day: float = None
    feed_interval: float = FEED_INTERVAL
    poll_interval: float = POLL_INTERVAL
    listening_per_peer: float = 1.5
    envelope_bytes: int = ENVELOPE_BYTES
    sizes: dict = field(default=None)

    def __post_init__(self):
        if self.key_rate_per_day is None:
            self.key_rate_per_day = self.rate_per_day / 4
        if self.sizes is None:
            self.sizes = frame_sizes(self.envelope_bytes)

    def expected_counts(self):
        N, lam, k = self.journalists, self.rate_per_day, self.key_rate_per_day
        system_puts = lam * N * (N - 1)
        windows = DAY / self.feed_interval
        per_window = system_puts / windows
        armed = self.listening_per_peer * (N - 1)
        return {
            "sends": lam * (N - 1),
            "receives": lam * (N - 1),
            "notifications": system_puts,
            "feed_frames": windows * -math.expm1(-per_window),
            "cover_keys_posted": k,
            "cover_keys_read": k * (N - 1),
            "polls": DAY / self.poll_interval,
            "false_probes": (system_puts - lam * (N - 1)) * min(1.0, armed / 2 ** (8 * PREFIX_SIZE)),
        }

    def bytes_for(self, c):
        s = self.sizes
        b = {
            "envelopes_up": c["sends"] * (s["put_req"] + s["put_resp"]),
            "envelopes_down": c["receives"] * (s["get_req"] + s["get_found"]),
            "notifications": c["notifications"] * s["prefix"] + c["feed_frames"] * s["feed_overhead"],
            "cover_keys": c["cover_keys_posted"] * (s["bb_post_req"] + s["bb_post_resp"])
            + c["cover_keys_read"] * s["bb_entry"],
            "polling": c["polls"] * (s["bb_read_req"] + s["bb_read_resp"]),
        }
        b["total"] = sum(b.values())
        b["false_probes"] = c["false_probes"] * (s["get_req"] + s["get_missing"])
        b["total_with_probes"] = b["total"] + b["false_probes"]
        return b

    def expected_bytes(self):
        return self.bytes_for(self.expected_counts())

    def simulate(self, days=30, seed=0):
        """Draw Poisson daily counts for one journalist; returns per-day byte dicts."""
        rng = np.random.default_rng(seed)
        exp = self.expected_counts()
        N, lam = self.journalists, self.rate_per_day
        out = []
        for _ in range(days):
            c = dict(exp)
            c["sends"] = rng.poisson(exp["sends"])
            c["receives"] = rng.poisson(exp["receives"])
            # everyone else's puts plus our own
            c["notifications"] = rng.poisson(lam * (N - 1) * (N - 1)) + c["sends"]
            c["cover_keys_posted"] = rng.poisson(exp["cover_keys_posted"])
            c["cover_keys_read"] = rng.poisson(exp["cover_keys_read"])
            c["false_probes"] = rng.poisson(exp["false_probes"])
            row = self.bytes_for(c)
            row["sends"] = c["sends"]
            out.append(row)
        return out

    def storage_bytes(self, retention_days=7):
        """Server mailbox storage at steady state."""
        N, lam = self.journalists, self.rate_per_day
        return lam * N * (N - 1) * retention_days * self.sizes["stored_envelope"]


def fit_exponent(xs, ys):
    """Slope of log(y) against log(x)."""
    slope, _ = np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)
    return float(slope)


def population_sweep(populations, rate_per_day, **kw):
    """Per-journalist and total daily bytes for each population size."""
    rows = []
    for n in populations:
        b = BandwidthModel(n, rate_per_day, **kw).expected_bytes()
        env = b["envelopes_up"] + b["envelopes_down"]
        rows.append({"journalists": n, "per_journalist": b["total"], "total": n * b["total"],
                     "envelopes_total": n * env, "notifications_total": n * b["notifications"],
                     "total_with_probes": n * b["total_with_probes"]})
    return rows


def sweep_exponents(rows):
    xs = [r["journalists"] for r in rows]
    return {k: fit_exponent(xs, [r[k] for r in rows])
            for k in ("total", "envelopes_total", "notifications_total", "total_with_probes")}


# -- unobservability ------------------------------------------------------------------

class RecordingTransport(LocalTransport):
    """LocalTransport that logs what the server sees on this connection."""

    def __init__(self, server):
        super().__init__(server)
        self.puts = []

    def ph_put(self, addr, ct):
        st = super().ph_put(addr, ct)
        self.puts.append((self.server.clock(), bytes(addr), len(ct)))
        return st


@dataclass
class _Peer:
    kp: object
    nym: bytes
    transport: object
    mailer: object
    cover: object = None
    cursor: int = 0
    received: list = field(default_factory=list)


def _poll(peer, clock):
    for e in peer.transport.bb_read(peer.cursor):
        peer.cursor = max(peer.cursor, e.seq)
        try:
            nym, pk_c = decode_cover_key(e.payload)
        except ValueError:
            continue
        peer.cover.observe_cover_key(nym, pk_c, e.posted_at)
    clock.call_later(POLL_INTERVAL, _poll, peer, clock)


def run_cover_world(seed, real_message=False, peers=3, days=2.0, rate_per_day=48.0,
                    send_at=None, via="query"):
    """Run ``peers`` journalists exchanging cover traffic for ``days``.

    With ``real_message`` peer 0 queues one real message to peer 1 at
    ``send_at`` (default: a quarter into the run).  ``via="query"`` sends it
    under a separate key pair that peer 1 listens to (as a querier's chat
    does), ``via="cover"`` under peer 0's current cover key.  The randomness of each
    peer depends only on ``seed`` and its index, so the two variants of a
    seed are directly comparable.

    Returns a dict with peer 0's put log, the server's put transcript and
    what peer 1 received.
    """
    clock = VirtualClock()
    server = PigeonholeServer(clock=clock, record_transcript=True)
    rate = rate_per_day / DAY
    ps = []
    for i in range(peers):
        rng = random.Random(f"{seed}/{i}")
        tr = RecordingTransport(server)
        kp = crypto.KeyPair.generate(rng)
        ps.append(_Peer(kp, rng.randbytes(16), tr, Mailer(tr, clock, rng)))
    pks = [p.kp.pk for p in ps]
    for i, p in enumerate(ps):
        rng = p.mailer.rng
        p.cover = CoverProcess(p.mailer, p.kp, p.nym, lambda: list(pks), rate, rng=rng,
                               on_real=p.received.append)
        p.mailer.go_online()
        p.cover.start()
    for p in ps:
        _poll(p, clock)
    if real_message:
        at = days * DAY / 4 if send_at is None else send_at
        kq = None
        if via == "query":
            # drawn from a separate stream so peer 0's own randomness is untouched
            kq = crypto.KeyPair.generate(random.Random(f"{seed}/query"))
            ps[1].mailer.recv_process(ps[1].kp, kq.pk, lambda d: d and ps[1].received.append(d))
        clock.call_at(at, ps[0].cover.hidden_send, kq, pks[1], b"meet at noon")
    clock.run_until(days * DAY)
    for p in ps:
        p.cover.stop()
    return {
        "sender_puts": ps[0].transport.puts,
        "server_puts": [t for t in server.transcript if t[0] == "put"],
        "received": [(d.payload, d.time) for d in ps[1].received],
        "sender_latencies": list(ps[0].cover.latencies),
        "send_rate": rate * (peers - 1),
    }


def unobservability_suite(seeds=range(50), peers=3, days=2.0, rate_per_day=48.0, via="query"):
    """Compare "real message queued" against "no message" runs per seed.

    Returns a dict of aggregate statistics:
      lengths_equal       every put in both runs has the same ciphertext length
                          and the sender made the same number of puts
      times_identical     the sender's put times match exactly per seed
      chi2_p              address-byte uniformity p-value per variant
      ks_pass             seeds whose sender gap distribution passes KS vs Exp
      delivered           seeds where the real message reached its recipient
    """
    seeds = list(seeds)
    lengths_equal = times_identical = True
    first_bytes = {False: [], True: []}
    ks_p = {False: [], True: []}
    delivered = 0
    for s in seeds:
        runs = {flag: run_cover_world(s, flag, peers, days, rate_per_day, via=via)
                for flag in (False, True)}
        a, b = runs[False]["sender_puts"], runs[True]["sender_puts"]
        lens = {n for _, _, n in a} | {n for _, _, n in b}
        lengths_equal &= len(a) == len(b) and len(lens) == 1
        times_identical &= [t for t, _, _ in a] == [t for t, _, _ in b]
        if any(p == b"meet at noon" for p, _ in runs[True]["received"]):
            delivered += 1
        for flag, r in runs.items():
            puts = r["sender_puts"]
            first_bytes[flag].extend(addr[0] for _, addr, _ in puts)
            gaps = np.diff([0.0] + [t for t, _, _ in puts])
            ks_p[flag].append(stats.kstest(gaps, "expon", args=(0, 1 / r["send_rate"])).pvalue)
    chi2 = {}
    for flag, vals in first_bytes.items():
        counts = np.bincount(np.asarray(vals, dtype=np.int64), minlength=256)
        chi2[flag] = float(stats.chisquare(counts).pvalue)
    return {
        "seeds": len(seeds),
        "lengths_equal": lengths_equal,
        "times_identical": times_identical,
        "chi2_p": {"none": chi2[False], "real": chi2[True]},
        "ks_pass": {"none": int(sum(p > 0.01 for p in ks_p[False])),
                    "real": int(sum(p > 0.01 for p in ks_p[True]))},
        "ks_p": {"none": ks_p[False], "real": ks_p[True]},
        "delivered": delivered,
    }


# -- CSV driver ------------------------------------------------------------------

def run_messaging_sim(journalists=1000, rates=(4.0, 48.0), days=30, seed=0,
                      latency_messages=100_000):
    """One row per cover rate: simulated latency and the per-journalist bandwidth."""
    rows = []
    for rate in rates:
        lat = latency_summary(simulate_latency(rate, latency_messages, seed), rate)
        model = BandwidthModel(journalists, rate)
        days_ = model.simulate(days, seed)
        mb = np.mean([d["total"] for d in days_]) / 1e6
        mb_probes = np.mean([d["total_with_probes"] for d in days_]) / 1e6
        rows.append({
            "journalists": journalists, "rate_per_day": rate,
            "mean_latency_min": round(lat["mean_min"], 3),
            "p95_latency_min": round(lat["p95_min"], 3),
            "analytic_mean_min": round(lat["analytic_mean_min"], 3),
            "analytic_p95_min": round(lat["analytic_p95_min"], 3),
            "mb_per_day": round(float(mb), 4),
            "mb_per_day_with_probes": round(float(mb_probes), 4),
            "storage_gb_7d": round(model.storage_bytes() / 1e9, 3),
        })
    return rows
