"""Cost comparison of MS-PSI, C-PSI and vanilla PSI over one multi-set instance.

Every variant runs real group operations; the counters, not the clocks, are
what the comparison is about.  Byte counts use 32-byte elements and 16-byte
tags.
"""
import random
import time

from .. import crypto, mspsi
from .ledger import CostLedger

VARIANTS = ("mspsi", "cpsi", "vanilla")


def make_instance(m, N, S, seed=0, universe=None, overlap=0.5):
    """N server sets of S // N keywords each and a client set of m keywords.

    About ``overlap`` of the client keywords are drawn from the server sets.
    """
    rng = random.Random(seed)
    per = max(1, S // N)
    universe = universe or max(4 * per, min(20000, 2 * S))
    words = [b"w%06d" % i for i in range(universe)]
    sets = [frozenset(rng.sample(words, per)) for _ in range(N)]
    present = sorted(set().union(*sets))
    k_in = min(len(present), int(round(m * overlap)))
    client = rng.sample(present, k_in)
    while len(client) < m:
        w = b"absent%04d" % len(client)
        client.append(w)
    return client, sets


def _elements(n):
    return n * crypto.ELEMENT_SIZE


def _tags(n):
    return n * mspsi.TAG_SIZE


def _ledger_from(client, server, offline=None):
    led = CostLedger()
    for name, c in (("client", client), ("server", server)):
        led.add_ops(name, c)
        led.add(name, bytes_sent=_elements(c.elements_sent) + _tags(c.tags_sent),
                bytes_received=_elements(c.elements_received) + _tags(c.tags_received))
    if offline is not None:
        led.add_ops("server_offline", offline)
        led.add("server_offline", storage_bytes=_tags(offline.tag_hashes))
    return led


def expected_counts(m, N, S):
    """Closed-form online costs per variant (the rows of the cost table)."""
    return {
        "mspsi": {"client_exp": 2 * m, "client_tag_hashes": m * N, "server_exp": m,
                  "server_tag_hashes": 0, "elements": 2 * m, "tags": 0},
        "cpsi": {"client_exp": 2 * m * N, "client_tag_hashes": m * N, "server_exp": m * N,
                 "server_tag_hashes": 0, "elements": 2 * m * N, "tags": 0},
        "vanilla": {"client_exp": 2 * m * N, "client_tag_hashes": m * N,
                    "server_exp": S + m * N, "server_tag_hashes": S,
                    "elements": 2 * m * N, "tags": S},
    }


def run_psi_bench(m, N, S, seed=0, variants=VARIANTS):
    """Run each variant once.  Returns {variant: CostLedger}.

    Each ledger's ``wall`` holds online/offline seconds and a ``correct``
    flag comparing the outputs with plain set intersection.
    """
    client_set, sets = make_instance(m, N, S, seed)
    S_real = sum(len(s) for s in sets)
    rng = random.Random(seed + 1)
    cache = {}
    truth = [set(client_set) & s for s in sets]
    out = {}

    if "mspsi" in variants:
        c, s_on, s_off = mspsi.OpCounter(), mspsi.OpCounter(), mspsi.OpCounter()
        key = mspsi.ServerKey.generate(rng)
        t0 = time.perf_counter()
        tc = mspsi.precompute(sets, key, s_off, cache)
        t1 = time.perf_counter()
        q, sec = mspsi.blind(client_set, rng, c)
        r = mspsi.reply(q, key, s_on)
        res = mspsi.process(r, sec, tc, counter=c)
        t2 = time.perf_counter()
        led = _ledger_from(c, s_on, s_off)
        led.wall.update(offline=t1 - t0, online=t2 - t1,
                        correct=res.sizes == [len(t) for t in truth])
        out["mspsi"] = led

    if "cpsi" in variants:
        c, s_on, s_off = mspsi.OpCounter(), mspsi.OpCounter(), mspsi.OpCounter()
        t0 = time.perf_counter()
        server = mspsi.CPSIServer(sets, rng, counter=s_off, h2g_cache=cache)
        t1 = time.perf_counter()
        got = mspsi.cpsi(client_set, server, rng, c, s_on)
        t2 = time.perf_counter()
        led = _ledger_from(c, s_on, s_off)
        led.wall.update(offline=t1 - t0, online=t2 - t1, correct=got == truth)
        out["cpsi"] = led

    if "vanilla" in variants:
        c, s_on = mspsi.OpCounter(), mspsi.OpCounter()
        t0 = time.perf_counter()
        got = mspsi.vanilla_psi(client_set, sets, rng, c, s_on, h2g_cache=cache)
        t1 = time.perf_counter()
        led = _ledger_from(c, s_on)
        led.wall.update(offline=0.0, online=t1 - t0, correct=got == truth)
        out["vanilla"] = led

    for led in out.values():
        led.wall["S"] = S_real
    return out


def summary_rows(results, m, N):
    """Flat rows for CSV output."""
    rows = []
    for name, led in results.items():
        rows.append({
            "variant": name, "m": m, "N": N, "S": led.wall["S"],
            "client_exp": led.get("client", "exponentiations"),
            "client_tag_hashes": led.get("client", "tag_hashes"),
            "server_exp": led.get("server", "exponentiations"),
            "server_tag_hashes": led.get("server", "tag_hashes"),
            "online_bytes": led.get("client", "bytes_sent") + led.get("client", "bytes_received"),
            "offline_exp": led.get("server_offline", "exponentiations"),
            "online_s": round(led.wall["online"], 4),
            "offline_s": round(led.wall["offline"], 4),
            "correct": led.wall["correct"],
        })
    return rows
