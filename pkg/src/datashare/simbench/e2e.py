"""Full deployment on a virtual clock: publish, query, reply, process, converse.

Every node runs the real stack (tokens, MS-PSI, cuckoo filters, envelopes,
cover traffic) against one in-process server.  Match reports are checked
against brute-force intersections.
"""
import hashlib
import json
import random
from dataclasses import asdict, dataclass, fields

from scipy import stats

from ..clock import VirtualClock
from ..node import BB_QUERY, BB_RECORD, DAY, Journalist, Organization, SystemConfig, brute_force_sizes
from ..pigeonhole import ENVELOPE_BYTES, LocalTransport, PigeonholeServer
from .ledger import CostLedger
from .messaging import frame_sizes


@dataclass
class SimConfig:
    journalists: int = 10
    docs: int = 200
    keywords_per_doc: int = 20
    vocabulary: int = 3000
    queries_per_journalist: int = 1
    query_keywords: int = 3
    cover_rate: float = 48.0  # per day per recipient
    key_rate: float = None  # per day, default cover_rate / 4
    days: float = 2.0
    chat_messages: int = 5
    seed: int = 0
    security_param: int = 2048
    # extrapolation of owner cost to a larger deployment
    population: int = 1000
    queries_per_day: int = 10

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def make_corpus(rng, docs, per_doc, vocabulary):
    """Documents over a Zipf-like vocabulary, so popular keywords are shared."""
    words = [b"kw%05d" % i for i in range(vocabulary)]
    weights = [1 / (r + 1) for r in range(vocabulary)]
    corpus = []
    for _ in range(docs):
        d = set()
        while len(d) < per_doc:
            d.update(rng.choices(words, weights, k=per_doc - len(d)))
        corpus.append(frozenset(d))
    return corpus


def chat_bound(k, rate, q=0.999):
    """q-quantile of the time to send k messages queued at once on one stream."""
    return float(stats.gamma.ppf(q, k, scale=1 / rate))


class _World:
    def __init__(self, cfg):
        self.cfg = cfg
        self.clock = VirtualClock()
        self.server = PigeonholeServer(clock=self.clock, record_transcript=True)
        key_rate = None if cfg.key_rate is None else cfg.key_rate / DAY
        self.config = SystemConfig(cover_rate=cfg.cover_rate / DAY, key_rate=key_rate,
                                   security_param=cfg.security_param,
                                   tokens_per_epoch=max(50, 4 * cfg.queries_per_journalist + 8))
        self.org = Organization(self.config, rng=random.Random(f"{cfg.seed}/org"),
                                clock=self.clock)
        self.org.publish_params(LocalTransport(self.server))
        crng = random.Random(f"{cfg.seed}/corpus")
        self.corpora = [make_corpus(crng, cfg.docs, cfg.keywords_per_doc, cfg.vocabulary)
                        for _ in range(cfg.journalists)]
        self.transports = [LocalTransport(self.server) for _ in range(cfg.journalists)]
        self.nodes = [Journalist.setup(f"j{i}", self.org, tr, self.clock, self.config,
                                       rng=random.Random(f"{cfg.seed}/j{i}"))
                      for i, tr in enumerate(self.transports)]


def run_e2e_sim(cfg=None):
    """Run the deployment.  Returns a result dict (see keys below) with a CostLedger."""
    cfg = cfg or SimConfig()
    w = _World(cfg)
    clock, nodes = w.clock, w.nodes
    qrng = random.Random(f"{cfg.seed}/queries")
    ledger = CostLedger()

    for j, corpus in zip(nodes, w.corpora):
        j.publish(corpus)
    for j in nodes:
        j.go_online()

    # queries: keywords from some other journalist's document, plus one
    # that may not occur anywhere
    planned = []
    t_query = 600.0
    for i, j in enumerate(nodes):
        for k in range(cfg.queries_per_journalist):
            other = (i + 1 + k) % len(nodes)
            doc = qrng.choice(w.corpora[other])
            kws = qrng.sample(sorted(doc), min(cfg.query_keywords, len(doc)))
            if k % 2 == 1:
                kws[-1] = b"absent-%d-%d" % (i, k)
            planned.append((i, kws, other))
    issued = []

    def ask(i, kws, other):
        issued.append((i, nodes[i].query(kws), kws, other))
    for n, (i, kws, other) in enumerate(planned):
        clock.call_at(t_query + n, ask, i, kws, other)
    clock.run_until(t_query + len(planned) + 2 * w.config.poll_interval + 60)

    # check every report against brute force
    checked = exact = fp_cells = fn_cells = missing = 0
    nym_index = {j.nym: idx for idx, j in enumerate(nodes)}
    for i, qid, kws, _ in issued:
        qs = nodes[i].queries[qid]
        for nym in qs.owners:
            rep = qs.reports.get(nym)
            if rep is None:
                missing += 1
                continue
            truth = brute_force_sizes(w.corpora[nym_index[nym]], kws)
            checked += 1
            if rep.sizes == truth:
                exact += 1
            for got, want in zip(rep.sizes, truth):
                if got > want:
                    fp_cells += got - want
                elif got < want:
                    fn_cells += want - got

    # a conversation between the first querier and its target owner
    i, qid, kws, other = issued[0]
    querier, owner = nodes[i], nodes[other]
    pk_q = querier.queries[qid].kp.pk
    t_chat = clock.now()
    for k in range(cfg.chat_messages):
        querier.chat(qid, owner.nym, b"question %d" % k)
        owner.answer(pk_q, b"answer %d" % k)
    rate = cfg.cover_rate / DAY
    bound = chat_bound(cfg.chat_messages, rate)
    clock.run_until(max(cfg.days * DAY, t_chat + bound + 2 * w.config.poll_interval))
    to_owner = [(t, text) for text, t in owner.conversations[pk_q].inbox]
    to_querier = [(t, text) for d, text, t in querier.queries[qid].chats.get(owner.nym, [])
                  if d == "in"]
    done = [t for t, _ in to_owner + to_querier]
    chat = {
        "to_owner": len(to_owner), "to_querier": len(to_querier),
        "completed_after": (max(done) - t_chat) if done else None,
        "bound": bound,
        "in_order": [x for _, x in to_owner] == [b"question %d" % k for k in range(len(to_owner))],
    }
    chat["ok"] = (chat["to_owner"] == chat["to_querier"] == cfg.chat_messages
                  and chat["completed_after"] <= bound and chat["in_order"])

    for j in nodes:
        j.go_offline()

    # -- accounting --
    sizes = frame_sizes()
    put_frame = sizes["put_req"] + sizes["put_resp"]
    get_frame = sizes["get_req"] + sizes["get_found"]
    cover_bytes = search_bytes = 0
    readers = len(nodes) - 1
    for idx, (j, tr) in enumerate(zip(nodes, w.transports)):
        name = f"j{idx}"
        for c in j.counters.values():
            ledger.add_ops(name, c)
        ledger.add(name, bytes_sent=tr.sent, bytes_received=tr.received,
                   padded_sent=j.mailer.stats["puts"] * ENVELOPE_BYTES,
                   padded_received=(j.mailer.stats["probes"] - j.mailer.stats["false_probes"])
                   * ENVELOPE_BYTES,
                   messages=j.mailer.stats["puts"])
        # a dummy costs its sender a put and its recipient a fetch
        cover_bytes += j.cover.counts["dummy"] * (put_frame + get_frame)
        search_bytes += j.metrics["replies_sent"] * (put_frame + get_frame)
    for _, seq, payload, _ in _bulletin(w.server):
        if payload[:1] in (bytes([BB_RECORD]), bytes([BB_QUERY])):
            search_bytes += len(payload) * (1 + readers)
    stored, bulletin = w.server.storage_bytes()
    ledger.add("server", storage_bytes=stored + bulletin)
    put_bytes = sum(j.mailer.stats["puts"] for j in nodes) * ENVELOPE_BYTES
    stored_ct = w.server.mailbox_count() * ENVELOPE_BYTES
    conservation = {"put_bytes": put_bytes, "stored_bytes": stored_ct,
                    "expired_bytes": w.server.expired_bytes,
                    "ok": put_bytes == stored_ct + w.server.expired_bytes}

    # -- owner cost extrapolated to the full population --
    answered = sum(j.metrics["queries_answered"] for j in nodes)
    reply_s = sum(j.metrics["reply_seconds"] for j in nodes)
    per_query = reply_s / answered if answered else float("nan")
    daily_queries = cfg.queries_per_day * (cfg.population - 1)
    query_entry = _mean_query_bytes(w.server)
    owner = {
        "seconds_per_query": per_query,
        "daily_compute_s": per_query * daily_queries,
        "daily_reply_mb_padded": daily_queries * put_frame / 1e6,
        "daily_query_download_mb": daily_queries * query_entry / 1e6,
    }
    querier = {
        "process_seconds_per_reply": (sum(j.metrics["process_seconds"] for j in nodes)
                                      / max(1, sum(j.metrics["reports"] for j in nodes))),
    }

    return {
        "config": asdict(cfg),
        "reports": {"checked": checked, "exact": exact, "missing": missing,
                    "false_positive_cells": fp_cells, "false_negative_cells": fn_cells},
        "chat": chat,
        "cover_bytes": cover_bytes,
        "search_bytes": search_bytes,
        "conservation": conservation,
        "owner": owner,
        "querier": querier,
        "trace_hash": trace_hash(w),
        "ledger": ledger,
        "events": sum(len(j.events) for j in nodes),
        "sim_time": clock.now(),
    }


def _bulletin(server):
    rows = server.db.execute("SELECT seq, payload, posted_at FROM bulletin ORDER BY seq")
    for seq, payload, posted_at in rows:
        yield None, seq, bytes(payload), posted_at


def _mean_query_bytes(server):
    sizes = [len(p) for _, _, p, _ in _bulletin(server) if p[:1] == bytes([BB_QUERY])]
    return sum(sizes) / len(sizes) if sizes else 0.0


def trace_hash(world):
    """Digest of everything observable and every node's event log (no wall times)."""
    h = hashlib.sha256()
    for entry in world.server.transcript:
        h.update(repr(entry).encode())
    for _, seq, payload, posted_at in _bulletin(world.server):
        h.update(repr((seq, posted_at)).encode() + payload)
    for j in world.nodes:
        for t, kind, kw in j.events:
            h.update(repr((j.name, t, kind, sorted(kw.items()))).encode())
        for qid in sorted(j.queries):
            for nym, rep in sorted(j.queries[qid].reports.items()):
                h.update(repr((qid, nym, rep.sizes)).encode())
    return h.hexdigest()


def result_rows(res):
    """Flat CSV rows: one per party from the ledger plus a summary row."""
    rows = [dict(r) for r in res["ledger"].rows()]
    return rows
