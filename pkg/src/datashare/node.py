"""A journalist's node: publish, query, reply, process and converse.

Bulletin board payloads start with a one-byte kind:

    0x01 record      AuthorizedMessage over fields(nym, pk, filter, N)
    0x02 query       AuthorizedMessage over fields(Q, pk_q)
    0x03 cover key   fields(nym, pk_c)           (see messaging)
    0x04 parameters  JSON SystemConfig

Envelope payloads (inside the padded plaintext) start with 0x10 for an
MS-PSI reply and 0x11 for a chat chunk.

Everything a node does runs as callbacks on its scheduler, so the same
code serves the simulator (virtual clock) and the daemon (wall clock).
"""
import json
import logging
import os
import time
from dataclasses import dataclass, field

from . import crypto, cuckoo, mspsi, tokens
from .messaging import (BB_COVER_KEY, KIND_REAL, MAX_PAYLOAD, ChannelState, CoverProcess,
                        Mailer, decode_cover_key)
from .wire import FrameError, pack_fields, unpack_fields

log = logging.getLogger(__name__)

DAY = 86400.0
BB_RECORD = 0x01
BB_QUERY = 0x02
BB_PARAMS = 0x04
MSG_REPLY = 0x10
MSG_CHAT = 0x11
CHAT_CHUNK = MAX_PAYLOAD - 2


class NodeError(Exception):
    pass


@dataclass
class SystemConfig:
    lim: int = 10
    cover_rate: float = 48 / DAY
    key_rate: float = None
    tokens_per_epoch: int = 50
    epoch_length: float = 30 * DAY
    query_validity: float = 7 * DAY
    key_rotation: float = 7 * DAY
    poll_interval: float = 300.0
    security_param: int = 2048
    bucket_size: int = 4
    fingerprint_bits: int = 24
    load_limit: float = 0.95
    mpk: object = None
    server: str = None
    group: dict = field(default_factory=crypto.PARAMS.to_dict)

    @property
    def policy(self):
        return tokens.RateLimitPolicy(self.tokens_per_epoch, self.epoch_length)

    @property
    def effective_key_rate(self):
        return self.cover_rate / 4 if self.key_rate is None else self.key_rate

    def cuckoo_params(self, n):
        return cuckoo.CuckooParams(capacity=max(1, n), bucket_size=self.bucket_size,
                                   fingerprint_bits=self.fingerprint_bits,
                                   load_limit=self.load_limit)

    def to_dict(self):
        d = dict(self.__dict__)
        d["mpk"] = self.mpk.to_bytes().hex() if self.mpk is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("mpk"):
            d["mpk"] = tokens.BlindPublicKey.from_bytes(bytes.fromhex(d["mpk"]))
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class Record:
    nym: bytes
    pk: bytes
    cf: bytes
    N: int

    def encode(self):
        return pack_fields([self.nym, self.pk, self.cf, self.N.to_bytes(8, "big")])

    @classmethod
    def decode(cls, data):
        nym, pk, cf, n = unpack_fields(data, 4)
        return cls(nym, crypto.decode_element(pk), cf, int.from_bytes(n, "big"))

    def filter(self):
        return cuckoo.CuckooFilter.from_bytes(self.cf)


@dataclass
class MatchReport:
    owner: bytes
    sizes: list
    matches: int
    real_count: int
    query_id: int = None

    def to_dict(self):
        return {"owner": self.owner.hex(), "sizes": self.sizes, "matches": self.matches,
                "real_count": self.real_count, "query_id": self.query_id}


@dataclass
class OwnerRef:
    nym: bytes
    pk: bytes
    N: int
    filter: object = None


@dataclass
class QueryState:
    query_id: int
    secret: mspsi.QuerySecret
    kp: crypto.KeyPair
    owners: dict
    posted_at: float
    reports: dict = field(default_factory=dict)
    chats: dict = field(default_factory=dict)
    bad_owners: set = field(default_factory=set)
    _partial: dict = field(default_factory=dict)


@dataclass
class Conversation:
    """Owner side of one answered query."""
    pk_q: bytes
    kp: crypto.KeyPair
    query_seq: int
    inbox: list = field(default_factory=list)
    _partial: list = field(default_factory=list)


# -- organization --------------------------------------------------------------

class Organization:
    """Runs setup, registers journalists and issues tokens."""

    def __init__(self, config=None, rng=None, clock=None, keys=None, issuer=None):
        self.config = config or SystemConfig()
        self.clock = clock or time.time
        self.keys = keys or tokens.setup(self.config.security_param, rng)
        self.config.mpk = self.keys.mpk
        self.issuer = issuer or tokens.Issuer(self.keys, self.config.policy, self.clock)

    def register(self, journalist_id):
        self.issuer.register(journalist_id)

    def publish_params(self, transport):
        return transport.bb_broadcast(bytes([BB_PARAMS]) + self.config.to_json().encode())


def system_setup(config=None, transport=None, rng=None, clock=None):
    org = Organization(config, rng, clock)
    if transport is not None:
        org.publish_params(transport)
    return org


def read_params(transport):
    """Latest parameters published on the bulletin board, or None."""
    found = None
    for e in transport.bb_read(0):
        if e.payload[:1] == bytes([BB_PARAMS]):
            found = SystemConfig.from_json(e.payload[1:].decode())
    return found


# -- corpus helpers --------------------------------------------------------------

def load_corpus_dir(path):
    """One document per file (sorted by name), one UTF-8 keyword per line."""
    docs = []
    for name in sorted(os.listdir(path)):
        full = os.path.join(path, name)
        if not os.path.isfile(full):
            continue
        with open(full, encoding="utf-8") as f:
            kws = {line.strip() for line in f if line.strip()}
        docs.append(frozenset(k.encode() for k in kws))
    return docs


def brute_force_sizes(corpus, keywords):
    ks = {crypto._as_bytes(k) for k in keywords}
    return [len(ks & set(d)) for d in mspsi.as_corpus(corpus)]


# -- the node ------------------------------------------------------------------

class Journalist:
    def __init__(self, name, org, transport, scheduler, config=None, rng=None,
                 nym=None, kp=None, server_key=None):
        self.name = name
        self.org = org
        self.config = config or org.config
        self.transport = transport
        self.scheduler = scheduler
        self.rng = crypto.default_rng(rng)
        self.nym = nym or self.rng.randbytes(16)
        self.kp = kp or crypto.KeyPair.generate(self.rng)
        self.rotated_at = scheduler.now()
        self.old_keys = {}
        self.server_key = server_key or mspsi.ServerKey.generate(self.rng)
        self.wallet = tokens.Wallet()
        self.registry = tokens.SpendRegistry()
        self.mailer = Mailer(transport, scheduler, self.rng)
        self.cover = CoverProcess(self.mailer, self.kp, self.nym, self._directory,
                                  rate=self.config.cover_rate,
                                  key_rate=self.config.effective_key_rate, rng=self.rng,
                                  on_real=self._on_cover_real)
        self.records = {}
        self.cursor = 0
        self.corpus = None
        self.record = None
        self.queries = {}
        self.conversations = {}
        self._own_pkT = set()
        self._sync_timer = None
        self.online = False
        self.counters = {"precompute": mspsi.OpCounter(), "reply": mspsi.OpCounter(),
                         "process": mspsi.OpCounter(), "query": mspsi.OpCounter()}
        self.metrics = {"rejected": {}, "replies_sent": 0, "queries_answered": 0,
                        "reports": 0, "chat_sent": 0, "chat_received": 0,
                        "reply_seconds": 0.0, "process_seconds": 0.0}
        self.events = []

    def _log(self, kind, **kw):
        self.events.append((self.scheduler.now(), kind, kw))

    # -- setup, tokens --

    @classmethod
    def setup(cls, name, org, transport, scheduler, config=None, rng=None):
        """Register with the organization and create fresh identity state."""
        org.register(name)
        return cls(name, org, transport, scheduler, config, rng)

    def fetch_tokens(self, n=1):
        for _ in range(n):
            self.wallet.add(tokens.issue(self.name, self.org.issuer, self.rng))

    def _token(self):
        if not len(self.wallet):
            self.fetch_tokens(1)
        return self.wallet.take()

    def _broadcast_authorized(self, kind, message):
        tok = self._token()
        bundle = tokens.authorize(message, tok)
        self._own_pkT.add(tok.pk_T)
        return self.transport.bb_broadcast(bytes([kind]) + bundle.to_bytes())

    # -- publish --

    def publish(self, corpus=None):
        corpus = mspsi.as_corpus(corpus if corpus is not None else self.corpus or [])
        if not corpus or not any(corpus):
            raise NodeError("nothing to publish: corpus is empty")
        tc = mspsi.precompute(corpus, self.server_key, self.counters["precompute"])
        cf = cuckoo.compress(sorted(tc.tags), self.config.cuckoo_params(len(tc)))
        rec = Record(self.nym, self.kp.pk, cf.to_bytes(), len(corpus))
        seq = self._broadcast_authorized(BB_RECORD, rec.encode())
        self.corpus = corpus
        self.record = rec
        self._log("publish", seq=seq, N=len(corpus), cf_bytes=len(rec.cf))
        return rec

    def rotate_key(self, republish=True):
        self.old_keys[self.kp.pk] = self.kp
        self.kp = crypto.KeyPair.generate(self.rng)
        self.rotated_at = self.scheduler.now()
        self.cover.set_key(self.kp)
        if republish and self.corpus is not None:
            self.publish(self.corpus)

    def _key_for(self, pk):
        return self.kp if pk == self.kp.pk else self.old_keys.get(pk)

    # -- query --

    def query(self, keywords):
        kws = [crypto._as_bytes(k) for k in keywords]
        lim = self.config.lim
        if not 1 <= len(kws) <= lim:
            raise NodeError(f"a query needs 1..{lim} keywords, got {len(kws)}")
        if len(set(kws)) != len(kws):
            raise NodeError("duplicate keywords in query")
        padded = kws + [self.rng.randbytes(32) for _ in range(lim - len(kws))]
        Q, secret = mspsi.blind(padded, self.rng, self.counters["query"], real_count=len(kws))
        kq = crypto.KeyPair.generate(self.rng)
        seq = self._broadcast_authorized(BB_QUERY, pack_fields([Q.to_bytes(), kq.pk]))
        owners = {nym: OwnerRef(nym, rec.pk, rec.N) for nym, (_, rec) in self.records.items()}
        qs = QueryState(seq, secret, kq, owners, self.scheduler.now())
        self.queries[seq] = qs
        for ref in owners.values():
            self.mailer.recv_process(kq, ref.pk, self._querier_handler(qs, ref), repeat=True)
        self._log("query", seq=seq, real=len(kws), owners=len(owners))
        return seq

    def _querier_handler(self, qs, ref):
        def on_delivery(d):
            if d is None:
                return
            kind = d.payload[:1]
            if kind == bytes([MSG_REPLY]):
                self._process_reply(qs, ref, d.payload[1:])
            elif kind == bytes([MSG_CHAT]):
                text = _reassemble(qs._partial.setdefault(ref.nym, []), d.payload[1:])
                if text is not None:
                    qs.chats.setdefault(ref.nym, []).append(("in", text, d.time))
                    self.metrics["chat_received"] += 1
                    self._log("chat_in", query=qs.query_id, peer=ref.nym.hex())
        return on_delivery

    def _process_reply(self, qs, ref, body):
        try:
            R = mspsi.ReplyElements.from_bytes(body)
            if len(R) != len(qs.secret.keywords):
                raise mspsi.QueryError("reply length mismatch")
            if ref.filter is None:
                rec = self.records.get(ref.nym)
                if rec is None or rec[1].pk != ref.pk:
                    raise mspsi.QueryError("record for owner no longer available")
                ref.filter = rec[1].filter()
            t0 = time.perf_counter()
            res = mspsi.process(R, qs.secret, ref.filter, ref.N, self.counters["process"])
            self.metrics["process_seconds"] += time.perf_counter() - t0
        except (mspsi.QueryError, ValueError) as e:
            qs.bad_owners.add(ref.nym)
            self._log("bad_reply", query=qs.query_id, owner=ref.nym.hex(), error=str(e))
            return
        rep = MatchReport(ref.nym, res.sizes, res.matches, res.real_count, qs.query_id)
        qs.reports[ref.nym] = rep
        self.metrics["reports"] += 1
        self._log("report", query=qs.query_id, owner=ref.nym.hex(), matches=rep.matches)

    def results(self, query_id=None):
        qids = [query_id] if query_id is not None else sorted(self.queries)
        return [r for q in qids for r in self.queries[q].reports.values()]

    # -- bulletin processing and replying --

    def sync(self):
        entries = self.transport.bb_read(self.cursor)
        directory_changed = False
        for e in entries:
            self.cursor = max(self.cursor, e.seq)
            kind = e.payload[:1]
            try:
                if kind == bytes([BB_RECORD]):
                    directory_changed |= self._on_record(e)
                elif kind == bytes([BB_QUERY]):
                    self._on_query(e)
                elif kind == bytes([BB_COVER_KEY]):
                    nym, pk_c = decode_cover_key(e.payload)
                    self.cover.observe_cover_key(nym, pk_c, e.posted_at)
            except (FrameError, ValueError):
                self._reject("malformed")
        if directory_changed:
            self.cover.update_directory()
        return len(entries)

    def _reject(self, reason):
        r = self.metrics["rejected"]
        r[reason] = r.get(reason, 0) + 1

    def _verify(self, e):
        bundle = tokens.AuthorizedMessage.from_bytes(e.payload[1:])
        if bundle.pk_T in self._own_pkT:
            return None
        v = tokens.verify_authorized(bundle, self.config.mpk, self.registry,
                                     self.config.policy, now=e.posted_at)
        if not v:
            self._reject(v.value)
            return None
        return bundle

    def _on_record(self, e):
        bundle = self._verify(e)
        if bundle is None:
            return False
        rec = Record.decode(bundle.message)
        if rec.nym == self.nym:
            return False
        cur = self.records.get(rec.nym)
        if cur is None or cur[0] < e.seq:
            self.records[rec.nym] = (e.seq, rec)
            return True
        return False

    def _on_query(self, e):
        t0 = time.perf_counter()
        try:
            self._answer_query(e)
        finally:
            self.metrics["reply_seconds"] += time.perf_counter() - t0

    def _answer_query(self, e):
        bundle = self._verify(e)
        if bundle is None:
            return
        q_bytes, pk_q = unpack_fields(bundle.message, 2)
        if self.record is None:
            return
        if self.scheduler.now() - e.posted_at > self.config.query_validity:
            self._reject("stale_query")
            return
        try:
            Q = mspsi.BlindedQuery.from_bytes(q_bytes)
            if len(Q) != self.config.lim:
                raise mspsi.QueryError("query not padded to lim")
            R = mspsi.reply(Q, self.server_key, self.counters["reply"])
            pk_q = crypto.decode_element(pk_q)
        except (mspsi.QueryError, ValueError):
            self._reject("bad_query")
            return
        kp = self.kp
        self.mailer.send_raw(kp, pk_q, bytes([MSG_REPLY]) + R.to_bytes(), KIND_REAL)
        conv = Conversation(pk_q, kp, e.seq)
        self.conversations[pk_q] = conv
        self.mailer.recv_process(kp, pk_q, self._owner_handler(conv), repeat=True)
        self.metrics["replies_sent"] += 1
        self.metrics["queries_answered"] += 1
        self._log("reply", query=e.seq)

    def _owner_handler(self, conv):
        def on_delivery(d):
            if d is None or d.payload[:1] != bytes([MSG_CHAT]):
                return
            text = _reassemble(conv._partial, d.payload[1:])
            if text is not None:
                conv.inbox.append((text, d.time))
                self.metrics["chat_received"] += 1
                self._log("chat_in", query=conv.query_seq, peer="querier")
        return on_delivery

    def _on_cover_real(self, d):
        self._log("cover_real", size=len(d.payload))

    def _directory(self):
        return [rec.pk for _, rec in self.records.values()]

    # -- conversations --

    def chat(self, query_id, owner_nym, text):
        """Querier to owner over the query key."""
        qs = self.queries[query_id]
        ref = qs.owners[owner_nym]
        for chunk in _chunks(crypto._as_bytes(text)):
            self.cover.hidden_send(qs.kp, ref.pk, bytes([MSG_CHAT]) + chunk,
                                   tag=("chat", query_id))
        qs.chats.setdefault(owner_nym, []).append(("out", crypto._as_bytes(text),
                                                   self.scheduler.now()))
        self.metrics["chat_sent"] += 1

    def answer(self, pk_q, text):
        """Owner to querier over the contact key used for the reply."""
        conv = self.conversations[pk_q]
        for chunk in _chunks(crypto._as_bytes(text)):
            self.cover.hidden_send(conv.kp, pk_q, bytes([MSG_CHAT]) + chunk,
                                   tag=("chat", conv.query_seq))
        self.metrics["chat_sent"] += 1

    # -- online / offline --

    def go_online(self):
        if self.online:
            return
        self.online = True
        self.mailer.go_online()
        self.sync()
        self.cover.start()
        self._schedule_sync()

    def go_offline(self):
        if not self.online:
            return
        self.online = False
        if self._sync_timer:
            self._sync_timer.cancel()
        self.cover.stop()
        self.mailer.go_offline()

    def _schedule_sync(self):
        def tick():
            if not self.online:
                return
            self.sync()
            if self.scheduler.now() - self.rotated_at >= self.config.key_rotation:
                self.rotate_key(republish=self.corpus is not None)
            self._schedule_sync()
        self._sync_timer = self.scheduler.call_later(self.config.poll_interval, tick)

    # -- persistence --

    def save(self, path):
        os.makedirs(path, exist_ok=True)
        ident = {
            "name": self.name, "nym": self.nym.hex(), "sk": hex(self.kp.sk),
            "rotated_at": self.rotated_at, "s": hex(self.server_key.s),
            "old_keys": [hex(k.sk) for k in self.old_keys.values()],
        }
        queries = []
        for q in self.queries.values():
            queries.append({
                "id": q.query_id, "c": hex(q.secret.c),
                "keywords": [k.hex() for k in q.secret.keywords],
                "real_count": q.secret.real_count, "sk_q": hex(q.kp.sk),
                "posted_at": q.posted_at,
                "owners": [[o.nym.hex(), o.pk.hex(), o.N] for o in q.owners.values()],
                "reports": [r.to_dict() for r in q.reports.values()],
                "chats": {n.hex(): [[d, t.hex(), ts] for d, t, ts in v] for n, v in q.chats.items()},
            })
        convs = [{"pk_q": c.pk_q.hex(), "sk": hex(c.kp.sk), "seq": c.query_seq,
                  "inbox": [[t.hex(), ts] for t, ts in c.inbox]}
                 for c in self.conversations.values()]
        records = {n.hex(): [seq, r.encode().hex()] for n, (seq, r) in self.records.items()}
        channels = [[a.hex(), b.hex(), ch.n_s, ch.n_r]
                    for (a, b), ch in self.mailer.channels.items()]
        files = {
            "identity.json": ident,
            "wallet.json": [t.to_dict() for t in self.wallet.tokens],
            "channels.json": channels,
            "records.json": records,
            "queries.json": queries,
            "conversations.json": convs,
            "state.json": {"cursor": self.cursor, "last_online": self.mailer.last_online,
                           "own_pkT": sorted(p.hex() for p in self._own_pkT),
                           "corpus": [sorted(k.hex() for k in d) for d in self.corpus or []]},
        }
        for name, obj in files.items():
            tmp = os.path.join(path, name + ".tmp")
            with open(tmp, "w") as f:
                json.dump(obj, f, indent=1, sort_keys=True)
            os.replace(tmp, os.path.join(path, name))

    @classmethod
    def load(cls, path, org, transport, scheduler, config=None, rng=None):
        def rd(name, default):
            p = os.path.join(path, name)
            if not os.path.exists(p):
                return default
            with open(p) as f:
                return json.load(f)
        ident = rd("identity.json", None)
        if ident is None:
            raise NodeError(f"no node state in {path}")
        j = cls(ident["name"], org, transport, scheduler, config, rng,
                nym=bytes.fromhex(ident["nym"]),
                kp=crypto.KeyPair.from_secret(int(ident["sk"], 16)),
                server_key=mspsi.ServerKey(int(ident["s"], 16)))
        j.rotated_at = ident["rotated_at"]
        for sk in ident.get("old_keys", []):
            k = crypto.KeyPair.from_secret(int(sk, 16))
            j.old_keys[k.pk] = k
        j.registry = tokens.SpendRegistry(os.path.join(path, "registry"))
        j.wallet.tokens = [tokens.Token.from_dict(t) for t in rd("wallet.json", [])]
        for a, b, ns, nr in rd("channels.json", []):
            j.mailer.channels[(bytes.fromhex(a), bytes.fromhex(b))] = ChannelState(ns, nr)
        for n, (seq, rec) in rd("records.json", {}).items():
            j.records[bytes.fromhex(n)] = (seq, Record.decode(bytes.fromhex(rec)))
        st = rd("state.json", {})
        j.cursor = st.get("cursor", 0)
        j.mailer.last_online = st.get("last_online", 0.0)
        j._own_pkT = {bytes.fromhex(p) for p in st.get("own_pkT", [])}
        corpus = st.get("corpus") or []
        if corpus:
            j.corpus = [frozenset(bytes.fromhex(k) for k in d) for d in corpus]
        for q in rd("queries.json", []):
            secret = mspsi.QuerySecret(int(q["c"], 16),
                                       tuple(bytes.fromhex(k) for k in q["keywords"]),
                                       q["real_count"])
            owners = {bytes.fromhex(n): OwnerRef(bytes.fromhex(n), bytes.fromhex(pk), N)
                      for n, pk, N in q["owners"]}
            qs = QueryState(q["id"], secret, crypto.KeyPair.from_secret(int(q["sk_q"], 16)),
                            owners, q["posted_at"])
            for r in q["reports"]:
                qs.reports[bytes.fromhex(r["owner"])] = MatchReport(
                    bytes.fromhex(r["owner"]), r["sizes"], r["matches"], r["real_count"], r["query_id"])
            for n, v in q.get("chats", {}).items():
                qs.chats[bytes.fromhex(n)] = [(d, bytes.fromhex(t), ts) for d, t, ts in v]
            j.queries[qs.query_id] = qs
            for ref in owners.values():
                j.mailer.recv_process(qs.kp, ref.pk, j._querier_handler(qs, ref), repeat=True)
        for c in rd("conversations.json", []):
            conv = Conversation(bytes.fromhex(c["pk_q"]), crypto.KeyPair.from_secret(int(c["sk"], 16)),
                                c["seq"], [(bytes.fromhex(t), ts) for t, ts in c["inbox"]])
            j.conversations[conv.pk_q] = conv
            j.mailer.recv_process(conv.kp, conv.pk_q, j._owner_handler(conv), repeat=True)
        return j


def _chunks(data):
    if not data:
        return [b"\x00"]
    parts = [data[k:k + CHAT_CHUNK] for k in range(0, len(data), CHAT_CHUNK)]
    return [bytes([1 if i < len(parts) - 1 else 0]) + p for i, p in enumerate(parts)]


def _reassemble(buf, chunk):
    if not chunk:
        return None
    buf.append(chunk[1:])
    if chunk[0] == 0:
        text = b"".join(buf)
        buf.clear()
        return text
    return None
