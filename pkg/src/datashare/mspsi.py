"""Multi-set PSI over a precomputed tag collection, plus two baselines.

A server holding documents d_1..d_N publishes the tag collection

    TC = { H(i || Hg(y)^s) : i in 1..N, y in d_i }

once.  A client blinds its keywords with a fresh scalar c, the server raises
the blinded elements to s, and the client unblinds and recomputes the tags
for every document index to learn the per-document intersection sizes.

The baselines (``vanilla_psi`` and ``cpsi``) exist to reproduce operation
counts for the cost comparison; they run real group operations.
"""
import hashlib
import struct
from dataclasses import dataclass, field

from . import crypto

TAG_SIZE = 16
MAGIC = b"MSPSI1"
_TC_HEADER = struct.Struct(">6sHHQQ")


class QueryError(ValueError):
    pass


@dataclass
class OpCounter:
    """Operation counts for one party."""
    exponentiations: int = 0
    tag_hashes: int = 0
    group_hashes: int = 0
    elements_sent: int = 0
    elements_received: int = 0
    tags_sent: int = 0
    tags_received: int = 0

    @property
    def hashes(self):
        return self.tag_hashes + self.group_hashes

    def merge(self, other):
        for k in self.__dataclass_fields__:
            setattr(self, k, getattr(self, k) + getattr(other, k))
        return self

    def as_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["hashes"] = self.hashes
        return d


def _count(counter, **kw):
    if counter is not None:
        for k, v in kw.items():
            setattr(counter, k, getattr(counter, k) + v)


def as_corpus(docs):
    """Normalize an iterable of keyword collections into a list of frozensets."""
    out = []
    for d in docs:
        out.append(frozenset(crypto._as_bytes(k) for k in d))
    return out


@dataclass(frozen=True)
class ServerKey:
    s: int

    def __post_init__(self):
        if self.s % crypto.ORDER == 0:
            raise ValueError("server key must be nonzero")

    @classmethod
    def generate(cls, rng=None):
        return cls(crypto.random_scalar(rng))


def encode_index(i):
    return i.to_bytes(8, "big")


def tag(i, pretag):
    """Document-diversified tag H(i || pretag), truncated to TAG_SIZE."""
    return crypto.hash_bytes(b"tag", [encode_index(i), pretag])[:TAG_SIZE]


class _TagHasher:
    """Same output as :func:`tag`, with the per-document prefix precomputed."""

    def __init__(self, n_docs):
        head = crypto.hash_input(b"tag", [])
        lp8, lp32 = struct.pack(">I", 8), struct.pack(">I", crypto.ELEMENT_SIZE)
        self.prefixes = [head + lp8 + encode_index(i) + lp32 for i in range(1, n_docs + 1)]

    def tags_for(self, pretag):
        sha = hashlib.sha256
        return [sha(p + pretag).digest()[:TAG_SIZE] for p in self.prefixes]


@dataclass(frozen=True)
class TagCollection:
    tags: frozenset
    doc_count: int
    total: int

    def __contains__(self, t):
        return t in self.tags

    def __len__(self):
        return len(self.tags)

    def to_bytes(self):
        head = _TC_HEADER.pack(MAGIC, crypto.ELEMENT_SIZE, TAG_SIZE, self.doc_count, self.total)
        return head + b"".join(sorted(self.tags))

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _TC_HEADER.size:
            raise ValueError("truncated tag collection")
        magic, esize, tsize, n, total = _TC_HEADER.unpack_from(data)
        if magic != MAGIC or tsize == 0:
            raise ValueError("bad tag collection header")
        body = data[_TC_HEADER.size:]
        if len(body) % tsize:
            raise ValueError("tag collection body not a multiple of tag size")
        tags = [body[k:k + tsize] for k in range(0, len(body), tsize)]
        return cls(frozenset(tags), n, total)


def _h2g(y, cache, counter):
    # a cache hit still counts: the cache only speeds up benchmarks
    _count(counter, group_hashes=1)
    if cache is None:
        return crypto.hash_to_group(y)
    hy = cache.get(y)
    if hy is None:
        hy = cache[y] = crypto.hash_to_group(y)
    return hy


def pretag(keyword, key):
    return crypto.exp(crypto.hash_to_group(keyword), key.s)


def precompute(corpus, key, counter=None, h2g_cache=None):
    """Build the tag collection.  Each distinct keyword costs one exponentiation."""
    corpus = as_corpus(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    pretags = {}
    tags = set()
    total = 0
    sha = hashlib.sha256
    hasher = _TagHasher(len(corpus))
    for idx, doc in enumerate(corpus):
        prefix = hasher.prefixes[idx]
        for y in doc:
            p = pretags.get(y)
            if p is None:
                p = crypto.exp(_h2g(y, h2g_cache, counter), key.s)
                _count(counter, exponentiations=1)
                pretags[y] = p
            tags.add(sha(prefix + p).digest()[:TAG_SIZE])
            total += 1
    _count(counter, tag_hashes=total)
    return TagCollection(frozenset(tags), len(corpus), total)


@dataclass(frozen=True)
class BlindedQuery:
    elements: tuple

    def __len__(self):
        return len(self.elements)

    def to_bytes(self):
        return b"".join(self.elements)

    @classmethod
    def from_bytes(cls, data):
        if len(data) % crypto.ELEMENT_SIZE:
            raise QueryError("query length is not a multiple of the element size")
        es = crypto.ELEMENT_SIZE
        return cls(tuple(data[k:k + es] for k in range(0, len(data), es)))


@dataclass(frozen=True)
class ReplyElements:
    elements: tuple

    def __len__(self):
        return len(self.elements)

    def to_bytes(self):
        return b"".join(self.elements)

    @classmethod
    def from_bytes(cls, data):
        q = BlindedQuery.from_bytes(data)
        return cls(q.elements)


@dataclass(frozen=True)
class QuerySecret:
    c: int
    keywords: tuple
    real_count: int

    def __repr__(self):
        return f"QuerySecret(m={len(self.keywords)}, real_count={self.real_count})"


def blind(keywords, rng=None, counter=None, real_count=None):
    """Blind keywords with a fresh scalar.  The first ``real_count`` are real."""
    kws = tuple(crypto._as_bytes(k) for k in keywords)
    if not kws:
        raise QueryError("query needs at least one keyword")
    if len(set(kws)) != len(kws):
        raise QueryError("duplicate keywords in query")
    if real_count is None:
        real_count = len(kws)
    if not 1 <= real_count <= len(kws):
        raise QueryError("real_count out of range")
    c = crypto.random_scalar(rng)
    elems = tuple(crypto.exp(crypto.hash_to_group(k), c) for k in kws)
    _count(counter, exponentiations=len(kws), group_hashes=len(kws), elements_sent=len(kws))
    return BlindedQuery(elems), QuerySecret(c, kws, real_count)


def reply(query, key, counter=None):
    """Raise every blinded element to s, preserving order."""
    try:
        out = tuple(crypto.exp(e, key.s) for e in query.elements)
    except crypto.InvalidElement as e:
        raise QueryError(f"malformed query element: {e}") from None
    _count(counter, exponentiations=len(out), elements_received=len(out), elements_sent=len(out))
    return ReplyElements(out)


def unblind(reply_elems, secret, counter=None):
    if len(reply_elems) != len(secret.keywords):
        raise QueryError("reply length does not match query")
    cinv = crypto.scalar_inverse(secret.c)
    try:
        out = [crypto.exp(e, cinv) for e in reply_elems.elements]
    except crypto.InvalidElement as e:
        raise QueryError(f"malformed reply element: {e}") from None
    _count(counter, exponentiations=len(out), elements_received=len(out))
    return out


def membership_matrix(reply_elems, secret, tags, doc_count=None, counter=None):
    """rows[k][d] is True when keyword k's tag for document d+1 is in ``tags``."""
    if doc_count is None:
        doc_count = tags.doc_count
    pretags = unblind(reply_elems, secret, counter)
    hasher = _TagHasher(doc_count)
    rows = []
    for p in pretags:
        rows.append([t in tags for t in hasher.tags_for(p)])
    _count(counter, tag_hashes=len(pretags) * doc_count)
    return rows


@dataclass
class ProcessResult:
    sizes: list
    matches: int
    real_count: int = field(default=0)


def process(reply_elems, secret, tags, doc_count=None, counter=None):
    """Per-document intersection sizes and the count of fully matching documents.

    ``tags`` is anything supporting ``in`` (a TagCollection or a cuckoo
    filter); for a filter ``doc_count`` must be given.
    """
    rows = membership_matrix(reply_elems, secret, tags, doc_count, counter)
    real = rows[:secret.real_count]
    n = len(rows[0]) if rows else 0
    sizes = [sum(r[d] for r in real) for d in range(n)]
    t = sum(1 for v in sizes if v == secret.real_count)
    return ProcessResult(sizes, t, secret.real_count)


# -- baselines ---------------------------------------------------------------



def plain_tag(pretag_):
    return crypto.hash_bytes(b"tag", [pretag_])[:TAG_SIZE]


def vanilla_psi(client_set, server_sets, rng=None, client=None, server=None, h2g_cache=None):
    """One fresh execution of the basic DH PSI per server set.

    The server draws a fresh key per run and sends its whole tag set online.
    Returns the intersection with each server set.
    """
    xs = [crypto._as_bytes(x) for x in client_set]
    out = []
    for ys in server_sets:
        ys = [crypto._as_bytes(y) for y in ys]
        q, sec = blind(xs, rng, client)
        s = ServerKey.generate(rng)
        r = reply(q, s, server)
        server_tags = set()
        for y in ys:
            server_tags.add(plain_tag(crypto.exp(_h2g(y, h2g_cache, server), s.s)))
        _count(server, exponentiations=len(ys), tag_hashes=len(ys), tags_sent=len(ys))
        _count(client, tags_received=len(ys))
        pts = unblind(r, sec, client)
        mine = [plain_tag(p) for p in pts]
        _count(client, tag_hashes=len(mine))
        out.append({x for x, t in zip(xs, mine) if t in server_tags})
    return out


class CPSIServer:
    """Client-server PSI with a long-term key and a published tag collection.

    ``shared_key=True`` is the naive multi-set mode: one key for every set and
    tags without a set index, so equal keywords in different sets collide.
    Otherwise each set gets its own key, i.e. N independent instances.
    """

    def __init__(self, server_sets, rng=None, shared_key=False, counter=None, h2g_cache=None):
        self.sets = [[crypto._as_bytes(y) for y in ys] for ys in server_sets]
        self.shared_key = shared_key
        if shared_key:
            k = ServerKey.generate(rng)
            self.keys = [k] * len(self.sets)
        else:
            self.keys = [ServerKey.generate(rng) for _ in self.sets]
        self.collections = []
        for ys, k in zip(self.sets, self.keys):
            tags = set()
            for y in ys:
                tags.add(plain_tag(crypto.exp(_h2g(y, h2g_cache, counter), k.s)))
                _count(counter, exponentiations=1, tag_hashes=1)
            self.collections.append(frozenset(tags))

    def reply(self, i, query, counter=None):
        return reply(query, self.keys[i], counter)


def cpsi(client_set, server, rng=None, client=None, server_counter=None):
    """Online phase of C-PSI against every set of ``server``."""
    xs = [crypto._as_bytes(x) for x in client_set]
    out = []
    for i, tags in enumerate(server.collections):
        q, sec = blind(xs, rng, client)
        r = server.reply(i, q, server_counter)
        mine = [plain_tag(p) for p in unblind(r, sec, client)]
        _count(client, tag_hashes=len(mine))
        out.append({x for x, t in zip(xs, mine) if t in tags})
    return out
