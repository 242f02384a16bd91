"""Corpus extraction against search oracles of decreasing leakage.

Three oracles answer keyword-set queries over a hidden corpus:

* ``OneBitOracle``: 1 if some document contains every queried keyword.
* ``NumDocOracle``: the number of such documents.
* ``MSPSIOracle``: for up to ``lim`` keywords per call, which documents
  contain each keyword (what a querier learns from per-document tags).

Each oracle counts its calls; the extraction functions below are measured
only by those counters.
"""
import argparse
import csv
import itertools
import math
import random
import sys

from . import crypto, mspsi

INF = math.inf


class SearchOracle:
    kind = None

    def __init__(self, corpus):
        self.corpus = [frozenset(d) for d in corpus]
        self.queries = 0

    def _matching(self, P):
        P = frozenset(P)
        return sum(1 for d in self.corpus if P <= d)


class OneBitOracle(SearchOracle):
    kind = "one_bit"

    def query(self, P):
        self.queries += 1
        return 1 if self._matching(P) else 0


class NumDocOracle(SearchOracle):
    kind = "num_doc"

    def query(self, P):
        self.queries += 1
        return self._matching(P)


class MSPSIOracle(SearchOracle):
    """Per-document keyword membership, ``lim`` keywords per call.

    With ``use_crypto`` the answers come from a real blind/reply/process
    round against the corpus's tag collection.
    """
    kind = "mspsi"

    def __init__(self, corpus, lim=10, use_crypto=False, rng=None):
        super().__init__(corpus)
        self.lim = lim
        self.use_crypto = use_crypto
        self.rng = rng
        if use_crypto:
            self._key = mspsi.ServerKey.generate(rng)
            self._tc = mspsi.precompute([d or frozenset() for d in self.corpus], self._key)

    def query(self, keywords):
        keywords = list(keywords)
        if len(keywords) > self.lim:
            raise ValueError(f"at most {self.lim} keywords per query")
        self.queries += 1
        if not keywords:
            return {}
        if not self.use_crypto:
            return {k: tuple(k in d for d in self.corpus) for k in keywords}
        q, sec = mspsi.blind([crypto._as_bytes(k) for k in keywords], self.rng)
        rows = mspsi.membership_matrix(mspsi.reply(q, self._key), sec, self._tc)
        return {k: tuple(r) for k, r in zip(keywords, rows)}


ORACLES = {"one_bit": OneBitOracle, "num_doc": NumDocOracle, "mspsi": MSPSIOracle}


def _is_in_docs(P, D):
    return any(P <= d for d in D)


def recover_document(oracle, P, U):
    """Greedily extend P over U in order.  Returns (document, matched).

    Exactly |U| queries.  ``matched`` is False when no query came back
    positive, i.e. P is in no document (for nonempty P).
    """
    P = frozenset(P)
    matched = False
    for u in U:
        if oracle.query(P | {u}):
            P = P | {u}
            matched = True
    return P, matched


def extract_one_bit(oracle, U, ulim):
    """Documents recoverable from a one-bit oracle, for uniqueness up to ``ulim``.

    The search branches on every positive keyword while |P| < ulim.  At
    |P| = ulim it stops if a known document already covers P, and otherwise
    switches to a linear greedy completion.  Every returned set is a real
    document; every document with u_D <= ulim is returned.
    """
    U = list(U)
    n = len(U)
    D = []

    def add(doc):
        if doc not in D:
            D.append(doc)

    def extract(P, k):
        if len(P) == ulim and _is_in_docs(P, D):
            return
        if len(P) >= ulim:
            add(recover_document(oracle, P, U)[0])
            return
        for i in range(k, n):
            Pi = P | {U[i]}
            if oracle.query(Pi):
                extract(Pi, i + 1)
        if P and not _is_in_docs(P, D):
            add(recover_document(oracle, P, U)[0])

    extract(frozenset(), 0)
    return D


def extract_num_doc(oracle, U):
    """Recover every document with a counting oracle.

    Keywords are branched in order; a subtree only counts documents not
    already found elsewhere, which is what lets the skip branch stop once
    its remaining match count is used up.
    """
    U = list(U)
    n = len(U)
    D = []

    def extract(P, k, matches):
        for i in range(k, n):
            Pi = P | {U[i]}
            found = sum(1 for d in D if Pi <= d)
            nxt = oracle.query(Pi) - found
            if nxt > 0:
                extract(Pi, i + 1, nxt)
                if matches > nxt:
                    extract(P, i + 1, matches - nxt)
                return
        if P and matches > 0 and P not in D:
            D.append(P)

    extract(frozenset(), 0, INF)
    return D


def extract_mspsi(oracle, U):
    """Full corpus (including contained documents) in ceil(|U| / lim) calls."""
    U = list(U)
    n_docs = None
    members = {}
    for s in range(0, len(U), oracle.lim):
        ans = oracle.query(U[s:s + oracle.lim])
        members.update(ans)
        if ans:
            n_docs = len(next(iter(ans.values())))
    if n_docs is None:
        return []
    return [frozenset(u for u in U if members[u][d]) for d in range(n_docs)]


def uniqueness(doc, corpus, max_size=20):
    """Smallest keyword subset of ``doc`` contained in no other document.

    ``corpus`` may include ``doc`` itself (matched by position if given as
    an index).  Returns INF if another document contains ``doc``.
    """
    if isinstance(doc, int):
        idx = doc
        doc = frozenset(corpus[idx])
    else:
        doc = frozenset(doc)
        idx = next((i for i, d in enumerate(corpus) if frozenset(d) == doc), None)
    others = [frozenset(d) for i, d in enumerate(corpus) if i != idx]
    if any(doc <= o for o in others):
        return INF
    if len(doc) > max_size:
        raise ValueError(f"document of {len(doc)} keywords exceeds brute-force limit {max_size}")
    items = sorted(doc)
    for size in range(0, len(items) + 1):
        for T in itertools.combinations(items, size):
            T = frozenset(T)
            if not any(T <= o for o in others):
                return size
    return INF


def random_corpus(n, d, rng, min_kw=1, max_kw=None, max_tries=10000):
    """``d`` distinct documents over keywords k00..k{n-1}, none containing another."""
    U = [f"k{i:02d}" for i in range(n)]
    max_kw = max(min_kw, n // 2) if max_kw is None else max_kw
    for _ in range(max_tries):
        docs = []
        for _ in range(d):
            size = rng.randint(min_kw, min(max_kw, n))
            docs.append(frozenset(rng.sample(U, size)))
        ok = all(not (a <= b) for i, a in enumerate(docs)
                 for j, b in enumerate(docs) if i != j)
        if ok:
            return docs, U
    raise ValueError("could not sample a non-containing corpus; loosen parameters")


def run_trial(oracle_kind, n, d, ulim, seed, lim=10):
    rng = random.Random(seed)
    corpus, U = random_corpus(n, d, rng)
    oracle = ORACLES[oracle_kind](corpus) if oracle_kind != "mspsi" else MSPSIOracle(corpus, lim)
    if oracle_kind == "one_bit":
        got = extract_one_bit(oracle, U, ulim)
    elif oracle_kind == "num_doc":
        got = extract_num_doc(oracle, U)
    else:
        got = extract_mspsi(oracle, U)
    truth = set(corpus)
    frac = len(truth & set(got)) / len(truth)
    return {"seed": seed, "queries_used": oracle.queries, "recovered_fraction": frac}


def main(argv=None):
    ap = argparse.ArgumentParser(prog="datashare-leakage",
                                 description="Measure corpus-extraction query counts.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run")
    r.add_argument("--oracle", choices=sorted(ORACLES), required=True)
    r.add_argument("--n", type=int, default=12, help="keyword universe size")
    r.add_argument("--d", type=int, default=5, help="documents per corpus")
    r.add_argument("--ulim", type=int, default=3)
    r.add_argument("--lim", type=int, default=10)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--trials", type=int, default=10)
    r.add_argument("--out", default="-", help="CSV path (default stdout)")
    args = ap.parse_args(argv)
    out = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    try:
        w = csv.DictWriter(out, fieldnames=["seed", "queries_used", "recovered_fraction"])
        w.writeheader()
        for t in range(args.trials):
            w.writerow(run_trial(args.oracle, args.n, args.d, args.ulim, args.seed + t, args.lim))
    finally:
        if out is not sys.stdout:
            out.close()


if __name__ == "__main__":
    main()
