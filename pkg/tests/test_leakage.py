import csv
import io
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from datashare import leakage as lk

A, B, C, D = "abcd"


def fs(*docs):
    return [frozenset(d) for d in docs]


def test_one_bit_and_num_doc():
    o = lk.OneBitOracle(fs({A, C}, {B}))
    assert o.query({A, B}) == 0
    assert o.query(set()) == 1
    assert o.query({A, C}) == 1
    assert o.queries == 3
    n = lk.NumDocOracle(fs({A, C}, {B}, {A, B}))
    assert n.query({A}) == 2
    assert n.query(set()) == 3
    assert n.query({D}) == 0


def test_mspsi_oracle_limits():
    o = lk.MSPSIOracle(fs({A}, {B}), lim=2)
    assert o.query([A]) == {A: (True, False)}
    with pytest.raises(ValueError):
        o.query([A, B, C])
    assert o.queries == 1


def test_mspsi_oracle_with_crypto():
    corpus = fs({A, B}, {B, C}, {D})
    plain = lk.MSPSIOracle(corpus, lim=4)
    real = lk.MSPSIOracle(corpus, lim=4, use_crypto=True, rng=random.Random(1))
    assert real.query([A, B, C, D]) == plain.query([A, B, C, D])


def test_recover_document():
    o = lk.OneBitOracle(fs({A, B, C}))
    doc, ok = lk.recover_document(o, {A}, [A, B, C, D])
    assert doc == {A, B, C} and ok and o.queries <= 4
    o = lk.OneBitOracle(fs({A, B}))
    assert lk.recover_document(o, {A, B}, [A, B]) == ({A, B}, True)
    o = lk.OneBitOracle(fs({A}))
    assert lk.recover_document(o, {B}, [A, B, C]) == ({B}, False)


def test_extract_one_bit_examples():
    o = lk.OneBitOracle(fs({A, B}, {C, D}))
    assert set(lk.extract_one_bit(o, [A, B, C, D], 2)) == set(fs({A, B}, {C, D}))
    # two documents sharing every pair: u = 3 for both, so ulim = 2 finds neither
    corpus = fs({A, B, C}, {A, B, D}, {A, C, D}, {B, C, D})
    assert all(lk.uniqueness(d, corpus) == 3 for d in corpus)
    got = lk.extract_one_bit(lk.OneBitOracle(corpus), [A, B, C, D], 2)
    assert set(got) <= set(corpus)


def test_extract_num_doc_examples():
    o = lk.NumDocOracle(fs({A, C}, {B}))
    assert set(lk.extract_num_doc(o, [A, B, C])) == set(fs({A, C}, {B}))
    o = lk.NumDocOracle(fs({A, C, D}))
    assert lk.extract_num_doc(o, [A, B, C, D]) == fs({A, C, D})
    assert o.queries <= 2 * 4


def test_extract_mspsi_tight():
    rng = random.Random(3)
    corpus, U = lk.random_corpus(25, 5, rng)
    o = lk.MSPSIOracle(corpus, lim=10)
    assert lk.extract_mspsi(o, U) == corpus
    assert o.queries == 3


def test_extract_mspsi_keeps_contained_documents():
    corpus = fs({A, B}, {A})
    assert lk.extract_mspsi(lk.MSPSIOracle(corpus, lim=2), [A, B]) == corpus


def test_uniqueness():
    corpus = fs({A, B}, {C})
    assert lk.uniqueness(frozenset({A, B}), corpus) == 1
    assert lk.uniqueness(0, fs({A}, {A, B})) == math.inf
    assert lk.uniqueness(0, fs({A, B}, {A, B})) == math.inf
    assert lk.uniqueness(0, fs({A}, {B})) == 1
    with pytest.raises(ValueError):
        lk.uniqueness(frozenset(range(21)), [frozenset(range(21)), frozenset()])


def test_random_corpus_has_no_containment():
    rng = random.Random(5)
    docs, U = lk.random_corpus(10, 5, rng)
    assert len(U) == 10 and len(docs) == 5
    assert not any(a <= b for i, a in enumerate(docs) for j, b in enumerate(docs) if i != j)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(4, 10), st.integers(1, 5))
def test_extraction_orderings(seed, n, d):
    rng = random.Random(seed)
    try:
        corpus, U = lk.random_corpus(n, d, rng)
    except ValueError:
        return
    ob, nd, ms = lk.OneBitOracle(corpus), lk.NumDocOracle(corpus), lk.MSPSIOracle(corpus, 3)
    got1 = lk.extract_one_bit(ob, U, 3)
    got2 = lk.extract_num_doc(nd, U)
    got3 = lk.extract_mspsi(ms, U)
    truth = set(corpus)
    # never an invented document
    assert set(got1) <= truth and set(got2) == truth and set(got3) == truth
    assert {x for x in truth if lk.uniqueness(x, corpus) <= 3} <= set(got1)
    assert ms.queries == math.ceil(n / 3)
    assert ms.queries <= nd.queries <= 2 * n * d
    assert ob.queries <= n ** 3 + n * d


def test_cli_csv(capsys):
    lk.main(["run", "--oracle", "num_doc", "--n", "8", "--d", "3", "--trials", "3"])
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 3
    assert all(float(r["recovered_fraction"]) == 1.0 for r in rows)


def test_cli_writes_file(tmp_path):
    out = tmp_path / "m.csv"
    lk.main(["run", "--oracle", "mspsi", "--n", "25", "--lim", "10", "--trials", "2", "--out", str(out)])
    rows = list(csv.DictReader(open(out)))
    assert [int(r["queries_used"]) for r in rows] == [3, 3]
