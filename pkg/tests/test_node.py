import random

import pytest

from datashare import mspsi, node
from datashare.clock import VirtualClock
from datashare.node import DAY, Journalist, NodeError, Organization, SystemConfig
from datashare.pigeonhole import LocalTransport, PigeonholeServer
from datashare.wire import unpack_fields

CORPORA = {
    "alice": [{"tax", "offshore", "bank"}, {"election", "poll"}],
    "bob": [{"tax", "offshore", "shell"}, {"tax", "bank"}, {"sport"}],
    "carol": [{"climate", "oil"}, {"oil", "offshore", "tax", "bank"}],
}


@pytest.fixture
def net(issuer_keys):
    clock = VirtualClock(40 * DAY)
    server = PigeonholeServer(clock=clock)
    rng = random.Random(7)
    cfg = SystemConfig(security_param=1024)
    org = Organization(cfg, rng, clock, keys=issuer_keys)
    org.publish_params(LocalTransport(server))
    nodes = {}
    for name, corpus in CORPORA.items():
        j = Journalist.setup(name, org, LocalTransport(server), clock, rng=rng)
        j.publish([{k.encode() for k in d} for d in corpus])
        nodes[name] = j
    for j in nodes.values():
        j.go_online()
    clock.advance(600)
    return clock, server, org, nodes


def wait_for(clock, cond, limit=3 * DAY, step=600):
    end = clock.now() + limit
    while not cond() and clock.now() < end:
        clock.advance(step)
    return cond()


def test_params_on_bulletin(net):
    clock, server, org, nodes = net
    got = node.read_params(LocalTransport(server))
    assert got.to_dict() == org.config.to_dict()
    assert got.mpk == org.keys.mpk


def test_config_json_roundtrip():
    cfg = SystemConfig(lim=7, cover_rate=1.0)
    assert SystemConfig.from_json(cfg.to_json()) == cfg
    assert cfg.effective_key_rate == 0.25


def test_nodes_learn_each_other(net):
    clock, server, org, nodes = net
    for name, j in nodes.items():
        assert len(j.records) == 2
        assert j.nym not in j.records


def test_query_reports_match_brute_force(net):
    clock, server, org, nodes = net
    a = nodes["alice"]
    qid = a.query([b"tax", b"offshore", b"bank"])
    assert wait_for(clock, lambda: len(a.queries[qid].reports) == 2)
    for name in ("bob", "carol"):
        rep = a.queries[qid].reports[nodes[name].nym]
        want = node.brute_force_sizes(nodes[name].corpus, [b"tax", b"offshore", b"bank"])
        assert rep.sizes == want
        assert rep.matches == sum(1 for v in want if v == 3)
        assert rep.real_count == 3


def test_query_is_padded_to_lim(net):
    clock, server, org, nodes = net
    a = nodes["alice"]
    qid = a.query([b"tax", b"oil", b"bank"])
    entry = [e for e in server.bb_read(0) if e.seq == qid][0]
    assert entry.payload[:1] == bytes([node.BB_QUERY])
    from datashare import tokens
    bundle = tokens.AuthorizedMessage.from_bytes(entry.payload[1:])
    q_bytes, pk_q = unpack_fields(bundle.message, 2)
    assert len(mspsi.BlindedQuery.from_bytes(q_bytes)) == 10
    assert a.queries[qid].secret.real_count == 3


def test_query_argument_checks(net):
    a = net[3]["alice"]
    with pytest.raises(NodeError):
        a.query([])
    with pytest.raises(NodeError):
        a.query([b"k%d" % i for i in range(11)])
    with pytest.raises(NodeError):
        a.query([b"x", b"x"])
    with pytest.raises(NodeError):
        a.publish([])


def test_chat_both_ways(net):
    clock, server, org, nodes = net
    a, b = nodes["alice"], nodes["bob"]
    qid = a.query([b"shell"])
    assert wait_for(clock, lambda: b.nym in a.queries[qid].reports)
    a.chat(qid, b.nym, b"can we talk? " * 100)
    assert wait_for(clock, lambda: b.conversations and
                    list(b.conversations.values())[0].inbox)
    conv = list(b.conversations.values())[0]
    assert conv.inbox[0][0] == b"can we talk? " * 100
    b.answer(conv.pk_q, b"yes")
    assert wait_for(clock, lambda: b.nym in a.queries[qid].chats and
                    any(d == "in" for d, _, _ in a.queries[qid].chats[b.nym]))


def test_replayed_record_rejected(net):
    clock, server, org, nodes = net
    rec_entry = [e for e in server.bb_read(0) if e.payload[:1] == bytes([node.BB_RECORD])][0]
    server.bb_broadcast(rec_entry.payload)
    for j in nodes.values():
        j.sync()
    rejected = [j.metrics["rejected"].get("replay", 0) for j in nodes.values()]
    assert sum(rejected) == 2  # everyone except the author


def test_forged_query_rejected(net):
    clock, server, org, nodes = net
    server.bb_broadcast(bytes([node.BB_QUERY]) + b"garbage")
    server.bb_broadcast(bytes([node.BB_RECORD]))
    b = nodes["bob"]
    b.sync()
    assert sum(b.metrics["rejected"].values()) == 2
    assert b.metrics["queries_answered"] == 0


def test_save_load_roundtrip(net, tmp_path):
    clock, server, org, nodes = net
    a = nodes["alice"]
    qid = a.query([b"tax"])
    assert wait_for(clock, lambda: len(a.queries[qid].reports) == 2)
    a.go_offline()
    a.save(tmp_path)
    b = Journalist.load(tmp_path, org, LocalTransport(server), clock)
    assert (b.nym, b.kp, b.server_key) == (a.nym, a.kp, a.server_key)
    assert b.records == a.records and b.cursor == a.cursor
    assert b.corpus == a.corpus
    assert {k: v.reports for k, v in b.queries.items()} == {k: v.reports for k, v in a.queries.items()}
    assert b.mailer.channels == a.mailer.channels
    # the restored node keeps working
    b.go_online()
    q2 = b.query([b"oil"])
    assert wait_for(clock, lambda: len(b.queries[q2].reports) == 2)


def test_load_missing_state(tmp_path, net):
    clock, server, org, nodes = net
    with pytest.raises(NodeError):
        Journalist.load(tmp_path, org, LocalTransport(server), clock)


def test_chunking():
    for n in (0, 1, node.CHAT_CHUNK, node.CHAT_CHUNK + 1, 5 * node.CHAT_CHUNK):
        data = bytes(range(256)) * (n // 256 + 1)
        data = data[:n]
        buf = []
        out = [node._reassemble(buf, c) for c in node._chunks(data)]
        assert out[-1] == data and all(o is None for o in out[:-1])


def test_corpus_dir(tmp_path):
    (tmp_path / "b.txt").write_text("beta\nalpha\n\n")
    (tmp_path / "a.txt").write_text("gamma\n")
    assert node.load_corpus_dir(tmp_path) == [frozenset({b"gamma"}), frozenset({b"alpha", b"beta"})]
