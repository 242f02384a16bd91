"""Command line for a journalist node and for organization setup.

State lives in plain files:

    ORG/config.json        published SystemConfig (includes the issuer public key)
    ORG/issuer.json        issuer secret key
    ORG/issued.json        registrations and per-epoch issuance counts
    STATE/identity.json    nym, contact key, MS-PSI key
    STATE/wallet.json      tokens
    STATE/channels.json    pigeonhole counters
    STATE/registry/        spent token log, one file per epoch
    STATE/state.json       bulletin cursor, last-online time, corpus
    STATE/records.json     other journalists' records
    STATE/queries.json     own queries, secrets and match reports
    STATE/conversations.json  answered queries (owner side)
    STATE/outbox.json      chat messages waiting for the daemon to send

Token issuance talks to the organization directory directly; it stands in
for the authenticated channel to the organization.
"""
import argparse
import json
import os
import signal
import sys
import threading
import time

from . import tokens
from .clock import RealtimeScheduler
from .node import DAY, Journalist, NodeError, Organization, SystemConfig, load_corpus_dir, read_params
from .pigeonhole import PigeonholeClient, parse_endpoint


class OrgStore:
    def __init__(self, path):
        self.path = path

    def _p(self, name):
        return os.path.join(self.path, name)

    def exists(self):
        return os.path.exists(self._p("config.json"))

    def create(self, config):
        os.makedirs(self.path, exist_ok=True)
        org = Organization(config)
        self.save(org)
        return org

    def load(self):
        with open(self._p("config.json")) as f:
            config = SystemConfig.from_json(f.read())
        with open(self._p("issuer.json")) as f:
            keys = tokens.IssuerKeys.from_dict(json.load(f))
        issuer = tokens.Issuer(keys, config.policy)
        if os.path.exists(self._p("issued.json")):
            with open(self._p("issued.json")) as f:
                st = json.load(f)
            issuer.registered = set(st["registered"])
            issuer.issued = {(j, int(e)): n for j, e, n in st["issued"]}
        return Organization(config, keys=keys, issuer=issuer)

    def save(self, org):
        with open(self._p("config.json"), "w") as f:
            f.write(org.config.to_json())
        with open(self._p("issuer.json"), "w") as f:
            json.dump(org.keys.to_dict(), f)
        os.chmod(self._p("issuer.json"), 0o600)
        st = {"registered": sorted(org.issuer.registered),
              "issued": [[j, e, n] for (j, e), n in sorted(org.issuer.issued.items())]}
        with open(self._p("issued.json"), "w") as f:
            json.dump(st, f)


def _outbox_path(state):
    return os.path.join(state, "outbox.json")


def _read_outbox(state):
    p = _outbox_path(state)
    if not os.path.exists(p):
        return []
    with open(p) as f:
        return json.load(f)


def _write_outbox(state, items):
    with open(_outbox_path(state), "w") as f:
        json.dump(items, f)


def _drain_outbox(j, state):
    items = _read_outbox(state)
    if not items:
        return
    for it in items:
        text = bytes.fromhex(it["text"])
        if it["role"] == "querier":
            j.chat(it["query"], bytes.fromhex(it["target"]), text)
        else:
            j.answer(bytes.fromhex(it["target"]), text)
    _write_outbox(state, [])


class Context:
    def __init__(self, args):
        self.args = args
        self.orgstore = OrgStore(args.org)
        self.client = None
        self.sched = RealtimeScheduler()

    def org(self):
        if not self.orgstore.exists():
            sys.exit(f"no organization at {self.args.org}; run org-init first")
        return self.orgstore.load()

    def transport(self, org=None):
        server = self.args.server or (org.config.server if org else None)
        if not server:
            sys.exit("no server given (--server HOST:PORT)")
        if self.client is None:
            self.client = PigeonholeClient(*parse_endpoint(server))
        return self.client

    def node(self):
        org = self.org()
        return org, Journalist.load(self.args.state, org, self.transport(org), self.sched,
                                    org.config)


def cmd_org_init(ctx):
    a = ctx.args
    if ctx.orgstore.exists():
        sys.exit(f"organization already exists at {a.org}")
    cfg = SystemConfig(lim=a.lim, cover_rate=a.cover_rate / DAY,
                       tokens_per_epoch=a.tokens_per_epoch, security_param=a.security_param,
                       server=a.server)
    org = ctx.orgstore.create(cfg)
    if a.server:
        org.publish_params(ctx.transport(org))
    print(f"organization created; issuer key {org.keys.mpk.fingerprint()}")


def cmd_init(ctx):
    a = ctx.args
    org = ctx.org()
    if os.path.exists(os.path.join(a.state, "identity.json")):
        sys.exit(f"node state already exists in {a.state}")
    tr = ctx.transport(org)
    published = read_params(tr)
    if published is not None and published.mpk != org.config.mpk:
        sys.exit("bulletin board parameters do not match the organization's")
    try:
        j = Journalist.setup(a.name, org, tr, ctx.sched, org.config)
    except ValueError as e:
        sys.exit(str(e))
    ctx.orgstore.save(org)
    j.save(a.state)
    print(f"nym {j.nym.hex()}")


def cmd_token(ctx):
    org, j = ctx.node()
    try:
        j.fetch_tokens(ctx.args.count)
    except tokens.QuotaExceeded as e:
        print(str(e), file=sys.stderr)
    ctx.orgstore.save(org)
    j.save(ctx.args.state)
    print(f"{len(j.wallet)} unspent tokens")


def cmd_publish(ctx):
    org, j = ctx.node()
    corpus = load_corpus_dir(ctx.args.corpus)
    try:
        rec = j.publish(corpus)
    except (NodeError, tokens.QuotaExceeded) as e:
        sys.exit(str(e))
    ctx.orgstore.save(org)
    j.save(ctx.args.state)
    print(f"published {rec.N} documents, filter {len(rec.cf)} bytes")


def cmd_query(ctx):
    org, j = ctx.node()
    j.sync()
    kws = [k.strip().encode() for k in ctx.args.keywords.split(",") if k.strip()]
    try:
        qid = j.query(kws)
    except (NodeError, tokens.QuotaExceeded) as e:
        sys.exit(str(e))
    ctx.orgstore.save(org)
    j.save(ctx.args.state)
    print(f"query {qid} sent to {len(j.queries[qid].owners)} owners")


def _run_online(ctx, j, seconds, tick=None):
    """Bring the node online on the scheduler thread for ``seconds`` (None = until ^C)."""
    done = threading.Event()
    ctx.sched.start()
    ctx.sched.call_soon(j.go_online)
    if tick is not None:
        def loop():
            tick()
            ctx.sched.call_later(j.config.poll_interval, loop)
        ctx.sched.call_later(1.0, loop)
    signal.signal(signal.SIGINT, lambda *_: done.set())
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    done.wait(seconds)
    finished = threading.Event()
    ctx.sched.call_soon(lambda: (j.go_offline(), j.save(ctx.args.state), finished.set()))
    finished.wait(30)
    ctx.sched.stop()
    for e in ctx.sched.errors:
        print(f"error: {e!r}", file=sys.stderr)


def cmd_results(ctx):
    org, j = ctx.node()
    _run_online(ctx, j, ctx.args.wait)
    for qid, qs in sorted(j.queries.items()):
        print(f"query {qid}: {len(qs.reports)}/{len(qs.owners)} owners replied")
        for rep in qs.reports.values():
            print(f"  owner {rep.owner.hex()}  matching documents {rep.matches}  "
                  f"(of {len(rep.sizes)})")


def cmd_chat(ctx):
    a = ctx.args
    org, j = ctx.node()
    target = bytes.fromhex(a.target)
    if a.query is not None:
        if a.query not in j.queries or target not in j.queries[a.query].owners:
            sys.exit("unknown query or owner")
        item = {"role": "querier", "query": a.query, "target": a.target}
    else:
        if target not in j.conversations:
            sys.exit("unknown querier key; see `inbox`")
        item = {"role": "owner", "target": a.target}
    item["text"] = a.text.encode().hex()
    _write_outbox(a.state, _read_outbox(a.state) + [item])
    print("queued; the daemon sends it at the next cover firing")


def cmd_inbox(ctx):
    org, j = ctx.node()
    for qid, qs in sorted(j.queries.items()):
        for nym, msgs in qs.chats.items():
            for d, text, ts in msgs:
                print(f"query {qid} {d} {nym.hex()}: {text.decode(errors='replace')}")
    for c in j.conversations.values():
        print(f"querier {c.pk_q.hex()} (query {c.query_seq})")
        for text, ts in c.inbox:
            print(f"  in: {text.decode(errors='replace')}")


def cmd_daemon(ctx):
    org, j = ctx.node()
    _run_online(ctx, j, ctx.args.duration,
                tick=lambda: (_drain_outbox(j, ctx.args.state), j.save(ctx.args.state)))


def build_parser():
    ap = argparse.ArgumentParser(prog="datashare-node", description="Journalist node.")
    ap.add_argument("--state", default="node-state", help="node state directory")
    ap.add_argument("--org", default="org", help="organization directory")
    ap.add_argument("--server", default=None, help="communication server HOST:PORT")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("org-init", help="create the organization and publish parameters")
    p.add_argument("--lim", type=int, default=10)
    p.add_argument("--cover-rate", type=float, default=48.0, help="cover messages per day per recipient")
    p.add_argument("--tokens-per-epoch", type=int, default=50)
    p.add_argument("--security-param", type=int, default=2048)
    p.set_defaults(fn=cmd_org_init)

    p = sub.add_parser("init", help="register a journalist and create node state")
    p.add_argument("--name", required=True)
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("token", help="token operations")
    tsub = p.add_subparsers(dest="tcmd", required=True)
    f = tsub.add_parser("fetch")
    f.add_argument("--count", type=int, default=1)
    f.set_defaults(fn=cmd_token)

    p = sub.add_parser("publish")
    p.add_argument("--corpus", required=True, help="directory: one file per document, one keyword per line")
    p.set_defaults(fn=cmd_publish)

    p = sub.add_parser("query")
    p.add_argument("keywords", help="comma separated")
    p.set_defaults(fn=cmd_query)

    p = sub.add_parser("results", help="go online briefly, collect replies, print match reports")
    p.add_argument("--wait", type=float, default=10.0)
    p.set_defaults(fn=cmd_results)

    p = sub.add_parser("chat", help="queue a message to an owner (with --query) or to a querier")
    p.add_argument("target", help="owner nym hex, or querier key hex from `inbox`")
    p.add_argument("text")
    p.add_argument("--query", type=int, default=None)
    p.set_defaults(fn=cmd_chat)

    p = sub.add_parser("inbox")
    p.set_defaults(fn=cmd_inbox)

    p = sub.add_parser("daemon", help="stay online: reply to queries, cover traffic, receive")
    p.add_argument("--duration", type=float, default=None, help="seconds (default: until interrupted)")
    p.set_defaults(fn=cmd_daemon)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    ctx = Context(args)
    try:
        args.fn(ctx)
    finally:
        if ctx.client is not None:
            ctx.client.close()


if __name__ == "__main__":
    main()
