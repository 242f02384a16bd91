# %% [markdown]
# Three journalists against a real TCP server, on wall-clock time with a
# fast cover rate so the demo finishes in seconds.

# %%
import random
import time

from datashare import tokens
from datashare.clock import RealtimeScheduler
from datashare.node import Journalist, Organization, SystemConfig
from datashare.pigeonhole import PigeonholeClient, PigeonholeServer, ServerThread

core = PigeonholeServer(feed_interval=0.2)
srv = ServerThread(core).start()
sched = RealtimeScheduler().start()
rng = random.Random(4)

cfg = SystemConfig(cover_rate=1.0, poll_interval=0.5, security_param=1024)
org = Organization(cfg, rng)
org.publish_params(PigeonholeClient("127.0.0.1", srv.port))

corpora = {
    "ana": [{b"tax", b"shell"}, {b"sport"}],
    "ben": [{b"tax", b"shell", b"bank"}],
    "eve": [{b"oil"}],
}
nodes = {}
for name, docs in corpora.items():
    j = Journalist.setup(name, org, PigeonholeClient("127.0.0.1", srv.port), sched, rng=rng)
    j.publish(docs)
    nodes[name] = j

# %% everything a node does runs on the scheduler thread
for j in nodes.values():
    sched.call_soon(j.go_online)
time.sleep(2)

box = {}
sched.call_soon(lambda: box.setdefault("q", nodes["ana"].query([b"tax", b"shell"])))
time.sleep(6)
for rep in nodes["ana"].results(box["q"]):
    owner = [n for n, j in nodes.items() if j.nym == rep.owner][0]
    print(owner, "sizes", rep.sizes, "matches", rep.matches)

# %%
for j in nodes.values():
    sched.call_soon(j.go_offline)
time.sleep(0.5)
sched.stop()
srv.stop()
print("server mailboxes", core.mailbox_count(), "issued tokens", sum(org.issuer.issued.values()))
print("scheduler errors", sched.errors)
