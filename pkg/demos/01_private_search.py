# %% [markdown]
# Multi-set PSI by hand: one owner, one querier, no network.

# %%
import random

from datashare import cuckoo, mspsi
from datashare.node import SystemConfig

rng = random.Random(0)
docs = [
    {b"acme", b"offshore", b"panama"},
    {b"acme", b"election"},
    {b"weather"},
]

# %% the owner precomputes tags once and publishes a compressed filter
key = mspsi.ServerKey.generate(rng)
ops = mspsi.OpCounter()
tc = mspsi.precompute(docs, key, ops)
cf = cuckoo.compress(sorted(tc.tags), SystemConfig().cuckoo_params(len(tc)))
print("tags", len(tc), "filter bytes", len(cf.to_bytes()), "exponentiations", ops.exponentiations)

# %% the querier blinds, padded with random fillers to 10 keywords
real = [b"acme", b"offshore"]
padded = real + [rng.randbytes(32) for _ in range(8)]
q, secret = mspsi.blind(padded, rng, real_count=len(real))
print("query bytes", len(q.to_bytes()))

# %% owner replies with the blinded elements raised to its key
r = mspsi.reply(q, key)

# %% querier learns per-document intersection sizes, nothing else
res = mspsi.process(r, secret, cf, doc_count=len(docs))
print("sizes", res.sizes, "full matches", res.matches)
