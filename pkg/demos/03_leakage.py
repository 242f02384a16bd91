# %% [markdown]
# How many queries does it take to pull a whole corpus out of a search
# oracle?  Fewer bits per answer means more queries.

# %%
import math
import random

from datashare import leakage as lk

rng = random.Random(1)
corpus, U = lk.random_corpus(12, 5, rng)
for d in corpus:
    print(sorted(d), "u =", lk.uniqueness(d, corpus))

# %%
o1 = lk.OneBitOracle(corpus)
got1 = lk.extract_one_bit(o1, U, ulim=3)
o2 = lk.NumDocOracle(corpus)
got2 = lk.extract_num_doc(o2, U)
o3 = lk.MSPSIOracle(corpus, lim=10)
got3 = lk.extract_mspsi(o3, U)
print("one bit   ", o1.queries, "queries,", len(got1), "documents")
print("doc count ", o2.queries, "queries,", len(got2), "documents")
print("per doc   ", o3.queries, "queries,", len(got3), "documents;",
      "bound", math.ceil(len(U) / 10))

# %% growth with the universe size, 20 corpora each
for n in (6, 8, 10, 12):
    qs = {"one_bit": [], "num_doc": [], "mspsi": []}
    for seed in range(20):
        for kind in qs:
            qs[kind].append(lk.run_trial(kind, n, 4, 3, seed)["queries_used"])
    print(n, {k: sum(v) / len(v) for k, v in qs.items()})
