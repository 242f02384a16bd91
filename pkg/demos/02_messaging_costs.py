# %% [markdown]
# Cover traffic: latency against bandwidth, and how the bill grows with the
# number of journalists.  Writes messaging.dat and sweep.dat for gnuplot.

# %%
import numpy as np

from datashare.simbench import cli
from datashare.simbench import messaging as msim

rates = [1, 2, 4, 8, 16, 32, 48, 96]
rows = []
for rate in rates:
    lat = msim.latency_summary(msim.simulate_latency(rate, 20_000, seed=0), rate)
    bw = msim.BandwidthModel(1000, rate).expected_bytes()
    rows.append({"rate": rate, "mean_min": round(lat["mean_min"], 2),
                 "p95_min": round(lat["p95_min"], 2), "mb_day": round(bw["total"] / 1e6, 3)})
    print(rows[-1])
cli.write_dat(rows, "messaging.dat")

# %% where the bytes go at 4 messages/day
b = msim.BandwidthModel(1000, 4).expected_bytes()
for k, v in b.items():
    print(f"{k:18s} {v / 1e6:8.3f} MB")

# %% population sweep: envelopes scale as N^2 overall, notifications faster
sweep = msim.population_sweep([250, 500, 1000, 2000], 4)
cli.write_dat(sweep, "sweep.dat")
print(msim.sweep_exponents(sweep))

# %% server storage for a week of mailboxes at 48/day
print("storage GB", msim.BandwidthModel(1000, 48).storage_bytes(7) / 1e9)

# %% a real message rides on a cover slot: compare what the server sees
r0 = msim.run_cover_world(1, False, days=1)
r1 = msim.run_cover_world(1, True, days=1)
t0 = np.array([t for t, _, _ in r0["sender_puts"]])
t1 = np.array([t for t, _, _ in r1["sender_puts"]])
print("same send times:", np.array_equal(t0, t1), "delivered:", r1["received"])
