"""Per-party cost counters."""
import csv
from collections import defaultdict

FIELDS = ("exponentiations", "tag_hashes", "group_hashes", "bytes_sent", "bytes_received",
          "padded_sent", "padded_received", "messages", "storage_bytes")


class CostLedger:
    """Monotone counters per party plus per-event latencies.

    Parties are free-form names ("client", "server", "j3", ...).
    """

    def __init__(self):
        self.parties = defaultdict(lambda: dict.fromkeys(FIELDS, 0))
        self.latencies = defaultdict(list)
        self.wall = {}

    def add(self, party, **counts):
        row = self.parties[party]
        for k, v in counts.items():
            if k not in row:
                raise KeyError(f"unknown counter {k!r}")
            if v < 0:
                raise ValueError("counters only grow")
            row[k] += v
        return row

    def add_ops(self, party, counter):
        """Fold in an mspsi.OpCounter."""
        self.add(party, exponentiations=counter.exponentiations,
                 tag_hashes=counter.tag_hashes, group_hashes=counter.group_hashes)

    def latency(self, kind, value):
        self.latencies[kind].append(value)

    def get(self, party, key):
        return self.parties[party][key] if party in self.parties else 0

    def total(self, key):
        return sum(r[key] for r in self.parties.values())

    def rows(self):
        for party in sorted(self.parties):
            yield dict(party=party, **self.parties[party])

    def write_csv(self, f):
        w = csv.DictWriter(f, fieldnames=("party",) + FIELDS)
        w.writeheader()
        for r in self.rows():
            w.writerow(r)

    def __repr__(self):
        return f"CostLedger({dict(self.parties)})"
