"""Cuckoo filter (partial-key cuckoo hashing) for compressing tag sets.

No deletion and no resizing: a filter is built once from a set and then
only probed.  Fingerprint 0 marks an empty slot.
"""
import dataclasses
import hashlib
import math
import random
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"CF1"
_HEADER = struct.Struct("<3sBBIIIHQI")  # magic, b, fbits, buckets, capacity, max_evictions, load*1e4, seed, count


class CuckooCapacityError(Exception):
    pass


@dataclass(frozen=True)
class CuckooParams:
    capacity: int
    bucket_size: int = 4
    fingerprint_bits: int = 24
    max_evictions: int = 500
    load_limit: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.fingerprint_bits <= 32:
            raise ValueError("fingerprint_bits must be in 1..32")
        if self.bucket_size < 1 or self.capacity < 0:
            raise ValueError("bad cuckoo parameters")
        if not 0 < self.load_limit <= 1:
            raise ValueError("load_limit must be in (0, 1]")

    @property
    def num_buckets(self):
        need = max(1, math.ceil(self.capacity / (self.bucket_size * self.load_limit)))
        return 1 << (need - 1).bit_length()

    @property
    def fpr_bound(self):
        # upper bound 2b / 2^f from the two candidate buckets
        return 2 * self.bucket_size / 2 ** self.fingerprint_bits

    @property
    def fingerprint_bytes(self):
        return (self.fingerprint_bits + 7) // 8


# params for notification bulk filters: cheaper, FPR about 6e-5
def notification_params(capacity, seed=0):
    return CuckooParams(capacity=capacity, bucket_size=2, fingerprint_bits=16,
                        load_limit=0.8, seed=seed)


def _mix(fp, mask):
    # cheap integer hash of the fingerprint for the alternate bucket
    return ((fp * 0x5BD1E995) ^ (fp >> 7) * 0x27D4EB2F) & mask


class CuckooFilter:
    def __init__(self, params, table=None, count=0):
        self.params = params
        self.num_buckets = params.num_buckets
        self.b = params.bucket_size
        self._mask = self.num_buckets - 1
        self._fmask = (1 << params.fingerprint_bits) - 1
        self.table = table if table is not None else [0] * (self.num_buckets * self.b)
        self.count = count
        self._base = hashlib.sha256(b"\x02cf" + struct.pack(">Q", params.seed))
        self._rng = random.Random(params.seed)

    def _locate(self, item):
        h = self._base.copy()
        h.update(item)
        d = h.digest()
        i1 = int.from_bytes(d[:8], "little") & self._mask
        fp = int.from_bytes(d[8:12], "little") & self._fmask
        if fp == 0:
            fp = 1
        return fp, i1, i1 ^ _mix(fp, self._mask)

    def _put(self, i, fp):
        b = self.b
        t = self.table
        for k in range(i * b, i * b + b):
            if t[k] == 0:
                t[k] = fp
                return True
        return False

    def insert(self, item):
        fp, i1, i2 = self._locate(item)
        if self._put(i1, fp) or self._put(i2, fp):
            self.count += 1
            return
        i = self._rng.choice((i1, i2))
        for _ in range(self.params.max_evictions):
            k = i * self.b + self._rng.randrange(self.b)
            fp, self.table[k] = self.table[k], fp
            i = i ^ _mix(fp, self._mask)
            if self._put(i, fp):
                self.count += 1
                return
        raise CuckooCapacityError(
            f"insertion failed after {self.params.max_evictions} evictions "
            f"at {self.count} items; raise capacity")

    def __contains__(self, item):
        fp, i1, i2 = self._locate(item)
        b = self.b
        t = self.table
        return fp in t[i1 * b:i1 * b + b] or fp in t[i2 * b:i2 * b + b]

    def membership(self, item):
        return item in self

    def intersection(self, probes):
        return [p for p in probes if p in self]

    def __len__(self):
        return self.count

    @property
    def load(self):
        return self.count / len(self.table)

    def to_bytes(self):
        p = self.params
        head = _HEADER.pack(MAGIC, p.bucket_size, p.fingerprint_bits, self.num_buckets,
                            p.capacity, p.max_evictions, round(p.load_limit * 10000),
                            p.seed, self.count)
        fb = p.fingerprint_bytes
        arr = np.asarray(self.table, dtype="<u4").view(np.uint8).reshape(-1, 4)[:, :fb]
        return head + arr.tobytes()

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _HEADER.size:
            raise ValueError("truncated cuckoo filter")
        magic, b, fbits, nb, cap, maxev, load, seed, count = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError("bad cuckoo filter magic")
        params = CuckooParams(capacity=cap, bucket_size=b, fingerprint_bits=fbits,
                              max_evictions=maxev, load_limit=load / 10000, seed=seed)
        if params.num_buckets != nb:
            raise ValueError("bucket count inconsistent with params")
        fb = params.fingerprint_bytes
        body = data[_HEADER.size:]
        if len(body) != nb * b * fb:
            raise ValueError("cuckoo filter body has wrong length")
        raw = np.zeros((nb * b, 4), dtype=np.uint8)
        raw[:, :fb] = np.frombuffer(body, dtype=np.uint8).reshape(-1, fb)
        table = raw.view("<u4").ravel().tolist()
        return cls(params, table, count)


def compress(items, params=None, attempts=8):
    """Build a filter holding every item.  Default params size to the set.

    Near full load a placement can fail; the filter is then rebuilt with the
    next seed (recorded in the header, so readers need nothing extra).
    """
    items = list(items)
    if params is None:
        params = CuckooParams(capacity=max(1, len(items)))
    if len(items) > params.capacity:
        raise CuckooCapacityError(f"{len(items)} items exceed capacity {params.capacity}")
    for k in range(attempts):
        cf = CuckooFilter(dataclasses.replace(params, seed=params.seed + k))
        try:
            for x in items:
                cf.insert(x)
            return cf
        except CuckooCapacityError:
            if k == attempts - 1:
                raise


def membership(cf, x):
    return x in cf


def intersection(cf, probes):
    return cf.intersection(probes)
