"""Ways to tamper with an AuthorizedMessage, for the forgery tests."""
import struct

from datashare.tokens import AuthorizedMessage

FIELDS = ("message", "sigma", "pk_T", "C")


def _flip(b, rng):
    if not b:
        return b"\x00"
    i = rng.randrange(len(b))
    return b[:i] + bytes([b[i] ^ (1 << rng.randrange(8))]) + b[i + 1:]


def mutate(bundle, rng, other):
    """One random mutation of ``bundle``; ``other`` is a second valid bundle."""
    kind = rng.randrange(7)
    d = {f: getattr(bundle, f) for f in FIELDS}
    if kind == 0:
        f = rng.choice(FIELDS)
        d[f] = _flip(d[f], rng)
    elif kind == 1:
        # splice one field from another valid bundle
        f = rng.choice(FIELDS)
        d[f] = getattr(other, f)
    elif kind == 2:
        f = rng.choice(FIELDS)
        d[f] = d[f][:rng.randrange(len(d[f]) + 1)] if d[f] else b"x"
    elif kind == 3:
        f = rng.choice(FIELDS)
        d[f] = rng.randbytes(max(1, len(d[f])))
    elif kind == 4:
        # shift the epoch inside C
        ep = struct.unpack(">Q", d["C"][:8])[0]
        d["C"] = struct.pack(">Q", ep + rng.choice((-1, 1, 2, 1000))) + d["C"][8:]
    elif kind == 5:
        d["message"] = d["message"] + b"!"
    else:
        # pair our pk_T and sigma with the other bundle's credential
        d["C"] = other.C
    m = AuthorizedMessage(**d)
    if m == bundle:
        return mutate(bundle, rng, other)
    return m
