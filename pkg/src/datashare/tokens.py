"""One-time anonymous authorization tokens.

A token is an ephemeral Ed25519 key pair plus the issuer's blind signature
C on (epoch, pk_T).  Spending a token signs a message with sk_T; verifiers
check sigma, check C under the issuer's public key, and reject any pk_T they
have already seen.

The blind signature is RSA full-domain-hash with multiplicative blinding.
The issuer only ever sees the blinded value m' = H(m) r^e mod n and returns
s' = m'^d; the user unblinds with r^-1.  Prime generation draws from the
supplied rng so seeded simulations get reproducible issuer keys.
"""
import hashlib
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

import gmpy2
from nacl import exceptions as _nacl_exc
from nacl.signing import SigningKey, VerifyKey

from .crypto import default_rng
from .wire import pack_fields, unpack_fields

DAY = 86400.0
E = 65537


class QuotaExceeded(Exception):
    def __init__(self, retry_after):
        super().__init__(f"token quota exhausted; next epoch in {retry_after:.0f} s")
        self.retry_after = retry_after


class TokenSpent(Exception):
    pass


class NotRegistered(Exception):
    pass


class Verdict(Enum):
    ACCEPT = "accept"
    BAD_SIGNATURE = "bad_signature"
    BAD_TOKEN = "bad_token"
    EXPIRED = "expired"
    REPLAY = "replay"
    MALFORMED = "malformed"

    def __bool__(self):
        return self is Verdict.ACCEPT


@dataclass(frozen=True)
class RateLimitPolicy:
    tokens_per_epoch: int = 50
    epoch_length: float = 30 * DAY
    # tokens stay spendable for this many epochs after their own
    max_age_epochs: int = 1

    def epoch_of(self, t):
        return int(t // self.epoch_length)

    def epoch_end(self, epoch):
        return (epoch + 1) * self.epoch_length


# -- RSA blind signatures ----------------------------------------------------

def _random_prime(bits, rng):
    while True:
        cand = int.from_bytes(rng.randbytes(bits // 8), "big")
        cand |= (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(cand))
        if p.bit_length() == bits and (p - 1) % E:
            return p


@dataclass(frozen=True)
class BlindPublicKey:
    n: int
    e: int = E

    @property
    def size(self):
        return (self.n.bit_length() + 7) // 8

    def to_bytes(self):
        return pack_fields([self.n.to_bytes(self.size, "big"), self.e.to_bytes(4, "big")])

    @classmethod
    def from_bytes(cls, data):
        n, e = unpack_fields(data, 2)
        return cls(int.from_bytes(n, "big"), int.from_bytes(e, "big"))

    def fingerprint(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]


@dataclass(frozen=True)
class IssuerKeys:
    mpk: BlindPublicKey
    d: int
    p: int
    q: int

    @property
    def msk(self):
        return (self.d, self.p, self.q)

    def to_dict(self):
        return {"n": hex(self.mpk.n), "e": self.mpk.e, "d": hex(self.d),
                "p": hex(self.p), "q": hex(self.q)}

    @classmethod
    def from_dict(cls, d):
        return cls(BlindPublicKey(int(d["n"], 16), d["e"]), int(d["d"], 16),
                   int(d["p"], 16), int(d["q"], 16))


def setup(security_param=2048, rng=None):
    """Fresh issuer keys with a ``security_param``-bit modulus."""
    rng = default_rng(rng)
    half = security_param // 2
    while True:
        p, q = _random_prime(half, rng), _random_prime(half, rng)
        if p == q:
            continue
        n = p * q
        if n.bit_length() != security_param:
            continue
        d = int(gmpy2.invert(E, (p - 1) * (q - 1)))
        return IssuerKeys(BlindPublicKey(n, E), d, p, q)


def _fdh(mpk, message):
    """Full-domain hash of ``message`` into Z_n."""
    size = mpk.size
    h = hashlib.shake_256(b"datashare-fdh" + struct.pack(">H", size) + message).digest(size + 16)
    return int.from_bytes(h, "big") % mpk.n


def token_message(epoch, pk_T):
    return struct.pack(">Q", epoch) + pk_T


def bs_verify(mpk, C, message):
    if not 0 < C < mpk.n:
        return False
    return int(gmpy2.powmod(C, mpk.e, mpk.n)) == _fdh(mpk, message)


@dataclass
class BlindingState:
    r_inv: int
    message: bytes


def bs_blind(mpk, message, rng=None):
    """User side, first move: returns (m' bytes, state)."""
    rng = default_rng(rng)
    while True:
        r = int.from_bytes(rng.randbytes(mpk.size + 16), "big") % mpk.n
        if r > 1 and gmpy2.gcd(r, mpk.n) == 1:
            break
    blinded = (_fdh(mpk, message) * int(gmpy2.powmod(r, mpk.e, mpk.n))) % mpk.n
    return blinded.to_bytes(mpk.size, "big"), BlindingState(int(gmpy2.invert(r, mpk.n)), message)


def bs_sign_blinded(keys, blinded):
    """Issuer side: s' = m'^d, using CRT."""
    m = int.from_bytes(blinded, "big")
    if not 0 < m < keys.mpk.n:
        raise ValueError("blinded value out of range")
    p, q, d = keys.p, keys.q, keys.d
    sp = int(gmpy2.powmod(m, d % (p - 1), p))
    sq = int(gmpy2.powmod(m, d % (q - 1), q))
    h = (int(gmpy2.invert(q, p)) * (sp - sq)) % p
    return (sq + h * q).to_bytes(keys.mpk.size, "big")


def bs_unblind(mpk, signed, state):
    s = (int.from_bytes(signed, "big") * state.r_inv) % mpk.n
    if not bs_verify(mpk, s, state.message):
        raise ValueError("issuer returned an invalid blind signature")
    return s


# -- tokens ------------------------------------------------------------------

@dataclass
class Token:
    sk_T: bytes  # 32-byte Ed25519 seed
    pk_T: bytes
    C: bytes     # epoch (8 bytes) || RSA signature
    epoch: int
    spent: bool = False

    def to_dict(self):
        return {"sk_T": self.sk_T.hex(), "pk_T": self.pk_T.hex(), "C": self.C.hex(),
                "epoch": self.epoch, "spent": self.spent}

    @classmethod
    def from_dict(cls, d):
        return cls(bytes.fromhex(d["sk_T"]), bytes.fromhex(d["pk_T"]),
                   bytes.fromhex(d["C"]), d["epoch"], d.get("spent", False))


def encode_credential(epoch, sig, mpk):
    return struct.pack(">Q", epoch) + sig.to_bytes(mpk.size, "big")


def decode_credential(C):
    if len(C) < 9:
        raise ValueError("credential too short")
    return struct.unpack(">Q", C[:8])[0], int.from_bytes(C[8:], "big")


class Issuer:
    """The organization's token endpoint: keys, registrations and quotas.

    ``transcript`` records every message the issuer receives or sends, which
    is what the blindness tests inspect.
    """

    def __init__(self, keys, policy=None, clock=time.time):
        self.keys = keys
        self.policy = policy or RateLimitPolicy()
        self.clock = clock
        self.registered = set()
        self.issued = {}
        self.transcript = []
        self._lock = threading.Lock()

    @property
    def mpk(self):
        return self.keys.mpk

    def register(self, journalist_id):
        with self._lock:
            if journalist_id in self.registered:
                raise ValueError(f"journalist {journalist_id!r} already registered")
            self.registered.add(journalist_id)

    def current_epoch(self):
        return self.policy.epoch_of(self.clock())

    def sign_blinded(self, journalist_id, blinded):
        with self._lock:
            if journalist_id not in self.registered:
                raise NotRegistered(journalist_id)
            now = self.clock()
            epoch = self.policy.epoch_of(now)
            key = (journalist_id, epoch)
            used = self.issued.get(key, 0)
            if used >= self.policy.tokens_per_epoch:
                raise QuotaExceeded(self.policy.epoch_end(epoch) - now)
            self.issued[key] = used + 1
            signed = bs_sign_blinded(self.keys, blinded)
            self.transcript.append(("recv", journalist_id, blinded))
            self.transcript.append(("send", journalist_id, signed))
            return signed

    def remaining(self, journalist_id):
        key = (journalist_id, self.current_epoch())
        return self.policy.tokens_per_epoch - self.issued.get(key, 0)


def issue(journalist_id, issuer, rng=None):
    """Run both sides of token issuance and return the journalist's Token."""
    rng = default_rng(rng)
    sk = SigningKey(rng.randbytes(32))
    pk_T = bytes(sk.verify_key)
    epoch = issuer.current_epoch()
    msg = token_message(epoch, pk_T)
    blinded, state = bs_blind(issuer.mpk, msg, rng)
    signed = issuer.sign_blinded(journalist_id, blinded)
    sig = bs_unblind(issuer.mpk, signed, state)
    return Token(bytes(sk), pk_T, encode_credential(epoch, sig, issuer.mpk), epoch)


@dataclass(frozen=True)
class AuthorizedMessage:
    message: bytes
    sigma: bytes
    pk_T: bytes
    C: bytes

    def to_bytes(self):
        return pack_fields([self.message, self.sigma, self.pk_T, self.C])

    @classmethod
    def from_bytes(cls, data):
        return cls(*unpack_fields(data, 4))


def authorize(message, token):
    if token.spent:
        raise TokenSpent("token already used")
    sigma = SigningKey(token.sk_T).sign(message).signature
    token.spent = True
    return AuthorizedMessage(message, sigma, token.pk_T, token.C)


class SpendRegistry:
    """Spent pk_T values, partitioned by token epoch.

    With ``path`` set, each epoch is an append-only file ``epoch-<n>.log``
    holding one ``<pk_T hex> <first-seen>`` line per accepted token.
    """

    def __init__(self, path=None):
        self.path = path
        self.seen = {}
        self._lock = threading.Lock()
        if path:
            os.makedirs(path, exist_ok=True)
            for name in sorted(os.listdir(path)):
                if name.startswith("epoch-") and name.endswith(".log"):
                    ep = int(name[6:-4])
                    part = self.seen.setdefault(ep, {})
                    with open(os.path.join(path, name)) as f:
                        for line in f:
                            pk, ts = line.split()
                            part.setdefault(bytes.fromhex(pk), float(ts))

    def __contains__(self, pk_T):
        return any(pk_T in part for part in self.seen.values())

    def check_and_record(self, epoch, pk_T, now):
        with self._lock:
            part = self.seen.setdefault(epoch, {})
            if pk_T in part:
                return False
            part[pk_T] = now
            if self.path:
                with open(os.path.join(self.path, f"epoch-{epoch}.log"), "a") as f:
                    f.write(f"{pk_T.hex()} {now}\n")
                    f.flush()
                    os.fsync(f.fileno())
            return True

    def prune(self, oldest_live_epoch):
        """Drop partitions for epochs whose tokens can no longer verify."""
        with self._lock:
            for ep in [e for e in self.seen if e < oldest_live_epoch]:
                del self.seen[ep]
                if self.path:
                    try:
                        os.remove(os.path.join(self.path, f"epoch-{ep}.log"))
                    except FileNotFoundError:
                        pass

    def compact(self):
        """Rewrite each epoch file without duplicate lines."""
        if not self.path:
            return
        with self._lock:
            for ep, part in self.seen.items():
                tmp = os.path.join(self.path, f"epoch-{ep}.log.tmp")
                with open(tmp, "w") as f:
                    for pk, ts in part.items():
                        f.write(f"{pk.hex()} {ts}\n")
                os.replace(tmp, os.path.join(self.path, f"epoch-{ep}.log"))


def check_bundle(bundle, mpk, policy=None, now=None):
    """Stateless checks.  Returns (Verdict, epoch)."""
    policy = policy or RateLimitPolicy()
    try:
        vk = VerifyKey(bundle.pk_T)
        vk.verify(bundle.message, bundle.sigma)
    except (_nacl_exc.BadSignatureError, _nacl_exc.ValueError, _nacl_exc.TypeError,
            ValueError, TypeError):
        return Verdict.BAD_SIGNATURE, None
    try:
        epoch, sig = decode_credential(bundle.C)
    except ValueError:
        return Verdict.MALFORMED, None
    if len(bundle.C) != 8 + mpk.size or not bs_verify(mpk, sig, token_message(epoch, bundle.pk_T)):
        return Verdict.BAD_TOKEN, epoch
    if now is not None:
        cur = policy.epoch_of(now)
        if epoch > cur or epoch < cur - policy.max_age_epochs:
            return Verdict.EXPIRED, epoch
    return Verdict.ACCEPT, epoch


def verify_authorized(bundle, mpk, registry, policy=None, now=None):
    """Full check: sigma, C, epoch window, then atomic replay check-and-record."""
    if isinstance(bundle, (bytes, bytearray)):
        try:
            bundle = AuthorizedMessage.from_bytes(bytes(bundle))
        except ValueError:
            return Verdict.MALFORMED
    verdict, epoch = check_bundle(bundle, mpk, policy, now)
    if not verdict:
        return verdict
    if not registry.check_and_record(epoch, bundle.pk_T, time.time() if now is None else now):
        return Verdict.REPLAY
    return Verdict.ACCEPT


@dataclass
class Wallet:
    tokens: list = field(default_factory=list)

    def add(self, token):
        self.tokens.append(token)

    def fresh(self):
        return [t for t in self.tokens if not t.spent]

    def take(self):
        for t in self.tokens:
            if not t.spent:
                return t
        raise TokenSpent("no unspent tokens in wallet")

    def __len__(self):
        return len(self.fresh())
