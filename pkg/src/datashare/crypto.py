"""Group arithmetic, hashing, key agreement and authenticated encryption.

The group is the prime-order subgroup of Ed25519, driven through libsodium's
``ed25519`` core functions.  Group elements are 32-byte point encodings and
scalars are Python ints modulo ``ORDER``.

All randomness is drawn from an ``rng`` object exposing ``randbytes(n)``
(``random.Random`` and ``random.SystemRandom`` both qualify).  Passing a
seeded ``random.Random`` makes every key and blinding factor reproducible,
which the simulator relies on.
"""
import hashlib
import random
import struct
from dataclasses import dataclass

from nacl import bindings as _sodium
from nacl import exceptions as _nacl_exc

ORDER = 2**252 + 27742317777372353535851937790883648493
ELEMENT_SIZE = 32
SCALAR_SIZE = 32
DIGEST_SIZE = 32
AE_KEY_SIZE = 32
AE_NONCE_SIZE = 12
AE_TAG_SIZE = 16
AE_OVERHEAD = AE_NONCE_SIZE + AE_TAG_SIZE

# the identity point; libsodium's is_valid_point rejects it
IDENTITY = b"\x01" + b"\x00" * 31

_SYSTEM_RNG = random.SystemRandom()


def default_rng(rng=None):
    return _SYSTEM_RNG if rng is None else rng


class InvalidElement(ValueError):
    pass


class AuthenticationError(Exception):
    """Ciphertext failed authentication (tampered, or wrong key)."""


class MalformedCiphertext(ValueError):
    """Ciphertext is structurally unusable (too short)."""


@dataclass(frozen=True)
class GroupParams:
    group_id: str
    order: int
    element_size: int
    scalar_size: int
    security_param: int

    def to_dict(self):
        return {
            "group_id": self.group_id,
            "order": str(self.order),
            "element_size": self.element_size,
            "scalar_size": self.scalar_size,
            "security_param": self.security_param,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["group_id"], int(d["order"]), d["element_size"],
                   d["scalar_size"], d["security_param"])


PARAMS = GroupParams("ed25519-prime-order-subgroup", ORDER, ELEMENT_SIZE,
                     SCALAR_SIZE, 8 * DIGEST_SIZE)


# -- hashing -----------------------------------------------------------------

def _as_bytes(x):
    return x.encode() if isinstance(x, str) else bytes(x)


def hash_input(domain, parts):
    """The exact byte string fed to SHA-256 by :func:`hash_bytes`."""
    domain = _as_bytes(domain)
    if not domain or len(domain) > 255:
        raise ValueError("domain must be 1..255 bytes")
    out = [bytes([len(domain)]), domain]
    for p in parts:
        p = _as_bytes(p)
        out.append(struct.pack(">I", len(p)))
        out.append(p)
    return b"".join(out)


def hash_bytes(domain, parts):
    """SHA-256 over a domain tag and length-prefixed parts."""
    return hashlib.sha256(hash_input(domain, parts)).digest()


def hash_to_group(keyword):
    """Map bytes to a group element (random-oracle style, two uniform maps)."""
    h = hashlib.sha512(hash_input(b"h2g", [keyword])).digest()
    p1 = _sodium.crypto_core_ed25519_from_uniform(h[:32])
    p2 = _sodium.crypto_core_ed25519_from_uniform(h[32:])
    return _sodium.crypto_core_ed25519_add(p1, p2)


# -- scalars and elements ----------------------------------------------------

def random_scalar(rng=None):
    """Uniform nonzero scalar."""
    rng = default_rng(rng)
    while True:
        s = int.from_bytes(rng.randbytes(64), "little") % ORDER
        if s:
            return s


def scalar_inverse(s):
    if s % ORDER == 0:
        raise ValueError("zero scalar has no inverse")
    return pow(s, -1, ORDER)


def encode_scalar(s):
    return (s % ORDER).to_bytes(SCALAR_SIZE, "little")


def decode_scalar(b):
    if len(b) != SCALAR_SIZE:
        raise ValueError("bad scalar length")
    s = int.from_bytes(b, "little")
    if s >= ORDER:
        raise ValueError("scalar not reduced")
    return s


def is_element(b):
    if not isinstance(b, (bytes, bytearray)) or len(b) != ELEMENT_SIZE:
        return False
    return bytes(b) == IDENTITY or _sodium.crypto_core_ed25519_is_valid_point(bytes(b))


def decode_element(b):
    """Validate an encoded element and return it as bytes."""
    b = bytes(b)
    if not is_element(b):
        raise InvalidElement("not an element of the prime-order subgroup")
    return b


def exp(element, scalar):
    """element^scalar.  Raises InvalidElement on degenerate input or output.

    libsodium refuses non-canonical, small-order and off-subgroup points
    here, so this also validates ``element``; no separate check is needed.
    """
    s = scalar % ORDER
    if s == 0 or element == IDENTITY:
        raise InvalidElement("degenerate exponentiation")
    try:
        return _sodium.crypto_scalarmult_ed25519_noclamp(
            s.to_bytes(SCALAR_SIZE, "little"), element)
    except _nacl_exc.RuntimeError:
        raise InvalidElement("not an element of the prime-order subgroup") from None
    except (_nacl_exc.TypeError, _nacl_exc.ValueError) as e:
        raise InvalidElement(str(e)) from None


def base_exp(scalar):
    s = scalar % ORDER
    if s == 0:
        raise InvalidElement("zero scalar")
    return _sodium.crypto_scalarmult_ed25519_base_noclamp(s.to_bytes(SCALAR_SIZE, "little"))


GENERATOR = base_exp(1)


@dataclass(frozen=True)
class KeyPair:
    sk: int
    pk: bytes

    @classmethod
    def generate(cls, rng=None):
        sk = random_scalar(rng)
        return cls(sk, base_exp(sk))

    @classmethod
    def from_secret(cls, sk):
        return cls(sk, base_exp(sk))


def dh(sk, pk):
    """Shared secret g^(ab) as 32 bytes.  Rejects identity and zero inputs."""
    if not isinstance(pk, (bytes, bytearray)) or len(pk) != ELEMENT_SIZE:
        raise InvalidElement("bad public key encoding")
    return exp(bytes(pk), sk)


# -- authenticated encryption ------------------------------------------------

def ae_encrypt(key, plaintext, rng=None, aad=b""):
    """ChaCha20-Poly1305 with a random 12-byte nonce prepended."""
    if len(key) != AE_KEY_SIZE:
        raise ValueError("AE key must be 32 bytes")
    nonce = default_rng(rng).randbytes(AE_NONCE_SIZE)
    ct = _sodium.crypto_aead_chacha20poly1305_ietf_encrypt(plaintext, aad, nonce, key)
    return nonce + ct


def ae_decrypt(key, ciphertext, aad=b""):
    if len(key) != AE_KEY_SIZE:
        raise ValueError("AE key must be 32 bytes")
    if len(ciphertext) < AE_OVERHEAD:
        raise MalformedCiphertext("ciphertext shorter than nonce and tag")
    nonce, body = ciphertext[:AE_NONCE_SIZE], ciphertext[AE_NONCE_SIZE:]
    try:
        return _sodium.crypto_aead_chacha20poly1305_ietf_decrypt(body, aad, nonce, key)
    except _nacl_exc.CryptoError:
        raise AuthenticationError("authentication failed") from None
