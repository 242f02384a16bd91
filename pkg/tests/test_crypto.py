import hashlib
import random
import struct

import pytest
from hypothesis import given, settings, strategies as st

from datashare import crypto

TORSION = bytes.fromhex("26e8958fc2b227b045c3f489f2ef98f0d5dfac05d3c63339b13802886d53fc05")

scalars = st.integers(min_value=1, max_value=crypto.ORDER - 1)


def _oracle_hash(domain, parts):
    # independent spelling of the encoding: len(domain) || domain || (u32 len || part)*
    buf = bytes([len(domain)]) + domain
    for p in parts:
        buf += struct.pack(">I", len(p)) + p
    return hashlib.sha256(buf).digest()


def test_hash_bytes_matches_oracle():
    for domain, parts in [(b"tag", [b"ab", b"c"]), (b"addr", []), (b"key", [b"", b"x" * 300])]:
        assert crypto.hash_bytes(domain, parts) == _oracle_hash(domain, parts)


def test_hash_is_injective_on_boundaries():
    assert crypto.hash_bytes("tag", [b"ab", b"c"]) != crypto.hash_bytes("tag", [b"a", b"bc"])
    assert crypto.hash_bytes("tag", [b"abc"]) != crypto.hash_bytes("tag", [b"ab", b"c"])
    assert crypto.hash_bytes("tag", [b""]) != crypto.hash_bytes("tag", [])


@given(st.lists(st.binary(max_size=40), max_size=4))
def test_domains_separate(parts):
    assert crypto.hash_bytes("addr", parts) != crypto.hash_bytes("key", parts)


def test_bad_domain():
    with pytest.raises(ValueError):
        crypto.hash_bytes(b"", [])
    with pytest.raises(ValueError):
        crypto.hash_bytes(b"x" * 256, [])


def test_hash_to_group_deterministic_and_valid():
    a = crypto.hash_to_group(b"Alice Smith")
    assert a == crypto.hash_to_group("Alice Smith")
    assert crypto.is_element(a) and a != crypto.IDENTITY


def test_hash_to_group_no_collisions():
    kws = [b"kw-%d" % i for i in range(10_000)]
    assert len({crypto.hash_to_group(k) for k in kws}) == len(kws)


@settings(max_examples=30, deadline=None)
@given(scalars, scalars)
def test_exponents_commute(a, b):
    h = crypto.hash_to_group(b"commute")
    assert crypto.exp(crypto.exp(h, a), b) == crypto.exp(crypto.exp(h, b), a)


@settings(max_examples=30, deadline=None)
@given(scalars, st.binary(min_size=1, max_size=20))
def test_inverse_undoes_exp(c, kw):
    h = crypto.hash_to_group(kw)
    assert crypto.exp(crypto.exp(h, c), crypto.scalar_inverse(c)) == h


def test_dh_symmetric_and_distinct():
    rng = random.Random(5)
    kps = [crypto.KeyPair.generate(rng) for _ in range(3)]
    s01 = crypto.dh(kps[0].sk, kps[1].pk)
    assert s01 == crypto.dh(kps[1].sk, kps[0].pk)
    secrets = {crypto.dh(kps[i].sk, kps[j].pk) for i, j in [(0, 1), (0, 2), (1, 2)]}
    assert len(secrets) == 3


@pytest.mark.parametrize("bad", [TORSION, crypto.IDENTITY, bytes(32), b"\xff" * 32, b"\x01" * 31])
def test_invalid_points_rejected(bad):
    with pytest.raises(crypto.InvalidElement):
        crypto.dh(7, bad)
    assert not crypto.is_element(bad) or bad == crypto.IDENTITY


def test_off_subgroup_point_rejected():
    from nacl import bindings
    p = crypto.base_exp(12345)
    mixed = bindings.crypto_core_ed25519_add(p, TORSION)
    assert not crypto.is_element(mixed)
    with pytest.raises(crypto.InvalidElement):
        crypto.exp(mixed, 3)
    with pytest.raises(crypto.InvalidElement):
        crypto.decode_element(mixed)


def test_zero_scalar_rejected():
    with pytest.raises(crypto.InvalidElement):
        crypto.exp(crypto.GENERATOR, crypto.ORDER)
    with pytest.raises(ValueError):
        crypto.scalar_inverse(0)


def test_random_scalar_seeded():
    a = crypto.random_scalar(random.Random(1))
    assert a == crypto.random_scalar(random.Random(1))
    assert 0 < a < crypto.ORDER


@given(scalars)
def test_scalar_encoding_roundtrip(s):
    assert crypto.decode_scalar(crypto.encode_scalar(s)) == s


def test_unreduced_scalar_rejected():
    with pytest.raises(ValueError):
        crypto.decode_scalar(crypto.ORDER.to_bytes(32, "little"))


def test_ae_roundtrip_and_tamper():
    key = bytes(range(32))
    ct = crypto.ae_encrypt(key, b"hello", random.Random(0), aad=b"hdr")
    assert len(ct) == 5 + crypto.AE_OVERHEAD == 5 + 28
    assert crypto.ae_decrypt(key, ct, aad=b"hdr") == b"hello"
    flipped = ct[:-1] + bytes([ct[-1] ^ 1])
    with pytest.raises(crypto.AuthenticationError):
        crypto.ae_decrypt(key, flipped, aad=b"hdr")
    with pytest.raises(crypto.AuthenticationError):
        crypto.ae_decrypt(key, ct, aad=b"other")
    with pytest.raises(crypto.MalformedCiphertext):
        crypto.ae_decrypt(key, ct[:10])


def test_group_params_roundtrip():
    d = crypto.PARAMS.to_dict()
    assert crypto.GroupParams.from_dict(d) == crypto.PARAMS
    assert int(d["order"]) == 2**252 + 27742317777372353535851937790883648493
