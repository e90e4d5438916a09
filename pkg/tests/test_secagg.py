import hashlib

import numpy as np
import pytest

from vfedmh import secagg
from oracles import mod_exp


P23 = secagg.TEST_GROUP_P23


# ---------------------------------------------------------------------------
# group + keys
# ---------------------------------------------------------------------------


def test_default_group_is_a_safe_prime_with_full_generator():
    sympy = pytest.importorskip("sympy")
    p, g = secagg.DEFAULT_GROUP.p, secagg.DEFAULT_GROUP.g
    assert p.bit_length() == 256 and p >= 2**255
    assert sympy.isprime(p)
    assert sympy.isprime((p - 1) // 2)
    # g generates the full group of order p-1: order divides 2q and is not 1, 2, or q
    assert pow(g, 2, p) != 1
    assert pow(g, (p - 1) // 2, p) != 1


def test_modp2048_group_is_a_safe_prime():
    sympy = pytest.importorskip("sympy")
    p = secagg.MODP_2048.p
    assert p.bit_length() == 2048
    assert sympy.isprime(p)
    assert sympy.isprime((p - 1) // 2)


def test_tiny_group_requires_test_flag():
    with pytest.raises(secagg.MaskError, match="test-only"):
        secagg.resolve_group("p23")
    assert secagg.resolve_group("p23", allow_test_groups=True) is P23


def test_degenerate_group_rejected():
    with pytest.raises(secagg.MaskError, match="degenerate"):
        secagg.GroupParams("bad", p=3, g=2)


def test_keygen_known_exponents_match_square_and_multiply():
    # fabricate keypairs with fixed secret keys and check pk via the oracle
    assert mod_exp(5, 6, 23) == 8
    assert mod_exp(5, 15, 23) == 19
    assert pow(P23.g, 6, P23.p) == 8
    assert pow(P23.g, 15, P23.p) == 19


def test_keygen_sk_one_gives_pk_g():
    pair = secagg.KeyPair(sk=1, pk=pow(P23.g, 1, P23.p))
    assert pair.pk == P23.g


def test_keygen_in_range_and_deterministic():
    for seed in range(20):
        a = secagg.keygen(P23, seed)
        b = secagg.keygen(P23, seed)
        assert a == b
        assert 1 <= a.sk <= P23.p - 2
        assert a.pk == mod_exp(P23.g, a.sk, P23.p)


def test_keygen_distinct_seeds_distinct_keys():
    pks = {secagg.keygen(secagg.DEFAULT_GROUP, s).pk for s in range(10)}
    assert len(pks) == 10


# ---------------------------------------------------------------------------
# shared keys
# ---------------------------------------------------------------------------


def test_shared_key_hand_example():
    # sk1=6 -> pk 8; sk2=15 -> pk 19; both sides land on group element 2
    assert mod_exp(19, 6, 23) == 2
    assert mod_exp(8, 15, 23) == 2
    ck_a = secagg.derive_shared(6, 19, P23)
    ck_b = secagg.derive_shared(15, 8, P23)
    assert ck_a == ck_b == hashlib.sha256(b"\x02").digest()


def test_shared_key_sk_one_hashes_peer_pk():
    pk_j = 13
    assert secagg.derive_shared(1, pk_j, P23) == hashlib.sha256(bytes([pk_j])).digest()


@pytest.mark.parametrize("group", [P23, secagg.DEFAULT_GROUP])
def test_shared_key_symmetry_100_random_pairs(group):
    for seed in range(100):
        a = secagg.keygen(group, seed * 2)
        b = secagg.keygen(group, seed * 2 + 1)
        assert secagg.derive_shared(a.sk, b.pk, group) == secagg.derive_shared(b.sk, a.pk, group)


def test_shared_key_rejects_out_of_range_pk():
    with pytest.raises(secagg.MaskError, match="outside"):
        secagg.derive_shared(5, 0, P23)
    with pytest.raises(secagg.MaskError, match="outside"):
        secagg.derive_shared(5, 23, P23)


# ---------------------------------------------------------------------------
# PRF and masks
# ---------------------------------------------------------------------------


def test_prf_stream_matches_definition():
    key = bytes(range(32))
    nonce, n = 7, 5
    stream = secagg.prf_stream(key, nonce, n)
    for i in range(n):
        digest = hashlib.sha256(key + nonce.to_bytes(8, "little") + i.to_bytes(8, "little")).digest()
        assert stream[i] == int.from_bytes(digest[:8], "little")


def _pairwise_secrets(n_parties, seed):
    keys = {k: secagg.keygen(P23, seed * 100 + k) for k in range(1, n_parties + 1)}
    return {
        k: {j: secagg.derive_shared(keys[k].sk, keys[j].pk, P23) for j in keys if j != k}
        for k in keys
    }


def test_two_party_masks_are_negatives():
    secrets = _pairwise_secrets(2, 1)
    m1 = secagg.blinding_mask(1, secrets[1], 16, nonce=3)
    m2 = secagg.blinding_mask(2, secrets[2], 16, nonce=3)
    assert ((m1 + m2) == 0).all()
    assert (m1 == np.zeros(16, dtype=np.uint64) - m2).all()


def test_single_party_mask_is_zero():
    mask = secagg.blinding_mask(1, {}, 8, nonce=0)
    assert (mask == 0).all()


@pytest.mark.parametrize("n_parties", [2, 3, 5, 8])
def test_mask_cancellation(n_parties):
    for seed in range(5):
        secrets = _pairwise_secrets(n_parties, seed)
        for nonce in (0, 1, 2**40):
            total = np.zeros(257, dtype=np.uint64)
            for k in range(1, n_parties + 1):
                total += secagg.blinding_mask(k, secrets[k], 257, nonce)
            assert (total == 0).all()


def test_masks_change_with_nonce():
    secrets = _pairwise_secrets(2, 0)
    a = secagg.blinding_mask(1, secrets[1], 64, nonce=1)
    b = secagg.blinding_mask(1, secrets[1], 64, nonce=2)
    assert (a != b).mean() > 0.9


def test_mask_rejects_self_secret():
    secrets = _pairwise_secrets(2, 0)
    with pytest.raises(secagg.MaskError, match="itself"):
        secagg.blinding_mask(1, {1: b"x" * 32}, 4, nonce=0)


# ---------------------------------------------------------------------------
# fixed point codec
# ---------------------------------------------------------------------------


def test_codec_round_trip_within_half_ulp():
    codec = secagg.FixedPointCodec(16)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1000, 1000, size=4096)
    back = codec.decode(codec.encode(x))
    assert np.abs(back - x).max() <= 0.5 / codec.scale + 1e-15


def test_codec_negative_values_wrap_correctly():
    codec = secagg.FixedPointCodec(16)
    x = np.array([-1.0, -0.5, 0.0, 0.5])
    np.testing.assert_array_equal(codec.decode(codec.encode(x)), x)


def test_codec_rejects_non_finite():
    codec = secagg.FixedPointCodec(16)
    with pytest.raises(secagg.MaskError):
        codec.encode(np.array([np.inf]))


def test_mask_embedding_zero_mask_is_plain_encoding():
    codec = secagg.FixedPointCodec(16)
    emb = np.array([1.5, -2.25, 0.0])
    out = secagg.mask_embedding(emb, np.zeros(3, dtype=np.uint64), codec, n_passive=2)
    np.testing.assert_array_equal(out, codec.encode(emb))


def test_mask_embedding_zero_embedding_is_mask():
    codec = secagg.FixedPointCodec(16)
    mask = np.array([5, 2**63, 123456789], dtype=np.uint64)
    out = secagg.mask_embedding(np.zeros(3), mask, codec, n_passive=2)
    np.testing.assert_array_equal(out, mask)


def test_mask_embedding_overflow_budget():
    codec = secagg.FixedPointCodec(16)
    mask = np.zeros(1, dtype=np.uint64)
    limit = 2.0**46 / codec.scale / 4
    secagg.mask_embedding(np.array([limit * 0.99]), mask, codec, n_passive=4)
    with pytest.raises(secagg.MaskError, match="budget"):
        secagg.mask_embedding(np.array([limit * 1.01]), mask, codec, n_passive=4)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def _masked_set(embeddings, codec, seed, nonce=5):
    n = len(embeddings)
    secrets = _pairwise_secrets(n, seed)
    return [
        secagg.mask_embedding(
            emb, secagg.blinding_mask(k, secrets[k], emb.size, nonce), codec, n
        )
        for k, emb in zip(range(1, n + 1), embeddings)
    ]


def test_aggregate_identical_embeddings():
    codec = secagg.FixedPointCodec(16)
    v = np.full(32, 1.25)
    masked = _masked_set([v, v, v], codec, seed=3)
    out = secagg.aggregate(v, masked, codec, n_parties=4)
    bound = secagg.quantization_bound(codec, 3, 4)
    assert np.abs(out - 1.25).max() <= bound


def test_aggregate_hand_example():
    codec = secagg.FixedPointCodec(16)
    masked = _masked_set([np.array([1.0]), np.array([3.0])], codec, seed=4)
    out = secagg.aggregate(np.array([2.0]), masked, codec, n_parties=3)
    assert abs(out[0] - 2.0) <= 2 / (2 * codec.scale * 3)


@pytest.mark.parametrize("seed", range(10))
def test_aggregate_matches_plain_average_oracle(seed):
    codec = secagg.FixedPointCodec(16)
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    size = int(rng.integers(1, 8 * 64))
    embeddings = [rng.uniform(-50, 50, size=size) for _ in range(k)]
    active = rng.uniform(-50, 50, size=size)
    masked = _masked_set(embeddings, codec, seed)
    out = secagg.aggregate(active, masked, codec, n_parties=k + 1)
    oracle = (active + sum(embeddings)) / (k + 1)
    assert np.abs(out - oracle).max() <= secagg.quantization_bound(codec, k, k + 1)


def test_aggregate_length_mismatch():
    codec = secagg.FixedPointCodec(16)
    with pytest.raises(secagg.MaskError, match="length"):
        secagg.aggregate(np.zeros(3), [np.zeros(3, dtype=np.uint64), np.zeros(4, dtype=np.uint64)], codec, 3)


def test_masked_value_looks_unrelated_across_nonces():
    """Fresh nonces change every masked word while the aggregate is invariant."""
    codec = secagg.FixedPointCodec(16)
    secrets = _pairwise_secrets(2, 9)
    emb = [np.linspace(-1, 1, 64), np.linspace(1, -1, 64)]
    outs, masked_words = [], []
    for nonce in (10, 11):
        masked = [
            secagg.mask_embedding(emb[k - 1], secagg.blinding_mask(k, secrets[k], 64, nonce), codec, 2)
            for k in (1, 2)
        ]
        masked_words.append(masked[0].copy())
        outs.append(secagg.aggregate(np.zeros(64), masked, codec, 3))
    assert (masked_words[0] != masked_words[1]).all()
    np.testing.assert_array_equal(outs[0], outs[1])
