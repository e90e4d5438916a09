"""Pairwise blinding masks with exact cancellation over a 64-bit ring.

Key agreement runs in a classic prime-order multiplicative group: each passive
party k holds a secret s_k and publishes g^s_k mod p; any pair (k, j) derives
the same 256-bit shared key by hashing (g^s_j)^s_k = (g^s_k)^s_j.

Masking itself does not happen in Z_p.  Embeddings are encoded as fixed-point
integers modulo 2^64 and each party adds a pseudorandom ring vector built from
its pairwise keys with antisymmetric signs: party k adds the (k, j) stream when
k < j and subtracts it when k > j.  Summed over all passive parties the
streams cancel element by element, exactly, because the ring wraps around.
A fresh nonce per protocol round keys every stream so masks never repeat.

The active party only ever sees masked ring vectors from the passives; its own
embedding stays local and is added in plain float after unmasking the sum.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

RING_BITS = 64
_SIGN_BUDGET_BITS = 46  # |embedding| * scale * n_parties must stay below 2^46


class MaskError(ValueError):
    """Raised for malformed key material or out-of-budget embeddings."""


# ---------------------------------------------------------------------------
# Group parameters and key agreement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupParams:
    name: str
    p: int
    g: int

    def __post_init__(self):
        if self.p < 5:
            raise MaskError(f"degenerate group: p={self.p}")
        if not 2 <= self.g <= self.p - 1:
            raise MaskError(f"generator {self.g} outside [2, p-1]")

    @property
    def element_bytes(self) -> int:
        return (self.p.bit_length() + 7) // 8


# Smallest safe prime above 2^255; g=5 generates the full group of order p-1
# (5^2 != 1 and 5^((p-1)/2) != 1 mod p, checked in the test suite).
DEFAULT_GROUP = GroupParams(
    "safe256",
    p=0x800000000000000000000000000000000000000000000000000000000002FF7F,
    g=5,
)

# RFC 3526 group 14.  Its conventional generator 2 spans the prime-order
# subgroup of index 2, not the full group; fine for key agreement.
MODP_2048 = GroupParams(
    "modp2048",
    p=int(
        "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
        "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
        "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
        "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
        "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
        "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
        "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
        "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
        16,
    ),
    g=2,
)

# Tiny group for hand-checkable tests only; requires the explicit test flag.
TEST_GROUP_P23 = GroupParams("p23", p=23, g=5)

GROUPS = {g.name: g for g in (DEFAULT_GROUP, MODP_2048, TEST_GROUP_P23)}


def resolve_group(name: str, allow_test_groups: bool = False) -> GroupParams:
    try:
        group = GROUPS[name]
    except KeyError:
        raise MaskError(f"unknown group {name!r}; choose from {sorted(GROUPS)}")
    if group.p.bit_length() < 255 and not allow_test_groups:
        raise MaskError(f"group {name!r} is test-only; set the test-mode flag to use it")
    return group


@dataclass(frozen=True)
class KeyPair:
    sk: int
    pk: int


def _drbg_int(seed_material: bytes, upper: int) -> int:
    """Uniform integer in [0, upper) from a SHA-256 counter stream.

    Rejection sampling over the minimal byte width keeps the draw unbiased.
    """
    nbytes = (upper.bit_length() + 7) // 8
    excess_bits = nbytes * 8 - upper.bit_length()
    counter = 0
    while True:
        block = b""
        while len(block) < nbytes:
            block += hashlib.sha256(seed_material + counter.to_bytes(8, "little")).digest()
            counter += 1
        candidate = int.from_bytes(block[:nbytes], "big") >> excess_bits
        if candidate < upper:
            return candidate


def keygen(group: GroupParams, seed: bytes | int) -> KeyPair:
    """Draw a secret key in [1, p-2] and its public key g^sk mod p."""
    if group.p < 5:
        raise MaskError(f"degenerate group: p={group.p}")
    if isinstance(seed, int):
        seed = seed.to_bytes(16, "little", signed=True)
    sk = 1 + _drbg_int(b"keygen" + seed, group.p - 2)
    return KeyPair(sk=sk, pk=pow(group.g, sk, group.p))


def encode_group_element(x: int) -> bytes:
    """Minimal big-endian byte encoding (no leading zero bytes)."""
    return x.to_bytes(max(1, (x.bit_length() + 7) // 8), "big")


def derive_shared(sk_k: int, pk_j: int, group: GroupParams) -> bytes:
    """Shared 256-bit key: SHA-256 of the pairwise group element.

    Both directions hash the same element, so derive_shared(sk_k, pk_j) equals
    derive_shared(sk_j, pk_k) bit for bit.
    """
    if not 2 <= pk_j <= group.p - 1:
        raise MaskError(f"public key {pk_j} outside [2, p-1]")
    element = pow(pk_j, sk_k, group.p)
    return hashlib.sha256(encode_group_element(element)).digest()


# ---------------------------------------------------------------------------
# Pseudorandom ring streams and masks
# ---------------------------------------------------------------------------


def prf_stream(key: bytes, nonce: int, n: int) -> np.ndarray:
    """n ring elements; element i is the first 8 bytes (little-endian) of
    SHA-256(key || nonce as 8-byte LE || i as 8-byte LE)."""
    base = hashlib.sha256(key + (nonce & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little"))
    out = bytearray(8 * n)
    for i in range(n):
        h = base.copy()
        h.update(i.to_bytes(8, "little"))
        out[8 * i : 8 * i + 8] = h.digest()[:8]
    return np.frombuffer(bytes(out), dtype="<u8").copy()


def blinding_mask(k: int, secrets: dict[int, bytes], size: int, nonce: int) -> np.ndarray:
    """Party k's mask: signed sum of pairwise PRF streams, + for k<j, - for k>j.

    ``secrets`` maps every other passive party index j (1-based) to the shared
    key with that party.  Over all passive parties the masks sum to zero in
    the ring for any nonce, because each pair contributes one stream with both
    signs.  An empty ``secrets`` (single passive party) yields a zero mask.
    """
    mask = np.zeros(size, dtype=np.uint64)
    for j, key in sorted(secrets.items()):
        if j == k:
            raise MaskError(f"party {k} holds a shared secret with itself")
        stream = prf_stream(key, nonce, size)
        if k < j:
            mask += stream
        else:
            mask -= stream
    return mask


# ---------------------------------------------------------------------------
# Fixed-point ring codec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedPointCodec:
    """Reals encoded as round(x * 2^scale_bits) in two's complement mod 2^64."""

    scale_bits: int = 16

    def __post_init__(self):
        if not 1 <= self.scale_bits <= 52:
            raise MaskError("scale_bits must lie in [1, 52]")

    @property
    def scale(self) -> float:
        return float(1 << self.scale_bits)

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if not np.isfinite(x).all():
            raise MaskError("cannot encode non-finite values")
        scaled = np.rint(x * self.scale)
        if np.abs(scaled).max(initial=0.0) >= 2.0**62:
            raise MaskError("values too large for the fixed-point range")
        return scaled.astype(np.int64).view(np.uint64)

    def decode(self, ring: np.ndarray) -> np.ndarray:
        return np.asarray(ring, dtype=np.uint64).view(np.int64).astype(np.float64) / self.scale


def mask_embedding(
    embedding: np.ndarray,
    mask: np.ndarray,
    codec: FixedPointCodec,
    n_passive: int,
) -> np.ndarray:
    """Encode a local embedding and add the blinding mask in the ring.

    Enforces the overflow budget |E| <= 2^46 / scale / K so that the unmasked
    ring sum of all passive embeddings stays well inside the ring.
    """
    flat = np.asarray(embedding, dtype=np.float64).reshape(-1)
    if mask.shape != flat.shape:
        raise MaskError(f"mask length {mask.shape} != embedding length {flat.shape}")
    budget = 2.0**_SIGN_BUDGET_BITS / codec.scale / max(1, n_passive)
    peak = np.abs(flat).max(initial=0.0)
    if peak > budget:
        raise MaskError(
            f"embedding magnitude {peak:.3g} exceeds the overflow budget {budget:.3g} "
            f"for {n_passive} parties at scale 2^{codec.scale_bits}"
        )
    return codec.encode(flat) + mask


def aggregate(
    active_embedding: np.ndarray,
    masked: list[np.ndarray],
    codec: FixedPointCodec,
    n_parties: int,
) -> np.ndarray:
    """Average the active embedding with the unmasked sum of passive ones.

    The ring sum of the masked vectors equals the sum of the encoded
    embeddings because the masks cancel exactly; the only deviation from a
    plain float average is fixed-point quantization, at most
    K / (2 * scale * C) per element.
    """
    if not masked:
        raise MaskError("need at least one masked embedding")
    length = masked[0].shape[0]
    total = np.zeros(length, dtype=np.uint64)
    for vec in masked:
        if vec.shape != (length,):
            raise MaskError(f"ring vector length {vec.shape} != {length}")
        total += np.asarray(vec, dtype=np.uint64)
    active = np.asarray(active_embedding, dtype=np.float64).reshape(-1)
    if active.shape != (length,):
        raise MaskError(f"active embedding length {active.shape} != {length}")
    return (codec.decode(total) + active) / float(n_parties)


def quantization_bound(codec: FixedPointCodec, n_passive: int, n_parties: int) -> float:
    return n_passive / (2.0 * codec.scale * n_parties)
