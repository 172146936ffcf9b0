"""Signing, hashing, and t-of-n threshold signatures.

Single-party keys use Ed25519 (via the ``cryptography`` package). The
threshold scheme is a trusted-dealer Shamir sharing of an Ed25519 secret
scalar: any t shares aggregate partial signatures into a plain Ed25519
signature, so ``verify`` is one operation for both kinds and costs the
same either way. Signing is deterministic (nonces are derived by hashing),
which keeps seeded simulation runs byte-reproducible.

Canonical encodings (embedded in transactions and chain files):
  public key  = scheme byte || 32-byte Ed25519 public key   (33 bytes)
  signature   = scheme byte || 64-byte Ed25519 signature    (65 bytes)
  digest      = hash-id byte || 32-byte SHA-256 output      (33 bytes)
"""

from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass
from random import Random
from typing import Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

SCHEME_STANDARD = 0x01
SCHEME_THRESHOLD = 0x02
HASH_SHA256 = 0x01

PUBLIC_KEY_LEN = 33
SIGNATURE_LEN = 65
DIGEST_LEN = 33

SUPPORTED_SECURITY_PARAMS = (128,)

_NONCE_DOMAIN = b"gridledger/threshold-nonce/v1"


class CryptoError(ValueError):
    """Base class for signing/keying errors."""


class UnsupportedParameterError(CryptoError):
    pass


class MalformedKeyError(CryptoError):
    pass


class ThresholdParameterError(CryptoError):
    pass


class InsufficientSharesError(CryptoError):
    """Fewer shares than the scheme threshold were supplied."""


class MixedSharesError(CryptoError):
    """Shares from different dealer runs were mixed in one signing call."""


@dataclass(frozen=True, slots=True)
class KeyPair:
    secret_key: bytes
    public_key: bytes
    scheme_id: int


@dataclass(frozen=True, slots=True)
class KeyShare:
    """One member's slice of a shared signing key.

    ``nonce_seed`` is private per-share entropy used to derive signing
    nonces; it never leaves the share holder.
    """

    index: int
    scalar: int
    nonce_seed: bytes
    group_public_key: bytes
    threshold: int


@dataclass(frozen=True, slots=True)
class ThresholdKeyMaterial:
    """Dealer output: the shared public key and the issued shares.

    The dealer's reconstruction secret is not retained anywhere in this
    structure; recovering it requires ``threshold`` distinct shares.
    """

    shared_public_key: bytes
    shares: tuple[KeyShare, ...]
    threshold: int
    member_count: int


def _random_bytes(rng: Random | None, n: int) -> bytes:
    if rng is None:
        return secrets.token_bytes(n)
    return rng.randbytes(n)


def keygen(security_param: int = 128, rng: Random | None = None) -> KeyPair:
    """Generate a fresh single-party signing key pair.

    Pass a seeded ``random.Random`` for reproducible simulation keys;
    with ``rng=None`` the key is drawn from OS randomness.
    """
    if security_param not in SUPPORTED_SECURITY_PARAMS:
        raise UnsupportedParameterError(
            f"security parameter {security_param} not supported; "
            f"choose one of {SUPPORTED_SECURITY_PARAMS}"
        )
    seed = _random_bytes(rng, 32)
    priv = Ed25519PrivateKey.from_private_bytes(seed)
    raw_pk = priv.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return KeyPair(
        secret_key=bytes([SCHEME_STANDARD]) + seed,
        public_key=bytes([SCHEME_STANDARD]) + raw_pk,
        scheme_id=SCHEME_STANDARD,
    )


def sign(secret_key: bytes, message: bytes) -> bytes:
    """Sign ``message``; output verifies under the matching public key.

    Ed25519 signing is deterministic: the same key and message always
    produce the same signature bytes.
    """
    if (
        not isinstance(secret_key, (bytes, bytearray))
        or len(secret_key) != 33
        or secret_key[0] != SCHEME_STANDARD
    ):
        raise MalformedKeyError("secret key must be 33 bytes with a standard scheme byte")
    priv = Ed25519PrivateKey.from_private_bytes(bytes(secret_key[1:]))
    return bytes([SCHEME_STANDARD]) + priv.sign(bytes(message))


_VERIFY_CACHE: dict[tuple[bytes, bytes, bytes], bool] = {}
_VERIFY_CACHE_MAX = 1 << 17


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is valid for ``message`` under ``public_key``.

    Accepts standard and threshold-produced signatures through the same
    code path. Malformed inputs return False, never raise. Results are
    memoized process-wide (verification is a pure function).
    """
    if not isinstance(public_key, (bytes, bytearray)) or len(public_key) != PUBLIC_KEY_LEN:
        return False
    if not isinstance(signature, (bytes, bytearray)) or len(signature) != SIGNATURE_LEN:
        return False
    if public_key[0] not in (SCHEME_STANDARD, SCHEME_THRESHOLD):
        return False
    if signature[0] != public_key[0]:
        return False
    if not isinstance(message, (bytes, bytearray)):
        return False
    key = (bytes(public_key), bytes(message), bytes(signature))
    cached = _VERIFY_CACHE.get(key)
    if cached is not None:
        return cached
    try:
        Ed25519PublicKey.from_public_bytes(key[0][1:]).verify(key[2][1:], key[1])
        result = True
    except (InvalidSignature, ValueError):
        result = False
    if len(_VERIFY_CACHE) >= _VERIFY_CACHE_MAX:
        _VERIFY_CACHE.clear()
    _VERIFY_CACHE[key] = result
    return result


def hash(data: bytes) -> bytes:
    """Deterministic SHA-256 digest in canonical (prefixed) encoding."""
    return bytes([HASH_SHA256]) + hashlib.sha256(data).digest()


def opaque_transform(key: bytes, data: bytes) -> bytes:
    """Keyed opaque-blob transformation for stored payloads.

    Self-inverse XOR with a hash keystream. Stands in for payload
    encryption; not a confidentiality primitive.
    """
    out = bytearray(len(data))
    block = 0
    for start in range(0, len(data), 32):
        stream = hashlib.sha256(key + block.to_bytes(8, "big")).digest()
        chunk = data[start : start + 32]
        for i, b in enumerate(chunk):
            out[start + i] = b ^ stream[i]
        block += 1
    return bytes(out)


# Ed25519 group arithmetic for the threshold path. Only dealer keygen and
# threshold signing use this; verification always goes through the
# library verifier above.

_P = 2**255 - 19
GROUP_ORDER = 2**252 + 27742317777372353535851937790883648493
_D = -121665 * pow(121666, _P - 2, _P) % _P
_BASE_X = 15112221349535400772501151409588531511454012693041857206046113283949847762202
_BASE_Y = 46316835694926478169428394003475163141307993866256225615783033603165251855960
_BASE = (_BASE_X, _BASE_Y, 1, _BASE_X * _BASE_Y % _P)
_IDENTITY = (0, 1, 1, 0)


def _pt_add(p, q):
    x1, y1, z1, t1 = p
    x2, y2, z2, t2 = q
    a = (y1 - x1) * (y2 - x2) % _P
    b = (y1 + x1) * (y2 + x2) % _P
    c = 2 * t1 * t2 * _D % _P
    d = 2 * z1 * z2 % _P
    e = b - a
    f = d - c
    g = d + c
    h = b + a
    return (e * f % _P, g * h % _P, f * g % _P, e * h % _P)


def _pt_mul(k: int, p):
    acc = _IDENTITY
    while k:
        if k & 1:
            acc = _pt_add(acc, p)
        p = _pt_add(p, p)
        k >>= 1
    return acc


def _pt_encode(p) -> bytes:
    x, y, z, _ = p
    zinv = pow(z, _P - 2, _P)
    x = x * zinv % _P
    y = y * zinv % _P
    return (y | ((x & 1) << 255)).to_bytes(32, "little")


def _scalar_from_hash(*parts: bytes) -> int:
    h = hashlib.sha512()
    for part in parts:
        h.update(part)
    return int.from_bytes(h.digest(), "little") % GROUP_ORDER


def _random_scalar(rng: Random | None) -> int:
    return (int.from_bytes(_random_bytes(rng, 64), "little") % (GROUP_ORDER - 1)) + 1


def threshold_keygen(n: int, t: int, rng: Random | None = None) -> ThresholdKeyMaterial:
    """Deal a t-of-n shared key: one public key, n secret shares.

    Any t distinct shares can sign; the dealer secret is discarded once
    the shares are issued.
    """
    if n < 1:
        raise ThresholdParameterError("member count must be at least 1")
    if t < 1 or t > n:
        raise ThresholdParameterError(f"threshold {t} must satisfy 1 <= t <= n={n}")
    master = _random_scalar(rng)
    coeffs = [master] + [_random_scalar(rng) for _ in range(t - 1)]
    shared_pk = bytes([SCHEME_THRESHOLD]) + _pt_encode(_pt_mul(master, _BASE))
    shares = []
    for index in range(1, n + 1):
        acc = 0
        for coeff in reversed(coeffs):
            acc = (acc * index + coeff) % GROUP_ORDER
        shares.append(
            KeyShare(
                index=index,
                scalar=acc,
                nonce_seed=_random_bytes(rng, 32),
                group_public_key=shared_pk,
                threshold=t,
            )
        )
    # master and coeffs go out of scope here; the returned structure holds
    # only the per-member shares.
    return ThresholdKeyMaterial(
        shared_public_key=shared_pk,
        shares=tuple(shares),
        threshold=t,
        member_count=n,
    )


def _lagrange_at_zero(indices: Sequence[int]) -> dict[int, int]:
    weights = {}
    for i in indices:
        num = 1
        den = 1
        for j in indices:
            if j == i:
                continue
            num = num * j % GROUP_ORDER
            den = den * (j - i) % GROUP_ORDER
        weights[i] = num * pow(den, GROUP_ORDER - 2, GROUP_ORDER) % GROUP_ORDER
    return weights


def threshold_sign(shares: Sequence[KeyShare], message: bytes) -> bytes:
    """Aggregate partial signatures from ``shares`` over ``message``.

    Requires at least ``threshold`` distinct shares of one dealer run.
    The result is a plain Ed25519 signature under the shared public key;
    no participant ever holds the reconstructed secret scalar.
    """
    if not shares:
        raise InsufficientSharesError("no shares supplied")
    group_pk = shares[0].group_public_key
    t = shares[0].threshold
    for share in shares:
        if share.group_public_key != group_pk or share.threshold != t:
            raise MixedSharesError("shares come from different key material")
    indices = [s.index for s in shares]
    if len(set(indices)) != len(indices):
        raise MixedSharesError("duplicate share indices")
    if len(shares) < t:
        raise InsufficientSharesError(
            f"{len(shares)} shares supplied but threshold is {t}"
        )
    ordered = sorted(shares, key=lambda s: s.index)
    subset_tag = b"".join(s.index.to_bytes(2, "big") for s in ordered)
    weights = _lagrange_at_zero([s.index for s in ordered])
    message = bytes(message)

    nonces = {
        s.index: _scalar_from_hash(_NONCE_DOMAIN, s.nonce_seed, subset_tag, message)
        for s in ordered
    }
    nonce_total = sum(nonces.values()) % GROUP_ORDER
    r_enc = _pt_encode(_pt_mul(nonce_total, _BASE))
    challenge = _scalar_from_hash(r_enc, group_pk[1:], message)

    s_total = 0
    for share in ordered:
        partial = (nonces[share.index] + challenge * weights[share.index] * share.scalar) % GROUP_ORDER
        s_total = (s_total + partial) % GROUP_ORDER
    return bytes([SCHEME_THRESHOLD]) + r_enc + s_total.to_bytes(32, "little")
