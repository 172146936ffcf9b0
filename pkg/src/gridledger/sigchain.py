"""Consortium key/signature chains and firmware bundles.

A chain starts at a root public key burned into device ROM and appends
one link per consortium key rotation: the link holds the next shared
public key plus the previous consortium's threshold signature over it.
A device that trusts only the root key can therefore verify firmware
signed by any later consortium.

The verifier here is bootloader-grade: it never raises on untrusted
input, reports failures as return values with the first bad link index,
and bounds its work via a maximum chain length enforced at decode time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

from . import crypto

MAX_CHAIN_LINKS = 64


class ChainError(ValueError):
    """Construction-time chain errors (verification never raises)."""


class EpochMismatchError(ChainError):
    """Signing shares do not belong to the chain's current final key."""


class DuplicateChainKeyError(ChainError):
    """The new key already appears in the chain."""


@dataclass(frozen=True, slots=True)
class ChainLink:
    next_public_key: bytes
    signature: bytes


@dataclass(frozen=True, slots=True)
class SignatureChain:
    root_public_key: bytes
    links: tuple[ChainLink, ...] = ()

    @property
    def final_key(self) -> bytes:
        return self.links[-1].next_public_key if self.links else self.root_public_key

    def keys(self) -> tuple[bytes, ...]:
        return (self.root_public_key,) + tuple(l.next_public_key for l in self.links)


@dataclass(frozen=True, slots=True)
class ChainVerification:
    """Outcome of verify_chain: a final key, or the first bad link index.

    ``failed_index`` is 1-based over links; 0 means the chain's embedded
    root key does not match the trusted root.
    """

    final_key: bytes | None
    failed_index: int | None

    @property
    def ok(self) -> bool:
        return self.failed_index is None


@dataclass(frozen=True, slots=True)
class FirmwareBundle:
    binary: bytes
    binary_signature: bytes
    chain: SignatureChain
    version: int


@dataclass(frozen=True, slots=True)
class BundleVerdict:
    accepted: bool
    reason: str | None = None
    failed_link: int | None = None
    final_key: bytes | None = None


def extend_chain(
    chain: SignatureChain,
    new_public_key: bytes,
    signing_shares: Sequence[crypto.KeyShare],
) -> SignatureChain:
    """Append one link: the current consortium signs the next public key.

    The shares must belong to the key material whose shared public key is
    the chain's current final key, and at least the scheme threshold of
    them must be supplied.
    """
    if not signing_shares:
        raise crypto.InsufficientSharesError("no signing shares supplied")
    if signing_shares[0].group_public_key != chain.final_key:
        raise EpochMismatchError(
            "signing shares belong to a different consortium epoch than the chain tip"
        )
    if new_public_key in chain.keys():
        raise DuplicateChainKeyError("chain keys must be pairwise distinct")
    if len(chain.links) >= MAX_CHAIN_LINKS:
        raise ChainError(f"chain already has the maximum of {MAX_CHAIN_LINKS} links")
    signature = crypto.threshold_sign(signing_shares, new_public_key)
    return SignatureChain(
        root_public_key=chain.root_public_key,
        links=chain.links + (ChainLink(new_public_key, signature),),
    )


def verify_chain(root_public_key: bytes, chain: SignatureChain) -> ChainVerification:
    """Walk the chain from the trusted root, verifying every link in order.

    Returns the last public key on success. An empty chain verifies to the
    root key itself.
    """
    if chain.root_public_key != root_public_key:
        return ChainVerification(final_key=None, failed_index=0)
    current = root_public_key
    for index, link in enumerate(chain.links, start=1):
        if not crypto.verify(current, link.next_public_key, link.signature):
            return ChainVerification(final_key=None, failed_index=index)
        current = link.next_public_key
    return ChainVerification(final_key=current, failed_index=None)


def verify_firmware_bundle(root_public_key: bytes, bundle: FirmwareBundle) -> BundleVerdict:
    """Accept iff the chain verifies and the binary signature checks out
    under the chain's final key (the current consortium key)."""
    outcome = verify_chain(root_public_key, bundle.chain)
    if not outcome.ok:
        return BundleVerdict(False, reason="bad-chain", failed_link=outcome.failed_index)
    digest = crypto.hash(bundle.binary)
    if not crypto.verify(outcome.final_key, digest, bundle.binary_signature):
        return BundleVerdict(False, reason="bad-binary-signature", final_key=outcome.final_key)
    return BundleVerdict(True, final_key=outcome.final_key)


# Wire format. Chain: u16 root key length || root key || u16 link count,
# then per link u16 length || key || u16 length || signature. Bundle:
# encoded chain || u32 version || u32 binary length || binary ||
# u16 signature length || signature. All integers big-endian.


def encode_chain(chain: SignatureChain) -> bytes:
    parts = [struct.pack(">H", len(chain.root_public_key)), chain.root_public_key]
    parts.append(struct.pack(">H", len(chain.links)))
    for link in chain.links:
        parts.append(struct.pack(">H", len(link.next_public_key)))
        parts.append(link.next_public_key)
        parts.append(struct.pack(">H", len(link.signature)))
        parts.append(link.signature)
    return b"".join(parts)


def _valid_key(data: bytes) -> bool:
    return len(data) == crypto.PUBLIC_KEY_LEN and data[0] in (
        crypto.SCHEME_STANDARD,
        crypto.SCHEME_THRESHOLD,
    )


def _valid_signature(data: bytes) -> bool:
    return len(data) == crypto.SIGNATURE_LEN and data[0] in (
        crypto.SCHEME_STANDARD,
        crypto.SCHEME_THRESHOLD,
    )


def _take(data: bytes, offset: int, n: int) -> tuple[bytes, int] | None:
    if offset + n > len(data):
        return None
    return data[offset : offset + n], offset + n


def _parse_chain(data: bytes, offset: int) -> tuple[SignatureChain, int] | None:
    got = _take(data, offset, 2)
    if got is None:
        return None
    raw, offset = got
    root_len = struct.unpack(">H", raw)[0]
    got = _take(data, offset, root_len)
    if got is None:
        return None
    root, offset = got
    if not _valid_key(root):
        return None
    got = _take(data, offset, 2)
    if got is None:
        return None
    raw, offset = got
    count = struct.unpack(">H", raw)[0]
    if count > MAX_CHAIN_LINKS:
        return None
    links = []
    for _ in range(count):
        got = _take(data, offset, 2)
        if got is None:
            return None
        raw, offset = got
        key_len = struct.unpack(">H", raw)[0]
        got = _take(data, offset, key_len)
        if got is None:
            return None
        key, offset = got
        if not _valid_key(key):
            return None
        got = _take(data, offset, 2)
        if got is None:
            return None
        raw, offset = got
        sig_len = struct.unpack(">H", raw)[0]
        got = _take(data, offset, sig_len)
        if got is None:
            return None
        sig, offset = got
        if not _valid_signature(sig):
            return None
        links.append(ChainLink(key, sig))
    return SignatureChain(root, tuple(links)), offset


def decode_chain(data: bytes) -> SignatureChain | None:
    """Parse an encoded chain; None on truncation, trailing garbage,
    unknown scheme bytes, or an over-length chain."""
    if not isinstance(data, (bytes, bytearray)):
        return None
    parsed = _parse_chain(bytes(data), 0)
    if parsed is None:
        return None
    chain, offset = parsed
    if offset != len(data):
        return None
    return chain


def encode_bundle(bundle: FirmwareBundle) -> bytes:
    return b"".join(
        [
            encode_chain(bundle.chain),
            struct.pack(">I", bundle.version),
            struct.pack(">I", len(bundle.binary)),
            bundle.binary,
            struct.pack(">H", len(bundle.binary_signature)),
            bundle.binary_signature,
        ]
    )


def decode_bundle(data: bytes) -> FirmwareBundle | None:
    if not isinstance(data, (bytes, bytearray)):
        return None
    data = bytes(data)
    parsed = _parse_chain(data, 0)
    if parsed is None:
        return None
    chain, offset = parsed
    got = _take(data, offset, 8)
    if got is None:
        return None
    raw, offset = got
    version, binary_len = struct.unpack(">II", raw)
    got = _take(data, offset, binary_len)
    if got is None:
        return None
    binary, offset = got
    got = _take(data, offset, 2)
    if got is None:
        return None
    raw, offset = got
    sig_len = struct.unpack(">H", raw)[0]
    got = _take(data, offset, sig_len)
    if got is None:
        return None
    signature, offset = got
    if not _valid_signature(signature):
        return None
    if offset != len(data):
        return None
    return FirmwareBundle(binary, signature, chain, version)
