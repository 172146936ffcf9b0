"""Deterministic contract state machines for both ledger layers.

The top-layer contract owns access control (member admin keys, node and
meter registries), the firmware update log with its veto window, and the
consortium key epochs. Bottom-layer contracts own the measurement log of
one chain plus the key material distributed down from the top layer.

Functions: putFirmware / vetoFirmware / checkFirmware / updateAdminKey on
the top layer, proposePubKey / votePubKeyProposal on both layers, and
putMeasurement on the bottom layer.

Application is deterministic and replayable: every replica applies the
same committed transactions in order and must reach the same state
digest. Failed calls change nothing and report a reason.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import crypto, device
from .consensus import Transaction

FIRMWARE_PENDING = "pending"
FIRMWARE_VALID = "valid"
FIRMWARE_VETOED = "vetoed"

PROPOSAL_OPEN = "open"
PROPOSAL_APPROVED = "approved"
PROPOSAL_REJECTED = "rejected"

PROPOSAL_KINDS = (
    "add-node",
    "remove-node",
    "add-meter",
    "remove-meter",
    "consortium-key-update",
)


@dataclass(frozen=True, slots=True)
class Detection:
    detector: str
    subject: str
    reason: str
    keys: tuple = ()  # ground-truth join keys, scoring only


@dataclass(frozen=True, slots=True)
class ApplyResult:
    ok: bool
    reason: str | None = None
    output: object = None
    detections: tuple[Detection, ...] = ()


def _fail(reason: str, detections: tuple[Detection, ...] = ()) -> ApplyResult:
    return ApplyResult(False, reason, detections=detections)


@dataclass(slots=True)
class MemberInfo:
    member_id: str
    admin_key: bytes
    is_oem: bool = False


@dataclass(slots=True)
class NodeInfo:
    node_id: str
    owner: str
    layer: str  # "top" | "bottom"
    chain_id: str
    key: bytes


@dataclass(slots=True)
class FirmwareRecord:
    version: int
    binary_digest: bytes
    proposer: str
    proposal_height: int
    cooldown_blocks: int
    vetoes: list[str] = field(default_factory=list)
    status: str = FIRMWARE_PENDING

    def status_at(self, height: int) -> str:
        if self.status == FIRMWARE_VETOED:
            return FIRMWARE_VETOED
        if height >= self.proposal_height + self.cooldown_blocks and not self.vetoes:
            return FIRMWARE_VALID
        return FIRMWARE_PENDING


@dataclass(slots=True)
class KeyProposal:
    proposal_id: str
    kind: str
    subject_id: str
    subject_key: bytes
    owner: str
    target_chain: str
    extra: bytes
    proposer: str
    votes: dict[str, bool] = field(default_factory=dict)
    status: str = PROPOSAL_OPEN


@dataclass(slots=True)
class Epoch:
    index: int
    shared_key: bytes
    members: tuple[str, ...]


@dataclass(frozen=True, slots=True)
class MeasurementRecord:
    meter_id: str
    supplier_id: str
    metadata: bytes
    reading: device.Reading
    payload_digest: bytes
    tpm_signature: bytes
    encrypted_payload: bytes

    def encode(self) -> bytes:
        reading_bytes = self.reading.canonical_bytes()
        supplier = self.supplier_id.encode()
        return b"".join(
            [
                struct.pack(">H", len(supplier)),
                supplier,
                struct.pack(">H", len(self.metadata)),
                self.metadata,
                struct.pack(">H", len(reading_bytes)),
                reading_bytes,
                self.payload_digest,
                struct.pack(">H", len(self.tpm_signature)),
                self.tpm_signature,
                struct.pack(">I", len(self.encrypted_payload)),
                self.encrypted_payload,
            ]
        )


def decode_measurement(data: bytes) -> MeasurementRecord | None:
    try:
        offset = 0
        (slen,) = struct.unpack_from(">H", data, offset)
        offset += 2
        supplier = data[offset : offset + slen].decode()
        offset += slen
        (mlen,) = struct.unpack_from(">H", data, offset)
        offset += 2
        metadata = data[offset : offset + mlen]
        offset += mlen
        (rlen,) = struct.unpack_from(">H", data, offset)
        offset += 2
        reading_bytes = data[offset : offset + rlen]
        offset += rlen
        reading = device.decode_reading(reading_bytes)
        if reading is None:
            return None
        digest = data[offset : offset + crypto.DIGEST_LEN]
        if len(digest) != crypto.DIGEST_LEN:
            return None
        offset += crypto.DIGEST_LEN
        (siglen,) = struct.unpack_from(">H", data, offset)
        offset += 2
        signature = data[offset : offset + siglen]
        offset += siglen
        (elen,) = struct.unpack_from(">I", data, offset)
        offset += 4
        payload = data[offset : offset + elen]
        offset += elen
        if offset != len(data) or len(signature) != crypto.SIGNATURE_LEN:
            return None
    except (struct.error, UnicodeDecodeError):
        return None
    return MeasurementRecord(
        reading.meter_id, supplier, metadata, reading, digest, signature, payload
    )


def _canon(value) -> bytes:
    """Stable byte form of contract state for digesting."""
    if isinstance(value, bytes):
        return b"b" + struct.pack(">I", len(value)) + value
    if isinstance(value, str):
        raw = value.encode()
        return b"s" + struct.pack(">I", len(raw)) + raw
    if isinstance(value, bool):
        return b"?1" if value else b"?0"
    if isinstance(value, int):
        return b"i" + struct.pack(">q", value)
    if isinstance(value, float):
        return b"f" + struct.pack(">d", value)
    if value is None:
        return b"n"
    if isinstance(value, (list, tuple)):
        return b"l" + b"".join(_canon(v) for v in value) + b"e"
    if isinstance(value, dict):
        parts = [b"d"]
        for key in sorted(value):
            parts.append(_canon(key))
            parts.append(_canon(value[key]))
        parts.append(b"e")
        return b"".join(parts)
    if hasattr(value, "__dataclass_fields__"):
        parts = [b"c"]
        for name in value.__dataclass_fields__:
            parts.append(_canon(getattr(value, name)))
        parts.append(b"e")
        return b"".join(parts)
    raise TypeError(f"cannot canonicalize {type(value).__name__}")


class ProposalBook:
    """Shared open-proposal machinery: 2f+1 supports approve, f+1 rejects
    make approval impossible and close the proposal."""

    def __init__(self):
        self.proposals: dict[str, KeyProposal] = {}
        self._sequence = 0

    def open_for_subject(self, kind: str, subject_id: str) -> KeyProposal | None:
        for proposal in self.proposals.values():
            if (
                proposal.status == PROPOSAL_OPEN
                and proposal.kind == kind
                and proposal.subject_id == subject_id
            ):
                return proposal
        return None

    def create(self, kind, subject_id, subject_key, owner, target_chain, extra, proposer):
        self._sequence += 1
        proposal = KeyProposal(
            proposal_id=f"prop-{self._sequence}",
            kind=kind,
            subject_id=subject_id,
            subject_key=subject_key,
            owner=owner,
            target_chain=target_chain,
            extra=extra,
            proposer=proposer,
        )
        self.proposals[proposal.proposal_id] = proposal
        return proposal

    def vote(self, proposal: KeyProposal, voter: str, support: bool, quorum: int, reject_bar: int) -> str:
        proposal.votes[voter] = support
        supports = sum(1 for v in proposal.votes.values() if v)
        rejects = len(proposal.votes) - supports
        if supports >= quorum:
            proposal.status = PROPOSAL_APPROVED
        elif rejects >= reject_bar:
            proposal.status = PROPOSAL_REJECTED
        return proposal.status


class TopLayerContract:
    def __init__(self, chain_id: str = "top"):
        self.chain_id = chain_id
        self.members: dict[str, MemberInfo] = {}
        self.node_registry: dict[str, NodeInfo] = {}
        self.meter_registry: dict[str, bytes] = {}
        self.firmware_log: dict[int, FirmwareRecord] = {}
        self.latest_version = 0
        self.epochs: list[Epoch] = []
        self.book = ProposalBook()

    # genesis helpers ------------------------------------------------------

    def register_member(self, member_id: str, admin_key: bytes, is_oem: bool = False) -> None:
        self.members[member_id] = MemberInfo(member_id, admin_key, is_oem)

    def register_node(self, node_id, owner, layer, chain_id, key) -> None:
        self.node_registry[node_id] = NodeInfo(node_id, owner, layer, chain_id, key)

    def register_meter(self, meter_id: str, tpm_key: bytes) -> None:
        self.meter_registry[meter_id] = tpm_key

    def install_epoch(self, shared_key: bytes) -> None:
        self.epochs.append(Epoch(len(self.epochs), shared_key, tuple(self.members)))

    # consensus interface ---------------------------------------------------

    def key_of(self, sender: str) -> bytes | None:
        info = self.members.get(sender)
        return info.admin_key if info is not None else None

    @property
    def fault_bound(self) -> int:
        return (len(self.members) - 1) // 3

    def apply(self, tx: Transaction, height: int, timestamp: float) -> ApplyResult:
        handler = getattr(self, "_call_" + tx.call.function, None)
        if handler is None:
            return _fail("unknown-function")
        try:
            return handler(tx.sender, height, *tx.call.args)
        except (TypeError, struct.error):
            return _fail("malformed-arguments")

    # firmware log -----------------------------------------------------------

    def _call_putFirmware(self, sender, height, version, binary_digest, cooldown_blocks):
        member = self.members.get(sender)
        if member is None or not member.is_oem:
            return _fail("unauthorized")
        if version <= self.latest_version:
            return _fail("stale-version")
        if cooldown_blocks < 1:
            return _fail("bad-cooldown")
        record = FirmwareRecord(version, binary_digest, sender, height, cooldown_blocks)
        self.firmware_log[version] = record
        self.latest_version = version
        return ApplyResult(True, output=version)

    def _call_vetoFirmware(self, sender, height, version):
        if sender not in self.members:
            return _fail("unauthorized")
        record = self.firmware_log.get(version)
        if record is None:
            return _fail("unknown-record")
        if record.status == FIRMWARE_VETOED:
            return _fail("already-vetoed")
        if height >= record.proposal_height + record.cooldown_blocks:
            return _fail("too-late")
        record.vetoes.append(sender)
        record.status = FIRMWARE_VETOED
        return ApplyResult(
            True,
            output=FIRMWARE_VETOED,
            detections=(
                Detection(
                    detector="cooldown-veto",
                    subject=f"firmware:{version}",
                    reason="vetoed-in-window",
                    keys=(("firmware", version),),
                ),
            ),
        )

    def _call_checkFirmware(self, sender, height, version):
        record = self.firmware_log.get(version)
        if record is None:
            return _fail("unknown-record")
        return ApplyResult(True, output=record.status_at(height))

    def check_firmware(self, version: int, at_height: int) -> str | None:
        record = self.firmware_log.get(version)
        return None if record is None else record.status_at(at_height)

    # access control -----------------------------------------------------------

    def _call_updateAdminKey(self, sender, height, new_key, proof):
        member = self.members.get(sender)
        if member is None:
            return _fail("unknown-member")
        if not crypto.verify(member.admin_key, new_key, proof):
            return _fail("bad-proof")
        member.admin_key = new_key
        return ApplyResult(True)

    def _call_proposePubKey(
        self, sender, height, kind, subject_id, subject_key, owner, target_chain, extra
    ):
        if sender not in self.members:
            return _fail("unauthorized")
        if kind not in PROPOSAL_KINDS:
            return _fail("bad-kind")
        if kind == "add-node" and not target_chain:
            return _fail("missing-target-chain")
        if self.book.open_for_subject(kind, subject_id) is not None:
            return _fail("duplicate-proposal")
        proposal = self.book.create(
            kind, subject_id, subject_key, owner, target_chain, extra, sender
        )
        return ApplyResult(True, output=proposal.proposal_id)

    def _call_votePubKeyProposal(self, sender, height, proposal_id, support):
        if sender not in self.members:
            return _fail("unauthorized")
        proposal = self.book.proposals.get(proposal_id)
        if proposal is None:
            return _fail("unknown-proposal")
        if proposal.status != PROPOSAL_OPEN:
            return _fail("proposal-closed")
        if sender in proposal.votes:
            return _fail("duplicate-vote")
        quorum = 2 * self.fault_bound + 1
        status = self.book.vote(proposal, sender, bool(support), quorum, self.fault_bound + 1)
        if status == PROPOSAL_APPROVED:
            self._execute_proposal(proposal)
        return ApplyResult(True, output=status)

    def _execute_proposal(self, proposal: KeyProposal) -> None:
        kind = proposal.kind
        if kind == "add-node":
            self.node_registry[proposal.subject_id] = NodeInfo(
                proposal.subject_id,
                proposal.owner,
                "bottom",
                proposal.target_chain,
                proposal.subject_key,
            )
        elif kind == "remove-node":
            self.node_registry.pop(proposal.subject_id, None)
        elif kind == "add-meter":
            self.meter_registry[proposal.subject_id] = proposal.subject_key
        elif kind == "remove-meter":
            self.meter_registry.pop(proposal.subject_id, None)
        elif kind == "consortium-key-update":
            added, removed = decode_member_changes(proposal.extra)
            for member_id, admin_key, is_oem in added:
                self.register_member(member_id, admin_key, is_oem)
            for member_id in removed:
                self.members.pop(member_id, None)
            self.install_epoch(proposal.subject_key)

    # metrics / replay ------------------------------------------------------------

    def state_digest(self) -> bytes:
        snapshot = {
            "members": self.members,
            "nodes": self.node_registry,
            "meters": self.meter_registry,
            "firmware": self.firmware_log,
            "latest": self.latest_version,
            "epochs": self.epochs,
            "proposals": self.book.proposals,
        }
        return crypto.hash(_canon(snapshot))


def encode_member_changes(added, removed) -> bytes:
    """added: (member_id, admin_key, is_oem) triples; removed: member ids."""
    parts = [struct.pack(">H", len(added))]
    for member_id, admin_key, is_oem in added:
        raw = member_id.encode()
        parts.append(struct.pack(">H", len(raw)))
        parts.append(raw)
        parts.append(admin_key)
        parts.append(b"\x01" if is_oem else b"\x00")
    parts.append(struct.pack(">H", len(removed)))
    for member_id in removed:
        raw = member_id.encode()
        parts.append(struct.pack(">H", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def decode_member_changes(data: bytes):
    added = []
    removed = []
    offset = 0
    (count,) = struct.unpack_from(">H", data, offset)
    offset += 2
    for _ in range(count):
        (mlen,) = struct.unpack_from(">H", data, offset)
        offset += 2
        member_id = data[offset : offset + mlen].decode()
        offset += mlen
        admin_key = data[offset : offset + crypto.PUBLIC_KEY_LEN]
        offset += crypto.PUBLIC_KEY_LEN
        is_oem = data[offset] == 1
        offset += 1
        added.append((member_id, admin_key, is_oem))
    (count,) = struct.unpack_from(">H", data, offset)
    offset += 2
    for _ in range(count):
        (mlen,) = struct.unpack_from(">H", data, offset)
        offset += 2
        removed.append(data[offset : offset + mlen].decode())
        offset += mlen
    return added, removed


class BottomLayerContract:
    def __init__(self, chain_id: str):
        self.chain_id = chain_id
        self.node_registry: dict[str, NodeInfo] = {}
        self.meter_registry: dict[str, bytes] = {}
        self.measurements: list[MeasurementRecord] = []
        self.seen_digests: dict[str, set[bytes]] = {}
        self.book = ProposalBook()
        self._decode_cache: dict[bytes, MeasurementRecord | None] = {}

    def register_node(self, node_id, owner, key) -> None:
        self.node_registry[node_id] = NodeInfo(node_id, owner, "bottom", self.chain_id, key)

    def register_meter(self, meter_id: str, tpm_key: bytes) -> None:
        self.meter_registry[meter_id] = tpm_key

    def key_of(self, sender: str) -> bytes | None:
        info = self.node_registry.get(sender)
        return info.key if info is not None else None

    @property
    def fault_bound(self) -> int:
        return (len(self.node_registry) - 1) // 3

    def apply(self, tx: Transaction, height: int, timestamp: float) -> ApplyResult:
        handler = getattr(self, "_call_" + tx.call.function, None)
        if handler is None:
            return _fail("unknown-function")
        try:
            return handler(tx.sender, height, *tx.call.args)
        except (TypeError, struct.error):
            return _fail("malformed-arguments")

    def _call_putMeasurement(self, sender, height, record_bytes):
        if sender not in self.node_registry:
            return _fail("unregistered-caller")
        record = self._decode_cache.get(record_bytes)
        if record_bytes not in self._decode_cache:
            record = decode_measurement(record_bytes)
            if len(self._decode_cache) > 8192:
                self._decode_cache.clear()
            self._decode_cache[record_bytes] = record
        if record is None:
            return _fail("malformed-record")
        tpm_key = self.meter_registry.get(record.meter_id)
        if tpm_key is None:
            return _fail("unknown-meter")
        if not crypto.verify(tpm_key, record.reading.canonical_bytes(), record.tpm_signature):
            return _fail(
                "bad-signature",
                detections=(
                    Detection(
                        detector="signature-check",
                        subject=f"meter:{record.meter_id}",
                        reason="measurement-signature-invalid",
                        keys=(
                            ("reading", record.payload_digest),
                            ("meter-data", record.meter_id),
                        ),
                    ),
                ),
            )
        seen = self.seen_digests.setdefault(record.meter_id, set())
        if record.payload_digest in seen:
            return _fail("duplicate")
        seen.add(record.payload_digest)
        self.measurements.append(record)
        return ApplyResult(True, output=len(self.measurements) - 1)

    def _call_proposePubKey(
        self, sender, height, kind, subject_id, subject_key, owner, target_chain, extra
    ):
        if sender not in self.node_registry:
            return _fail("unauthorized")
        if kind not in PROPOSAL_KINDS:
            return _fail("bad-kind")
        if self.book.open_for_subject(kind, subject_id) is not None:
            return _fail("duplicate-proposal")
        proposal = self.book.create(
            kind, subject_id, subject_key, owner, target_chain, extra, sender
        )
        return ApplyResult(True, output=proposal.proposal_id)

    def _call_votePubKeyProposal(self, sender, height, proposal_id, support):
        if sender not in self.node_registry:
            return _fail("unauthorized")
        proposal = self.book.proposals.get(proposal_id)
        if proposal is None:
            return _fail("unknown-proposal")
        if proposal.status != PROPOSAL_OPEN:
            return _fail("proposal-closed")
        if sender in proposal.votes:
            return _fail("duplicate-vote")
        quorum = 2 * self.fault_bound + 1
        status = self.book.vote(proposal, sender, bool(support), quorum, self.fault_bound + 1)
        if status == PROPOSAL_APPROVED:
            if proposal.kind == "add-meter":
                self.meter_registry[proposal.subject_id] = proposal.subject_key
            elif proposal.kind == "remove-meter":
                self.meter_registry.pop(proposal.subject_id, None)
        return ApplyResult(True, output=status)

    def state_digest(self) -> bytes:
        snapshot = {
            "nodes": self.node_registry,
            "meters": self.meter_registry,
            "measurements": self.measurements,
            "proposals": self.book.proposals,
        }
        return crypto.hash(_canon(snapshot))
