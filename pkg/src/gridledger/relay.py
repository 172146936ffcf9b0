"""Bottom-node measurement relay: verify, wrap, submit.

A bottom-layer node receives signed readings from its meters, checks the
TPM signature against the on-chain meter registry, encrypts the payload,
and submits a putMeasurement transaction. A compromised node (attack
hook) may corrupt the reading after its local check; it still cannot
forge the TPM signature, so the corruption is caught when the contract
re-verifies at apply time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from . import crypto, device
from .consensus import ContractCall, PRIORITY_NORMAL, Transaction, make_transaction
from .contracts import Detection, MeasurementRecord


@dataclass(slots=True)
class RelayOutcome:
    submitted: bool
    reason: str | None = None
    tx: Transaction | None = None
    detections: tuple[Detection, ...] = ()


def build_measurement_record(
    reading: device.Reading,
    signature: bytes,
    supplier_id: str,
    payload_key: bytes,
    metadata: bytes = b"",
) -> MeasurementRecord:
    reading_bytes = reading.canonical_bytes()
    return MeasurementRecord(
        meter_id=reading.meter_id,
        supplier_id=supplier_id,
        metadata=metadata,
        reading=reading,
        payload_digest=crypto.hash(reading_bytes),
        tpm_signature=signature,
        encrypted_payload=crypto.opaque_transform(payload_key, reading_bytes + metadata),
    )


def relay_measurement(
    node_id: str,
    node_secret_key: bytes,
    reading: device.Reading,
    signature: bytes,
    meter_key_lookup: Callable[[str], bytes | None],
    supplier_id: str,
    payload_key: bytes,
    nonce: int,
    corrupt_hook: Callable[[bytes], bytes] | None = None,
) -> RelayOutcome:
    """Measurement flow at the concentrator: verify the TPM signature,
    then wrap the reading into a putMeasurement transaction.

    ``corrupt_hook``, when installed by the attack harness, rewrites the
    reading bytes after the local check, modeling a compromised node.
    """
    tpm_key = meter_key_lookup(reading.meter_id)
    if tpm_key is None:
        return RelayOutcome(
            False,
            "unknown-meter",
            detections=(
                Detection(
                    detector="signature-check",
                    subject=f"meter:{reading.meter_id}",
                    reason="unknown-meter",
                    keys=(("meter-data", reading.meter_id),),
                ),
            ),
        )
    reading_bytes = reading.canonical_bytes()
    if not crypto.verify(tpm_key, reading_bytes, signature):
        return RelayOutcome(
            False,
            "bad-signature",
            detections=(
                Detection(
                    detector="signature-check",
                    subject=f"meter:{reading.meter_id}",
                    reason="measurement-signature-invalid",
                    keys=(
                        ("reading", crypto.hash(reading_bytes)),
                        ("meter-data", reading.meter_id),
                    ),
                ),
            ),
        )
    if corrupt_hook is not None:
        corrupted = device.decode_reading(corrupt_hook(reading_bytes))
        if corrupted is not None:
            reading = corrupted
    record = build_measurement_record(reading, signature, supplier_id, payload_key)
    tx = make_transaction(
        sender=node_id,
        secret_key=node_secret_key,
        call=ContractCall("putMeasurement", (record.encode(),)),
        nonce=nonce,
        priority=PRIORITY_NORMAL,
    )
    return RelayOutcome(True, tx=tx)
