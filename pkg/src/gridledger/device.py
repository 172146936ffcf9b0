"""Meter model: sensor, TPM signing, dual-partition flash, bootloader.

The boot path is the device's trusted computing base: its verification
depends only on this module, ``crypto.verify``/``crypto.hash``, and the
chain verifier in ``sigchain``. It must stay free of imports from the
consensus, contract, or network layers (a structural test enforces
this), mirroring a ROM bootloader that carries nothing but the root key
and the signature checks.

Flash layout: partition 1 holds the active firmware bundle, partition 2
receives incoming updates verbatim. All verification happens at boot;
writes to partition 2 are unconditional.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

from . import crypto, sigchain


class MeterNotRunning(RuntimeError):
    pass


@dataclass(frozen=True, slots=True)
class Rom:
    """Read-only memory contents, fixed at manufacture."""

    bootloader_version: str
    root_public_key: bytes


@dataclass(frozen=True, slots=True)
class Reading:
    meter_id: str
    captured_at: float
    power_w: float
    voltage_v: float
    frequency_hz: float

    def canonical_bytes(self) -> bytes:
        """Fixed-point encoding signed by the TPM (milliunits, i64)."""
        meter = self.meter_id.encode()
        return b"".join(
            [
                struct.pack(">H", len(meter)),
                meter,
                struct.pack(">Q", _time_bits(self.captured_at)),
                struct.pack(">q", _milli(self.power_w)),
                struct.pack(">q", _milli(self.voltage_v)),
                struct.pack(">q", _milli(self.frequency_hz)),
            ]
        )


def _milli(value: float) -> int:
    return round(value * 1000)


def _time_bits(t: float) -> int:
    return struct.unpack(">Q", struct.pack(">d", t))[0]


def decode_reading(data: bytes) -> Reading | None:
    try:
        (mlen,) = struct.unpack_from(">H", data, 0)
        meter = data[2 : 2 + mlen].decode()
        bits, p, v, f = struct.unpack_from(">Qqqq", data, 2 + mlen)
        if len(data) != 2 + mlen + 32:
            return None
    except (struct.error, UnicodeDecodeError):
        return None
    captured_at = struct.unpack(">d", struct.pack(">Q", bits))[0]
    return Reading(meter, captured_at, p / 1000, v / 1000, f / 1000)


@dataclass(frozen=True, slots=True)
class BootResult:
    running: bool
    active_version: int | None
    reason: str | None = None
    rejected: tuple[tuple[str, str, int | None], ...] = ()
    # rejected entries: (partition, reason, failed link index or None)


class Meter:
    """Single meter: TPM keypair, ROM trust anchor, two flash partitions.

    ``firmware_behavior`` distinguishes honest firmware from tampered
    variants that transform readings before they reach the TPM; the TPM
    always signs whatever value it is handed.
    """

    def __init__(
        self,
        meter_id: str,
        tpm_keypair: crypto.KeyPair,
        rom: Rom,
        partition1: bytes | None = None,
        partition2: bytes | None = None,
    ) -> None:
        self.meter_id = meter_id
        self.tpm_keypair = tpm_keypair
        self._rom = rom
        self.partition1 = partition1
        self.partition2 = partition2
        self.running = False
        self.active_version: int | None = None
        self.current_consortium_key: bytes | None = None
        self.firmware_behavior: str = "honest"
        self.reading_transform = None  # set when firmware is tampered

    @property
    def rom(self) -> Rom:
        return self._rom

    def sense_and_sign(
        self, power_w: float, voltage_v: float, frequency_hz: float, captured_at: float
    ) -> tuple[Reading, bytes]:
        """Steps 1-3 of the measurement flow: sense, hand to TPM, sign.

        Tampered firmware may transform the values first; the signature
        then covers the altered reading and still verifies.
        """
        if not self.running:
            raise MeterNotRunning(self.meter_id)
        if self.reading_transform is not None:
            power_w, voltage_v, frequency_hz = self.reading_transform(
                power_w, voltage_v, frequency_hz
            )
        reading = Reading(self.meter_id, captured_at, power_w, voltage_v, frequency_hz)
        signature = crypto.sign(self.tpm_keypair.secret_key, reading.canonical_bytes())
        return reading, signature

    def receive_firmware(self, bundle_bytes: bytes) -> None:
        """Write an incoming bundle to partition 2 verbatim.

        No verification happens here, even for obvious garbage; the
        bootloader decides at the next reboot.
        """
        self.partition2 = bytes(bundle_bytes)

    def boot(self) -> BootResult:
        """Run the bootloader state machine.

        If partition 2 holds a bundle with a version tag different from
        the active one, verify it against the ROM root key; on success
        copy it to partition 1 and boot it, adopting the chain's final
        key as the current consortium key. Otherwise fall back to
        partition 1 (re-verified on every boot). Halt when neither
        partition verifies.
        """
        previous_version = self.active_version
        self.running = False
        rejected: list[tuple[str, str, int | None]] = []

        candidate = None
        if self.partition2 is not None:
            candidate = sigchain.decode_bundle(self.partition2)
            if candidate is None:
                rejected.append(("partition2", "undecodable", None))
        if candidate is not None and previous_version is not None:
            if candidate.version == previous_version:
                candidate = None  # same version: no-op redelivery
        if candidate is not None:
            verdict = sigchain.verify_firmware_bundle(self._rom.root_public_key, candidate)
            if verdict.accepted:
                self.partition1 = self.partition2
                return self._activate(candidate, verdict.final_key, rejected)
            rejected.append(("partition2", verdict.reason, verdict.failed_link))

        if self.partition1 is not None:
            active = sigchain.decode_bundle(self.partition1)
            if active is None:
                rejected.append(("partition1", "undecodable", None))
            else:
                verdict = sigchain.verify_firmware_bundle(self._rom.root_public_key, active)
                if verdict.accepted:
                    return self._activate(active, verdict.final_key, rejected)
                rejected.append(("partition1", verdict.reason, verdict.failed_link))

        self.active_version = previous_version
        return BootResult(
            running=False,
            active_version=None,
            reason="no-valid-firmware",
            rejected=tuple(rejected),
        )

    def _activate(self, bundle, final_key, rejected) -> BootResult:
        self.running = True
        self.active_version = bundle.version
        self.current_consortium_key = final_key
        return BootResult(
            running=True, active_version=bundle.version, rejected=tuple(rejected)
        )


@dataclass
class AnomalyDetector:
    """Reference per-meter anomaly hook: flag a reading whose power,
    voltage, or frequency deviates from the trailing-window mean by more
    than k standard deviations. A pluggable stand-in, not a contribution.
    """

    window: int = 32
    k: float = 4.0
    min_history: int = 8  # warm-up before a single sample can trip the rule
    history: dict[str, list[tuple[float, float, float]]] = field(default_factory=dict)

    def observe(self, reading: Reading) -> bool:
        values = (reading.power_w, reading.voltage_v, reading.frequency_hz)
        past = self.history.setdefault(reading.meter_id, [])
        flagged = len(past) >= self.min_history and any(
            deviation_flag([row[i] for row in past], values[i], self.k) for i in range(3)
        )
        past.append(values)
        if len(past) > self.window:
            del past[0]
        return flagged


def deviation_flag(history: Sequence[float], value: float, k: float = 4.0) -> bool:
    """True when ``value`` sits more than k sample standard deviations
    from the mean of ``history``. Empty history always passes."""
    if not history:
        return False
    mean = sum(history) / len(history)
    variance = sum((x - mean) ** 2 for x in history) / len(history)
    return abs(value - mean) > k * math.sqrt(variance)
