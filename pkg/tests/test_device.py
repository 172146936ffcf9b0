"""Meter, bootloader, and anomaly-hook tests."""

import ast
import pathlib
import random

import pytest

from gridledger import crypto, device, sigchain
from tests.test_sigchain import build_consortium_history, make_bundle


def fresh_meter(seed=20, updates=0, version=1, binary=b"fw-v1"):
    r = random.Random(seed)
    materials, chain = build_consortium_history(updates, seed=seed + 1)
    bundle = make_bundle(materials, chain, binary=binary, version=version)
    rom = device.Rom("boot-1", materials[0].shared_public_key)
    meter = device.Meter(
        "meter-1",
        crypto.keygen(rng=r),
        rom,
        partition1=sigchain.encode_bundle(bundle),
    )
    meter.boot()
    return meter, materials, chain


def test_sense_and_sign_honest():
    meter, _, _ = fresh_meter()
    reading, sig = meter.sense_and_sign(1500.0, 230.0, 50.0, captured_at=12.5)
    assert reading.voltage_v == 230.0
    assert crypto.verify(meter.tpm_keypair.public_key, reading.canonical_bytes(), sig)


def test_sense_requires_running():
    meter, _, _ = fresh_meter()
    meter.running = False
    with pytest.raises(device.MeterNotRunning):
        meter.sense_and_sign(1.0, 230.0, 50.0, 0.0)


def test_tampered_firmware_signs_altered_value():
    # firmware-level tampering: signature is valid but covers the wrong value
    meter, _, _ = fresh_meter()
    meter.firmware_behavior = "tampered:scale"
    meter.reading_transform = lambda p, v, f: (p * 0.5, v, f)
    reading, sig = meter.sense_and_sign(1000.0, 230.0, 50.0, 3.0)
    assert reading.power_w == 500.0
    assert crypto.verify(meter.tpm_keypair.public_key, reading.canonical_bytes(), sig)


def test_reading_roundtrip():
    reading = device.Reading("m-7", 42.25, 1234.5, 229.987, 49.999)
    decoded = device.decode_reading(reading.canonical_bytes())
    assert decoded == reading
    assert device.decode_reading(reading.canonical_bytes()[:-1]) is None
    assert device.decode_reading(b"") is None


def test_boot_new_valid_bundle_activates():
    meter, materials, chain = fresh_meter(updates=2)
    new = make_bundle(materials, chain, binary=b"fw-v2", version=2)
    meter.receive_firmware(sigchain.encode_bundle(new))
    result = meter.boot()
    assert result.running
    assert result.active_version == 2
    assert meter.partition1 == meter.partition2
    assert meter.current_consortium_key == materials[-1].shared_public_key


def test_boot_stale_epoch_bundle_rolls_back():
    meter, materials, chain = fresh_meter(updates=2)
    digest = crypto.hash(b"fw-v2")
    stale_sig = crypto.threshold_sign(materials[1].shares[:3], digest)
    stale = sigchain.FirmwareBundle(b"fw-v2", stale_sig, chain, 2)
    meter.receive_firmware(sigchain.encode_bundle(stale))
    result = meter.boot()
    assert result.running
    assert result.active_version == 1
    assert ("partition2", "bad-binary-signature", None) in result.rejected


def test_boot_garbage_partition2_rolls_back():
    meter, _, _ = fresh_meter()
    meter.receive_firmware(b"not a bundle at all")
    result = meter.boot()
    assert result.running
    assert result.active_version == 1
    assert result.rejected[0][:2] == ("partition2", "undecodable")


def test_boot_same_version_is_noop():
    meter, materials, chain = fresh_meter()
    again = make_bundle(materials, chain, binary=b"fw-v1", version=1)
    meter.receive_firmware(sigchain.encode_bundle(again))
    result = meter.boot()
    assert result.running
    assert result.active_version == 1
    assert result.rejected == ()


def test_boot_both_partitions_bad_halts():
    meter, _, _ = fresh_meter()
    meter.partition1 = b"\x00" * 40
    meter.partition2 = b"\xff" * 40
    result = meter.boot()
    assert not result.running
    assert result.reason == "no-valid-firmware"
    assert not meter.running


def test_boot_fuzzed_bundles_never_run_invalid():
    # boot safety: across fuzzed partition contents the meter never runs
    # a bundle that fails verification against the ROM root key
    meter, materials, chain = fresh_meter(updates=1)
    good = meter.partition1
    r = random.Random(40)
    for _ in range(200):
        blob = bytearray(good)
        for _ in range(r.randrange(1, 4)):
            blob[r.randrange(len(blob))] ^= r.randrange(1, 256)
        meter.partition2 = bytes(blob)
        result = meter.boot()
        if result.running:
            active = sigchain.decode_bundle(meter.partition1)
            verdict = sigchain.verify_firmware_bundle(meter.rom.root_public_key, active)
            assert verdict.accepted


def test_rollback_preserves_version_on_invalid_update():
    meter, _, _ = fresh_meter()
    before = meter.active_version
    meter.receive_firmware(b"junk")
    result = meter.boot()
    assert result.active_version == before


def test_rom_is_immutable():
    meter, _, _ = fresh_meter()
    with pytest.raises(AttributeError):
        meter.rom = device.Rom("evil", b"\x01" * 33)
    with pytest.raises(Exception):
        meter.rom.root_public_key = b"\x01" * 33


def test_boot_path_module_dependencies():
    # TCB minimality: the boot path (device + sigchain) must not import
    # consensus, contract, or network modules
    package_root = pathlib.Path(device.__file__).parent
    forbidden = {"consensus", "contracts", "simnet", "world", "relay", "adversary", "scenario", "cli"}
    for module in ("device", "sigchain", "crypto"):
        tree = ast.parse((package_root / f"{module}.py").read_text())
        imported = set()
        for node in ast.walk(tree):
            if isinstance(node, ast.Import):
                imported.update(alias.name for alias in node.names)
            elif isinstance(node, ast.ImportFrom):
                if node.module:
                    imported.add(node.module)
                imported.update(alias.name for alias in node.names)
        assert not (imported & forbidden), f"{module} imports {imported & forbidden}"


def test_anomaly_constant_history_identical_reading_passes():
    assert not device.deviation_flag([230.0] * 20, 230.0)


def test_anomaly_half_voltage_flags():
    # z-score oracle: |115 - mean| far exceeds 4 sigma of a 230 +/- 0.5 history
    r = random.Random(8)
    history = [230.0 + r.uniform(-0.5, 0.5) for _ in range(30)]
    assert device.deviation_flag(history, 115.0)
    mean = sum(history) / len(history)
    var = sum((x - mean) ** 2 for x in history) / len(history)
    assert abs(115.0 - mean) > 4.0 * var**0.5  # the oracle itself


def test_anomaly_empty_history_passes():
    assert not device.deviation_flag([], 999.0)


def test_anomaly_detector_over_readings():
    det = device.AnomalyDetector(window=16, k=4.0)
    r = random.Random(9)
    for i in range(20):
        reading = device.Reading("m", float(i), 1000 + r.uniform(-5, 5), 230.0, 50.0)
        assert not det.observe(reading)
    spike = device.Reading("m", 21.0, 100.0, 230.0, 50.0)
    assert det.observe(spike)
