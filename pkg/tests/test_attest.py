from __future__ import annotations

import hashlib
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import u64s
from nestedsgx import Machine, MachineConfig, image_for
from nestedsgx.attest import (
    TAMPERS,
    Aik,
    AmdSp,
    GuestChannel,
    GuestMessage,
    KeyName,
    NestedBundle,
    PayloadType,
    SealedBlob,
    SnpReport,
    TrustAnchors,
    _secret_bytes_for_tests,
    channel_open,
    channel_seal,
    seal,
    tamper_bundle,
    unseal,
    verify_bundle,
)
from nestedsgx.errors import AuthError, BundleError, ChannelError, ParseError, ReplayError, VmplDenied
from nestedsgx.monitor import KeyRequest
from nestedsgx.rng import Drbg

KEY = bytes(range(32))


def _attested(machine, app, data=b"hello"):
    enc = app.load_enclave(image_for("report"))
    res = app.ecall(enc, 0, data.ljust(64, b"\0"))
    bundle = machine.guest.bundle_from_report(res.output)
    anchors = TrustAnchors(machine.vcek_public, machine.launch_digest, enc.mrenclave)
    return enc, bundle, anchors


# -- VMPCK channel -----------------------------------------------------------

def test_channel_roundtrip_and_nonce_binding():
    msg = channel_seal(KEY, 1, 5, PayloadType.KEY_REQ, b"payload")
    assert channel_open(KEY, msg, 5, PayloadType.KEY_REQ) == b"payload"
    assert GuestMessage.from_bytes(msg.to_bytes()) == msg
    with pytest.raises(ReplayError):
        channel_open(KEY, msg, 7)
    with pytest.raises(AuthError):
        channel_open(KEY, replace(msg, channel=2), 5)
    with pytest.raises(AuthError):
        channel_open(KEY, replace(msg, payload_type=PayloadType.REPORT_REQ), 5)
    with pytest.raises(ChannelError):
        channel_open(KEY, msg, 5, PayloadType.REPORT_REQ)
    with pytest.raises(ChannelError):
        GuestMessage.from_bytes(b"short")


@settings(max_examples=100, deadline=None)
@given(bit=st.integers(0, (10 + 7 + 16) * 8 - 1))
def test_any_bit_flip_fails_authentication(bit):
    raw = bytearray(channel_seal(KEY, 1, 3, PayloadType.KEY_REQ, b"seven!!").to_bytes())
    raw[bit // 8] ^= 1 << (bit % 8)
    msg = GuestMessage.from_bytes(bytes(raw))
    with pytest.raises((AuthError, ReplayError)):
        channel_open(KEY, msg, 3)


def test_sp_refuses_replays_and_advances_by_two():
    sp = AmdSp(Drbg(1), bytes(48))
    msg = channel_seal(sp.vmpck[1], 1, 1, PayloadType.KEY_REQ, (1).to_bytes(4, "little"))
    resp = sp.handle_guest_request(msg)
    assert resp.seq == 2 and sp.expected_seq[1] == 3
    with pytest.raises(ReplayError):
        sp.handle_guest_request(msg)
    # the response cannot be fed back as a request either
    with pytest.raises(ReplayError):
        sp.handle_guest_request(resp)


def test_channel_disables_after_a_failed_exchange(machine):
    chan = machine.guest.channel
    machine.relay_filter = lambda m: replace(m, ciphertext=m.ciphertext[:-1] + bytes([m.ciphertext[-1] ^ 1]))
    with pytest.raises(AuthError):
        chan.msg_key_req(1)
    machine.relay_filter = None
    with pytest.raises(ChannelError):
        chan.msg_key_req(1)


def test_tampered_response_is_caught_by_the_guest():
    sp = AmdSp(Drbg(2), bytes(48))

    def evil(msg):
        resp = sp.handle_guest_request(msg)
        return replace(resp, ciphertext=bytes([resp.ciphertext[0] ^ 0x80]) + resp.ciphertext[1:])

    chan = GuestChannel(1, sp.vmpck[1], evil)
    with pytest.raises(AuthError):
        chan.snp_report_req(1, bytes(64))
    assert chan.disabled


def test_guest_cannot_get_vmpl0_material(machine):
    with pytest.raises(VmplDenied):
        machine.guest.channel.snp_report_req(0, bytes(64))
    with pytest.raises(VmplDenied):
        machine.guest.channel.msg_key_req(0)
    # a refused request is still a clean exchange, so the channel keeps working
    assert machine.guest_report().vmpl == 1


def test_host_sees_only_ciphertext(machine, app):
    enc, bundle, _ = _attested(machine, app, b"needle-in-report")
    key = machine.guest.channel.msg_key_req(1)
    assert machine.transcript
    for blob in machine.transcript:
        assert b"needle-in-report" not in blob
        assert key not in blob
        assert bundle.snp_report.launch_digest not in blob


# -- reports and bundles -------------------------------------------------------

def test_snp_report_roundtrips(machine):
    r = machine.guest_report(b"x" * 64)
    assert SnpReport.from_bytes(r.to_bytes()) == r
    assert SnpReport.from_json(r.to_json()) == r
    assert SnpReport.from_dict(r.to_dict()) == r


def test_honest_bundle_accepts(machine, app):
    enc, bundle, anchors = _attested(machine, app)
    assert str(verify_bundle(bundle, anchors)) == "Accept"
    assert bundle.snp_report.vmpl == 0
    assert bundle.snp_report.report_data[:32] == hashlib.sha256(bundle.aik_public).digest()
    assert bundle.enclave_report.mrenclave == enc.mrenclave
    assert bundle.enclave_report.report_data.startswith(b"hello")


def test_bundle_json_roundtrip(machine, app):
    _, bundle, anchors = _attested(machine, app)
    assert NestedBundle.from_json(bundle.to_json()) == bundle
    assert TrustAnchors.from_json(anchors.to_json()) == anchors


@pytest.mark.parametrize("text,line", [("{", 1), ('{\n"snp_report": 3\n}', None), ("[]", None)])
def test_bundle_parse_errors(text, line):
    with pytest.raises(ParseError) as info:
        NestedBundle.from_json(text)
    if line is not None:
        assert info.value.line == line


def test_bundle_rejects_bad_base64(machine, app):
    _, bundle, _ = _attested(machine, app)
    doc = bundle.to_json().replace(bundle.to_json().split('"aik_public": "')[1].split('"')[0], "!!notb64")
    with pytest.raises(ParseError):
        NestedBundle.from_json(doc)


@pytest.mark.parametrize("name", sorted(TAMPERS))
def test_tamper_reasons(machine, app, name):
    _, bundle, anchors = _attested(machine, app)
    bad = tamper_bundle(bundle, name, rng=Drbg(3), guest_report=machine.guest_report())
    assert bad != bundle
    assert str(verify_bundle(bad, anchors)) == f"Reject({TAMPERS[name][1]})"


def test_set_vmpl_needs_a_guest_report(machine, app):
    _, bundle, _ = _attested(machine, app)
    with pytest.raises(BundleError):
        tamper_bundle(bundle, "set-vmpl")
    with pytest.raises(BundleError):
        tamper_bundle(bundle, "no-such-transform")


def test_anchor_mismatches(machine, app):
    _, bundle, anchors = _attested(machine, app)
    other = Machine(MachineConfig(seed=2, total_pages=1024, vmpl0_pages=600))
    assert str(verify_bundle(bundle, replace(anchors, launch_digest=other.launch_digest))) \
        == "Reject(launch-digest)"
    assert str(verify_bundle(bundle, replace(anchors, mrenclave=bytes(32)))) == "Reject(mrenclave)"
    assert str(verify_bundle(bundle, replace(anchors, vcek_public=other.vcek_public))) \
        == "Reject(vcek-signature)"


def test_aik_private_key_never_leaves(machine, app, tmp_path):
    _, bundle, anchors = _attested(machine, app)
    secret = _secret_bytes_for_tests(machine.monitor.aik)
    outputs = [bundle.to_json().encode(), anchors.to_json().encode(), repr(machine.monitor.aik).encode(),
               machine.ledger.to_json().encode(), *machine.transcript]
    for gpn in range(machine.layout.vmpl0_pages, machine.layout.total_gpa_pages):
        outputs.append(machine.phys.read_page(gpn))
    for blob in outputs:
        assert secret not in blob
    with pytest.raises(TypeError):
        import pickle
        pickle.dumps(machine.monitor.aik)


def test_bundle_needs_a_binding_report():
    aik = Aik(Drbg(4))
    from nestedsgx.attest import EnclaveReport, build_bundle
    with pytest.raises(BundleError):
        build_bundle(aik, None, EnclaveReport(bytes(32), 0, bytes(64)))


# -- sealing ---------------------------------------------------------------

def test_seal_roundtrip_and_failures():
    rng = Drbg(5)
    blob = seal(KEY, b"secret", b"i" * 16, rng)
    assert unseal(KEY, SealedBlob.from_bytes(blob.to_bytes())) == b"secret"
    with pytest.raises(AuthError):
        unseal(bytes(32), blob)
    with pytest.raises(AuthError):
        unseal(KEY, replace(blob, key_id=b"j" * 16))
    with pytest.raises(AuthError):
        unseal(KEY, replace(blob, ciphertext=bytes([blob.ciphertext[0] ^ 1]) + blob.ciphertext[1:]))


def test_sealing_keys_separate_enclaves_and_machines(machine, app):
    mon = machine.monitor
    a = app.load_enclave(image_for("adder"))
    b = app.load_enclave(image_for("spin", param_gva=0x7100_0000))
    # same image in another App: param_gva is baked into the code, so it must match
    again = machine.guest.spawn().load_enclave(image_for("adder"))
    assert again.mrenclave == a.mrenclave
    req = KeyRequest(KeyName.SEAL_KEY, b"q" * 16)
    blob = seal(mon.egetkey(a.eid, req), b"data", req.key_id, machine.rng.child("seal"))
    assert unseal(mon.egetkey(again.eid, req), blob) == b"data"
    with pytest.raises(AuthError):
        unseal(mon.egetkey(b.eid, req), blob)
    other = Machine(MachineConfig(seed=99))
    enc = other.guest.spawn().load_enclave(image_for("adder"))
    with pytest.raises(AuthError):
        unseal(other.monitor.egetkey(enc.eid, req), blob)


def test_vmpl0_and_vmpl1_keys_differ(machine):
    assert machine.guest.channel.msg_key_req(1) != machine.monitor._guest_key
    assert machine.amd_sp.guest_key(0, 0) == machine.monitor._guest_key


def test_egetkey_from_enclave_code(machine, app):
    """The seal-key program derives a key inside the enclave and returns nothing."""
    enc = app.load_enclave(image_for("seal-key"))
    res = app.ecall(enc, 0, KeyRequest(KeyName.SEAL_KEY, bytes(16)).to_bytes())
    assert res.completed and res.output == b""
    key = machine.monitor.egetkey(enc.eid, KeyRequest(KeyName.SEAL_KEY, bytes(16)))
    for gpn in range(machine.layout.vmpl0_pages, machine.layout.total_gpa_pages):
        assert key not in machine.phys.read_page(gpn)


def test_seeded_machines_are_reproducible():
    a, b = Machine(MachineConfig(seed=12)), Machine(MachineConfig(seed=12))
    assert a.vcek_public == b.vcek_public
    assert a.monitor.aik.public == b.monitor.aik.public
    c = Machine(MachineConfig(seed=13))
    assert c.vcek_public != a.vcek_public
    rnd = random.Random(0)
    data = bytes(rnd.randrange(256) for _ in range(64))
    assert a.guest_report(data).signature == b.guest_report(data).signature
    assert u64s(1)  # helper import stays exercised
