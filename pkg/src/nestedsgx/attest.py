"""AMD-SP model, VMPCK message channel, attestation bundle, and sealing.

Chain of trust: the VCEK signs an SNP report whose user data carries the
SHA-256 of the monitor's AIK public key; the AIK signs each enclave report.
A verifier needs only the VCEK public key, the expected launch digest and
the expected MRENCLAVE.
"""
from __future__ import annotations

import base64
import enum
import hashlib
import hmac
import json
import struct
from dataclasses import dataclass, replace
from typing import Callable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, ed25519
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthError, BundleError, ChannelError, ParseError, ReplayError, VmplDenied
from .mem import NUM_VMPLS
from .rng import Drbg

REPORT_DATA_SIZE = 64
LAUNCH_DIGEST_SIZE = 48
SNP_REPORT_VERSION = 2
_P384_ORDER = int("FFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFC7634D81F4372DDF581A0DB248B0A77AECEC196ACCC52973", 16)
_ECDSA = ec.ECDSA(hashes.SHA384(), deterministic_signing=True)


def kdf(key: bytes, *parts: bytes) -> bytes:
    return hmac.new(key, b"".join(parts), hashlib.sha256).digest()


# --- VMPCK channel ---------------------------------------------------------

class PayloadType(enum.IntEnum):
    REPORT_REQ = 1
    REPORT_RESP = 2
    KEY_REQ = 3
    KEY_RESP = 4


_HDR = struct.Struct("<QBB")
STATUS_OK = 0
STATUS_INVALID_PARAM = 0x16


@dataclass(frozen=True)
class GuestMessage:
    seq: int
    channel: int
    payload_type: int
    ciphertext: bytes  # includes the 16-byte GCM tag

    def header(self) -> bytes:
        return _HDR.pack(self.seq, self.channel, self.payload_type)

    def to_bytes(self) -> bytes:
        return self.header() + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "GuestMessage":
        if len(raw) < _HDR.size + 16:
            raise ChannelError("truncated guest message")
        seq, channel, ptype = _HDR.unpack_from(raw)
        return cls(seq, channel, ptype, bytes(raw[_HDR.size:]))


def _nonce(channel: int, seq: int) -> bytes:
    return channel.to_bytes(4, "little") + seq.to_bytes(8, "little")


def channel_seal(key: bytes, channel: int, seq: int, payload_type: int, payload: bytes) -> GuestMessage:
    hdr = _HDR.pack(seq, channel, payload_type)
    return GuestMessage(seq, channel, payload_type, AESGCM(key).encrypt(_nonce(channel, seq), payload, hdr))


def channel_open(key: bytes, msg: GuestMessage, expected_seq: int,
                 expected_type: int | None = None) -> bytes:
    """Authenticate and decrypt; sequence numbers other than ``expected_seq`` are refused."""
    if msg.seq != expected_seq:
        raise ReplayError(f"sequence {msg.seq} on channel {msg.channel}, expected {expected_seq}")
    if not 0 <= msg.channel < NUM_VMPLS:
        raise AuthError("message names an unknown channel")
    try:
        payload = AESGCM(key).decrypt(_nonce(msg.channel, msg.seq), msg.ciphertext, msg.header())
    except InvalidTag:
        raise AuthError("guest message failed authentication") from None
    if expected_type is not None and msg.payload_type != expected_type:
        raise ChannelError(f"unexpected payload type {msg.payload_type}")
    return payload


# --- reports ---------------------------------------------------------------

_SNP_BODY = struct.Struct("<II48s64s")


@dataclass(frozen=True)
class SnpReport:
    vmpl: int
    launch_digest: bytes
    report_data: bytes
    signature: bytes = b""
    version: int = SNP_REPORT_VERSION

    def body(self) -> bytes:
        return _SNP_BODY.pack(self.version, self.vmpl, self.launch_digest, self.report_data)

    def to_bytes(self) -> bytes:
        return self.body() + self.signature

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SnpReport":
        version, vmpl, ld, rd = _SNP_BODY.unpack_from(raw)
        return cls(vmpl, ld, rd, bytes(raw[_SNP_BODY.size:]), version)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "vmpl": self.vmpl,
            "launch_digest": _b64(self.launch_digest),
            "report_data": _b64(self.report_data),
            "signature": _b64(self.signature),
        }

    @classmethod
    def from_dict(cls, r: dict) -> "SnpReport":
        return cls(int(r["vmpl"]), _unb64(r["launch_digest"], "launch_digest"),
                   _unb64(r["report_data"], "report_data"), _unb64(r["signature"], "signature"),
                   int(r["version"]))

    def to_json(self) -> str:
        return json.dumps({"format": "nestedsgx-snp-report/1", "snp_report": self.to_dict()}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SnpReport":
        try:
            return cls.from_dict(json.loads(text)["snp_report"])
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, line=exc.lineno) from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"missing or malformed field {exc}") from None


def _sign_p384(key: ec.EllipticCurvePrivateKey, data: bytes) -> bytes:
    r, s = decode_dss_signature(key.sign(data, _ECDSA))
    return r.to_bytes(48, "big") + s.to_bytes(48, "big")


def verify_snp_signature(report: SnpReport, vcek_public: bytes) -> bool:
    if len(report.signature) != 96:
        return False
    try:
        pub = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP384R1(), vcek_public)
        sig = encode_dss_signature(int.from_bytes(report.signature[:48], "big"),
                                   int.from_bytes(report.signature[48:], "big"))
        pub.verify(sig, report.body(), _ECDSA)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class EnclaveReport:
    mrenclave: bytes
    attributes: int
    report_data: bytes

    SIZE = 104

    def to_bytes(self) -> bytes:
        return struct.pack("<32sQ64s", self.mrenclave, self.attributes, self.report_data)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EnclaveReport":
        m, attrs, rd = struct.unpack("<32sQ64s", raw[:cls.SIZE])
        return cls(m, attrs, rd)


class AmdSp:
    """Security processor: root secret, VCEK, one VMPCK per VMPL."""

    def __init__(self, rng: Drbg, launch_digest: bytes) -> None:
        if len(launch_digest) != LAUNCH_DIGEST_SIZE:
            raise ValueError("launch digest is 48 bytes")
        self.root_secret = rng.bytes(32)
        scalar = int.from_bytes(rng.bytes(56), "big") % (_P384_ORDER - 1) + 1
        self._vcek = ec.derive_private_key(scalar, ec.SECP384R1())
        self.vmpck = [rng.bytes(32) for _ in range(NUM_VMPLS)]
        if len(set(self.vmpck)) != NUM_VMPLS:
            raise RuntimeError("VMPCK collision")
        self.expected_seq = [1] * NUM_VMPLS
        self.launch_digest = launch_digest

    @property
    def vcek_public(self) -> bytes:
        return self._vcek.public_key().public_bytes(
            serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint)

    def snp_report(self, caller_vmpl: int, requested_vmpl: int, report_data: bytes) -> SnpReport:
        if len(report_data) != REPORT_DATA_SIZE:
            raise ValueError("report data is 64 bytes")
        if not 0 <= requested_vmpl < NUM_VMPLS:
            raise VmplDenied(f"VMPL{requested_vmpl} does not exist")
        if requested_vmpl < caller_vmpl:
            raise VmplDenied(f"VMPL{caller_vmpl} may not request a VMPL{requested_vmpl} report")
        report = SnpReport(requested_vmpl, self.launch_digest, report_data)
        return replace(report, signature=_sign_p384(self._vcek, report.body()))

    def guest_key(self, caller_vmpl: int, requested_vmpl: int) -> bytes:
        if not 0 <= requested_vmpl < NUM_VMPLS or requested_vmpl < caller_vmpl:
            raise VmplDenied(f"VMPL{caller_vmpl} may not derive a VMPL{requested_vmpl} key")
        return kdf(self.root_secret, b"guest-key", bytes([requested_vmpl]))

    def handle_guest_request(self, msg: GuestMessage) -> GuestMessage:
        """SNP_GUEST_REQUEST: the channel index identifies the requester's VMPL."""
        ch = msg.channel
        if not 0 <= ch < NUM_VMPLS:
            raise AuthError("unknown VMPCK")
        payload = channel_open(self.vmpck[ch], msg, self.expected_seq[ch])
        self.expected_seq[ch] += 2
        if msg.payload_type == PayloadType.REPORT_REQ:
            requested, data = struct.unpack("<I64s", payload)
            try:
                resp = struct.pack("<I", STATUS_OK) + self.snp_report(ch, requested, data).to_bytes()
            except VmplDenied:
                resp = struct.pack("<I", STATUS_INVALID_PARAM)
            rtype = PayloadType.REPORT_RESP
        elif msg.payload_type == PayloadType.KEY_REQ:
            (requested,) = struct.unpack("<I", payload)
            try:
                resp = struct.pack("<I", STATUS_OK) + self.guest_key(ch, requested)
            except VmplDenied:
                resp = struct.pack("<I", STATUS_INVALID_PARAM)
            rtype = PayloadType.KEY_RESP
        else:
            raise ChannelError(f"unsupported payload type {msg.payload_type}")
        return channel_seal(self.vmpck[ch], ch, msg.seq + 1, rtype, resp)


Transport = Callable[[GuestMessage], GuestMessage]


class GuestChannel:
    """Guest-side endpoint of one VMPCK channel.

    ``transport`` relays messages through the (untrusted) host; swap it to
    model tampering, dropping or replay.
    """

    def __init__(self, vmpck_index: int, key: bytes, transport: Transport) -> None:
        self.index = vmpck_index
        self.key = key
        self.transport = transport
        self.seq = 1
        self.disabled = False

    def _roundtrip(self, ptype: PayloadType, payload: bytes, rtype: PayloadType) -> bytes:
        if self.disabled:
            raise ChannelError(f"VMPCK{self.index} channel disabled after a failed exchange")
        msg = channel_seal(self.key, self.index, self.seq, ptype, payload)
        try:
            resp = self.transport(msg)
            plain = channel_open(self.key, resp, self.seq + 1, rtype)
        except Exception:
            # the sequence state is now unknown; retrying could reuse a nonce
            self.disabled = True
            raise
        self.seq += 2
        (status,) = struct.unpack_from("<I", plain)
        if status == STATUS_INVALID_PARAM:
            raise VmplDenied("AMD-SP refused the requested VMPL")
        if status != STATUS_OK:
            raise ChannelError(f"AMD-SP status {status:#x}")
        return plain[4:]

    def snp_report_req(self, requested_vmpl: int, report_data: bytes) -> SnpReport:
        raw = self._roundtrip(PayloadType.REPORT_REQ, struct.pack("<I64s", requested_vmpl, report_data),
                              PayloadType.REPORT_RESP)
        return SnpReport.from_bytes(raw)

    def msg_key_req(self, requested_vmpl: int) -> bytes:
        return self._roundtrip(PayloadType.KEY_REQ, struct.pack("<I", requested_vmpl), PayloadType.KEY_RESP)


# --- AIK and the bundle ----------------------------------------------------

class Aik:
    """Attestation identity key.  The private half stays inside this object."""

    def __init__(self, rng: Drbg) -> None:
        self.__private = ed25519.Ed25519PrivateKey.from_private_bytes(rng.bytes(32))
        self.public = self.__private.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    @property
    def public_digest(self) -> bytes:
        return hashlib.sha256(self.public).digest()

    def binding_report_data(self) -> bytes:
        return self.public_digest + bytes(32)

    def sign(self, data: bytes) -> bytes:
        return self.__private.sign(data)

    def __repr__(self) -> str:
        return f"Aik(public={self.public.hex()})"

    def __reduce__(self):
        raise TypeError("the AIK cannot be serialized")


def _secret_bytes_for_tests(aik: Aik) -> bytes:
    return aik._Aik__private.private_bytes(  # type: ignore[attr-defined]
        serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption())


def verify_ed25519(public: bytes, sig: bytes, data: bytes) -> bool:
    try:
        ed25519.Ed25519PublicKey.from_public_bytes(public).verify(sig, data)
    except (InvalidSignature, ValueError):
        return False
    return True


def _b64(b: bytes) -> str:
    return base64.b64encode(b).decode("ascii")


def _unb64(s: str, field: str) -> bytes:
    try:
        return base64.b64decode(s, validate=True)
    except (ValueError, TypeError):
        raise ParseError("invalid base64", field=field) from None


@dataclass(frozen=True)
class NestedBundle:
    snp_report: SnpReport
    aik_public: bytes
    enclave_report: EnclaveReport
    enclave_sig: bytes

    def to_json(self) -> str:
        r, e = self.snp_report, self.enclave_report
        doc = {
            "format": "nestedsgx-bundle/1",
            "snp_report": r.to_dict(),
            "aik_public": _b64(self.aik_public),
            "enclave_report": {
                "mrenclave": _b64(e.mrenclave),
                "attributes": e.attributes,
                "report_data": _b64(e.report_data),
            },
            "enclave_sig": _b64(self.enclave_sig),
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "NestedBundle":
        try:
            doc = json.loads(text)
            r, e = doc["snp_report"], doc["enclave_report"]
            return cls(
                SnpReport.from_dict(r),
                _unb64(doc["aik_public"], "aik_public"),
                EnclaveReport(_unb64(e["mrenclave"], "mrenclave"), int(e["attributes"]),
                              _unb64(e["report_data"], "enclave_report.report_data")),
                _unb64(doc["enclave_sig"], "enclave_sig"),
            )
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, line=exc.lineno) from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"missing or malformed field {exc}") from None


def build_bundle(aik: Aik, binding_report: SnpReport | None, enclave_report: EnclaveReport) -> NestedBundle:
    if binding_report is None or binding_report.report_data[:32] != aik.public_digest:
        raise BundleError("no SNP report binding this AIK")
    return NestedBundle(binding_report, aik.public, enclave_report, aik.sign(enclave_report.to_bytes()))


@dataclass(frozen=True)
class TrustAnchors:
    vcek_public: bytes
    launch_digest: bytes
    mrenclave: bytes

    def to_json(self) -> str:
        return json.dumps({
            "vcek_public": self.vcek_public.hex(),
            "launch_digest": self.launch_digest.hex(),
            "mrenclave": self.mrenclave.hex(),
        }, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrustAnchors":
        try:
            doc = json.loads(text)
            return cls(bytes.fromhex(doc["vcek_public"]), bytes.fromhex(doc["launch_digest"]),
                       bytes.fromhex(doc["mrenclave"]))
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, line=exc.lineno) from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"missing or malformed field {exc}") from None


REASON_VCEK = "vcek-signature"
REASON_VMPL = "vmpl"
REASON_LAUNCH = "launch-digest"
REASON_AIK = "aik-binding"
REASON_ENCLAVE_SIG = "enclave-signature"
REASON_MRENCLAVE = "mrenclave"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str | None = None

    def __str__(self) -> str:
        return "Accept" if self.accepted else f"Reject({self.reason})"


def verify_bundle(bundle: NestedBundle, trust: TrustAnchors) -> Verdict:
    """Check the six links of the chain in order; report the first broken one."""
    r = bundle.snp_report
    if not verify_snp_signature(r, trust.vcek_public):
        return Verdict(False, REASON_VCEK)
    if r.vmpl != 0:
        return Verdict(False, REASON_VMPL)
    if not hmac.compare_digest(r.launch_digest, trust.launch_digest):
        return Verdict(False, REASON_LAUNCH)
    if hashlib.sha256(bundle.aik_public).digest() != r.report_data[:32]:
        return Verdict(False, REASON_AIK)
    if not verify_ed25519(bundle.aik_public, bundle.enclave_sig, bundle.enclave_report.to_bytes()):
        return Verdict(False, REASON_ENCLAVE_SIG)
    if not hmac.compare_digest(bundle.enclave_report.mrenclave, trust.mrenclave):
        return Verdict(False, REASON_MRENCLAVE)
    return Verdict(True)


# --- tamper transformations ------------------------------------------------

def _flip(b: bytes, bit: int = 0) -> bytes:
    out = bytearray(b)
    out[(bit // 8) % len(out)] ^= 1 << (bit % 8)
    return bytes(out)


def _t_launch(b: NestedBundle, **_) -> NestedBundle:
    return replace(b, snp_report=replace(b.snp_report, launch_digest=_flip(b.snp_report.launch_digest)))


def _t_report_data(b: NestedBundle, **_) -> NestedBundle:
    return replace(b, snp_report=replace(b.snp_report, report_data=_flip(b.snp_report.report_data)))


def _t_wrong_vcek(b: NestedBundle, *, rng: Drbg, **_) -> NestedBundle:
    scalar = int.from_bytes(rng.bytes(56), "big") % (_P384_ORDER - 1) + 1
    rogue = ec.derive_private_key(scalar, ec.SECP384R1())
    return replace(b, snp_report=replace(b.snp_report, signature=_sign_p384(rogue, b.snp_report.body())))


def _t_swap_aik(b: NestedBundle, *, rng: Drbg, **_) -> NestedBundle:
    rogue = Aik(rng)
    return replace(b, aik_public=rogue.public, enclave_sig=rogue.sign(b.enclave_report.to_bytes()))


def _t_mrenclave(b: NestedBundle, **_) -> NestedBundle:
    return replace(b, enclave_report=replace(b.enclave_report, mrenclave=_flip(b.enclave_report.mrenclave)))


def _t_enclave_sig(b: NestedBundle, **_) -> NestedBundle:
    return replace(b, enclave_sig=_flip(b.enclave_sig, 8 * 5))


def _t_vmpl(b: NestedBundle, *, guest_report: SnpReport | None = None, **_) -> NestedBundle:
    if guest_report is None:
        raise BundleError("set-vmpl needs a genuine guest-issued SNP report")
    return replace(b, snp_report=guest_report)


TAMPERS: dict[str, tuple[Callable[..., NestedBundle], str]] = {
    "flip-launch-digest": (_t_launch, REASON_VCEK),
    "flip-report-data": (_t_report_data, REASON_VCEK),
    "resign-wrong-vcek": (_t_wrong_vcek, REASON_VCEK),
    "swap-aik": (_t_swap_aik, REASON_AIK),
    "flip-mrenclave": (_t_mrenclave, REASON_ENCLAVE_SIG),
    "flip-enclave-sig": (_t_enclave_sig, REASON_ENCLAVE_SIG),
    "set-vmpl": (_t_vmpl, REASON_VMPL),
}


def tamper_bundle(bundle: NestedBundle, name: str, *, rng: Drbg | None = None,
                  guest_report: SnpReport | None = None) -> NestedBundle:
    try:
        fn, _ = TAMPERS[name]
    except KeyError:
        raise BundleError(f"unknown tamper transformation {name!r}") from None
    return fn(bundle, rng=rng or Drbg(None), guest_report=guest_report)


# --- sealing ---------------------------------------------------------------

class KeyName(enum.IntEnum):
    REPORT_KEY = 3
    SEAL_KEY = 4


def derive_enclave_key(guest_key: bytes, key_name: int, mrenclave: bytes, key_id: bytes) -> bytes:
    if len(key_id) != 16:
        raise ValueError("key_id is 16 bytes")
    return kdf(guest_key, struct.pack("<H", key_name), mrenclave, key_id)


def derive_sealing_key(guest_key: bytes, mrenclave: bytes, key_id: bytes) -> bytes:
    return derive_enclave_key(guest_key, KeyName.SEAL_KEY, mrenclave, key_id)


@dataclass(frozen=True)
class SealedBlob:
    key_id: bytes
    nonce: bytes
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return self.key_id + self.nonce + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedBlob":
        return cls(raw[:16], raw[16:28], raw[28:])


def seal(key: bytes, plaintext: bytes, key_id: bytes, rng: Drbg) -> SealedBlob:
    nonce = rng.bytes(12)
    return SealedBlob(key_id, nonce, AESGCM(key).encrypt(nonce, plaintext, key_id))


def unseal(key: bytes, blob: SealedBlob) -> bytes:
    try:
        return AESGCM(key).decrypt(blob.nonce, blob.ciphertext, blob.key_id)
    except InvalidTag:
        raise AuthError("sealed blob failed authentication") from None
