"""Deterministic simulator of SGX-style enclaves hosted at VMPL0 of an SEV-SNP guest.

Typical use::

    from nestedsgx import Machine, image_for

    m = Machine()
    app = m.guest.spawn()
    enc = app.load_enclave(image_for("adder"))
    app.ecall(enc, 0, (5).to_bytes(8, "little") + (7).to_bytes(8, "little")).output
"""
from __future__ import annotations

from .attest import NestedBundle, TrustAnchors, Verdict, tamper_bundle, verify_bundle
from .errors import ParseError, SimError
from .guest import AttackKind, AttackScript, AttackVerdict
from .image import EnclaveImage, offline_mrenclave, standard_image
from .machine import Machine, MachineConfig, expected_launch_digest
from .manifest import load_manifest
from .programs import PROGRAMS, image_for
from .scenario import load_scenario, run_scenario

__version__ = "0.1.0"

__all__ = [
    "AttackKind", "AttackScript", "AttackVerdict", "EnclaveImage", "Machine", "MachineConfig",
    "NestedBundle", "PROGRAMS", "ParseError", "SimError", "TrustAnchors", "Verdict",
    "expected_launch_digest", "image_for", "load_manifest", "load_scenario", "offline_mrenclave",
    "run_scenario", "standard_image", "tamper_bundle", "verify_bundle",
]
