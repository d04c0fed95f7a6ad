"""Canonical enclave programs used by the samples, the attack scripts and tests.

All of them follow the parameter-buffer convention: ``PARAM+0`` kind,
``PARAM+8`` index, ``PARAM+16`` length, ``PARAM+24`` data.
"""
from __future__ import annotations

from .image import EnclaveImage, standard_image

ADDER = """
; returns data[0] + data[1]
        load  r2, [PARAM+24]
        load  r3, [PARAM+32]
        add   r2, r3
        store [PARAM+24], r2
        loadi r4, 8
        store [PARAM+16], r4
        loadi r4, 0
        store [PARAM], r4
        syscall EEXIT
"""

OCALL_ONCE = """
; asks the host for a value through OCALL 7, returns it plus one
        load  r2, [PARAM]
        jnz   r2, returned
        loadi r3, 1
        store [PARAM], r3
        loadi r3, 7
        store [PARAM+8], r3
        loadi r3, 0
        store [PARAM+16], r3
        syscall EEXIT
returned:
        load  r4, [PARAM+24]
        loadi r5, 1
        add   r4, r5
        store [PARAM+24], r4
        loadi r3, 8
        store [PARAM+16], r3
        loadi r3, 0
        store [PARAM], r3
        syscall EEXIT
"""

SPIN = """
; counts data[0] down to zero, keeping a running sum in enclave memory
        load  r2, [PARAM+24]
        loadi r3, -1
        loadi r6, 0x9E3779B97F4A7C15
loop:   add   r2, r3
        add   r5, r2
        xor   r7, r6
        add   r7, r5
        store [DATA], r5
        load  r8, [DATA]
        jnz   r2, loop
        store [PARAM+24], r5
        loadi r4, 8
        store [PARAM+16], r4
        loadi r4, 0
        store [PARAM], r4
        syscall EEXIT
"""

REPORT = """
; EREPORT over the first 64 input bytes; the signed report replaces the input
        loadi r1, PARAM+24
        loadi r2, PARAM+24
        syscall EREPORT, r1, r2
        loadi r3, 168
        store [PARAM+16], r3
        loadi r3, 0
        store [PARAM], r3
        syscall EEXIT
"""

SEAL_KEY = """
; EGETKEY with the request in the input; the key stays in enclave memory
        loadi r1, PARAM+24
        loadi r2, DATA
        syscall EGETKEY, r1, r2
        loadi r3, 0
        store [PARAM+16], r3
        store [PARAM], r3
        syscall EEXIT
"""

PROGRAMS = {"adder": ADDER, "ocall": OCALL_ONCE, "spin": SPIN, "report": REPORT, "seal-key": SEAL_KEY}


def image_for(name: str, **kw) -> EnclaveImage:
    return standard_image(PROGRAMS[name], name=name, **kw)
