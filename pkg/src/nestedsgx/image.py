"""Enclave images: the ordered page list the loader feeds through EADD/EEXTEND.

``offline_mrenclave`` replays the measurement log for an image without
building a machine, which is how ``nestedsgx measure`` computes digests.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .evm import Program, assemble
from .measurement import EEXTEND_CHUNK, MeasurementLog
from .mem import PAGE_SIZE, VmplPerms

PAGE_TCS = 1
PAGE_REG = 2

# TCS field offsets (SGX layout); OSSA and OENTRY are enclave-relative
TCS_OSSA = 0x10
TCS_CSSA = 0x18
TCS_NSSA = 0x1C
TCS_OENTRY = 0x20

DEFAULT_BASE = 0x40_0000
DEFAULT_SIZE = 0x10_0000
DEFAULT_PARAM_GVA = 0x7000_0000


@dataclass(frozen=True)
class ImagePage:
    gva: int
    page_type: int  # 1 TCS, 2 REG
    perms: VmplPerms
    content: bytes
    measure: bool = True

    def __post_init__(self) -> None:
        if len(self.content) != PAGE_SIZE:
            object.__setattr__(self, "content", bytes(self.content).ljust(PAGE_SIZE, b"\0")[:PAGE_SIZE])


@dataclass(frozen=True)
class EnclaveImage:
    name: str
    base_gva: int
    size: int
    ssa_frame_size: int = 1
    attributes: int = 0
    pages: tuple[ImagePage, ...] = ()
    param_gva: int = DEFAULT_PARAM_GVA
    param_pages: int = 1
    tcs_gvas: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "pages", tuple(self.pages))
        if not self.tcs_gvas:
            object.__setattr__(self, "tcs_gvas", tuple(p.gva for p in self.pages if p.page_type == PAGE_TCS))


def offline_mrenclave(image: EnclaveImage) -> bytes:
    log = MeasurementLog()
    log.ecreate(image.ssa_frame_size, image.size)
    for page in image.pages:
        offset = page.gva - image.base_gva
        log.eadd(offset, page.page_type, page.perms.bits)
        if page.measure:
            for off in range(0, PAGE_SIZE, EEXTEND_CHUNK):
                log.eextend(offset + off, page.content[off:off + EEXTEND_CHUNK])
    return log.freeze()


def build_tcs_page(oentry: int, ossa: int, nssa: int = 1) -> bytes:
    page = bytearray(PAGE_SIZE)
    struct.pack_into("<Q", page, TCS_OSSA, ossa)
    struct.pack_into("<II", page, TCS_CSSA, 0, nssa)
    struct.pack_into("<Q", page, TCS_OENTRY, oentry)
    return bytes(page)


def standard_image(program: Program | str, *, name: str = "enclave", base_gva: int = DEFAULT_BASE,
                   size: int = DEFAULT_SIZE, param_gva: int = DEFAULT_PARAM_GVA, param_pages: int = 1,
                   nssa: int = 1, ssa_frame_size: int = 1, data_pages: int = 1, threads: int = 1,
                   attributes: int = 0, entry: str | int = 0) -> EnclaveImage:
    """Conventional layout: TCS pages, SSA frames, code, then data.

    Assembly text is assembled in place with ``PARAM`` (the parameter buffer),
    ``DATA`` (first data page) and ``BASE`` predefined.
    """
    tcs_off = 0
    ssa_off = threads * PAGE_SIZE
    ssa_pages = threads * nssa * ssa_frame_size
    code_off = ssa_off + ssa_pages * PAGE_SIZE
    if isinstance(program, str):
        # code size is unknown until assembled; assemble once to size it
        probe = assemble(program, entry=entry, symbols={"PARAM": param_gva, "BASE": base_gva, "DATA": 0})
        ncode = max(1, -(-len(probe.encode()) // PAGE_SIZE))
        data_off = code_off + ncode * PAGE_SIZE
        program = assemble(program, base_gva + code_off, entry,
                           {"PARAM": param_gva, "BASE": base_gva, "DATA": base_gva + data_off})
    else:
        program = Program(program.instructions, program.entry, base_gva + code_off)
    code = program.encode()
    ncode = max(1, -(-len(code) // PAGE_SIZE))
    data_off = code_off + ncode * PAGE_SIZE
    rw, rx = VmplPerms(True, True, False), VmplPerms(True, False, True)
    pages = []
    for t in range(threads):
        ossa = ssa_off + t * nssa * ssa_frame_size * PAGE_SIZE
        pages.append(ImagePage(base_gva + tcs_off + t * PAGE_SIZE, PAGE_TCS, VmplPerms(),
                               build_tcs_page(code_off + program.entry * 16, ossa, nssa)))
    for k in range(ssa_pages):
        pages.append(ImagePage(base_gva + ssa_off + k * PAGE_SIZE, PAGE_REG, rw, bytes(PAGE_SIZE)))
    for k in range(ncode):
        pages.append(ImagePage(base_gva + code_off + k * PAGE_SIZE, PAGE_REG, rx,
                               code[k * PAGE_SIZE:(k + 1) * PAGE_SIZE]))
    for k in range(data_pages):
        pages.append(ImagePage(base_gva + data_off + k * PAGE_SIZE, PAGE_REG, rw, bytes(PAGE_SIZE)))
    if data_off + data_pages * PAGE_SIZE > size:
        raise ValueError(f"image needs {data_off + data_pages * PAGE_SIZE:#x} bytes, enclave is {size:#x}")
    return EnclaveImage(name, base_gva, size, ssa_frame_size, attributes, tuple(pages), param_gva, param_pages)
