"""Enclave manifests (YAML) and their translation into :class:`EnclaveImage`.

Two forms are accepted.  The short form gives only a program and lets the
standard layout place TCS, SSA, code and data pages::

    name: adder
    program: |
      load r2, [PARAM+24]
      ...
    layout: {nssa: 1, data_pages: 1}

The explicit form lists every page in EADD order::

    name: custom
    base_gva: 0x400000
    size: 0x100000
    param_buffer: {gva: 0x70000000, pages: 1}
    entry_point: start
    program: |
      start: ...
    pages:
      - {gva: 0x400000, type: TCS, tcs: {ossa: 0x1000, nssa: 1}}
      - {gva: 0x401000, type: REG, perms: rw, content: zero}
      - {gva: 0x402000, type: REG, perms: rx, content: program}
      - {gva: 0x403000, type: REG, perms: r, content: "hex:00ff", measure: false}

For REG pages ``content`` is ``zero``, ``program`` (successive program pages
take successive 4 KiB chunks of the assembled code), ``hex:<bytes>`` or
``file:<path>`` relative to the manifest.  TCS pages are built from their
``tcs`` mapping.  ``PARAM`` and ``BASE`` are predefined for the program.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any

import yaml

from .errors import ParseError
from .evm import assemble
from .image import (
    DEFAULT_BASE,
    DEFAULT_PARAM_GVA,
    DEFAULT_SIZE,
    PAGE_REG,
    PAGE_TCS,
    EnclaveImage,
    ImagePage,
    build_tcs_page,
    standard_image,
)
from .mem import PAGE_SIZE, VmplPerms


class _LineDict(dict):
    """Mapping that remembers the source line of each key."""

    line: int | None = None
    key_lines: dict


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader: _Loader, node: yaml.MappingNode) -> _LineDict:
    loader.flatten_mapping(node)
    out = _LineDict()
    out.line = node.start_mark.line + 1
    out.key_lines = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        out[key] = loader.construct_object(value_node, deep=True)
        out.key_lines[key] = key_node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def load_yaml(text: str, source: str | None = None) -> Any:
    try:
        return yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(str(getattr(exc, "problem", exc)), source=source,
                         line=mark.line + 1 if mark else None) from None


class Fields:
    """Typed accessors over a parsed mapping that raise located :class:`ParseError`."""

    def __init__(self, doc: Any, source: str | None, where: str = "") -> None:
        if not isinstance(doc, dict):
            line = getattr(doc, "line", None)
            raise ParseError("expected a mapping", source=source, field=where or None, line=line)
        self.doc = doc
        self.source = source
        self.where = where

    def _path(self, key: str) -> str:
        return f"{self.where}.{key}" if self.where else key

    def line(self, key: str | None = None) -> int | None:
        if key is not None and hasattr(self.doc, "key_lines"):
            return self.doc.key_lines.get(key, getattr(self.doc, "line", None))
        return getattr(self.doc, "line", None)

    def error(self, key: str | None, message: str) -> ParseError:
        return ParseError(message, source=self.source, field=self._path(key) if key else self.where or None,
                          line=self.line(key))

    def has(self, key: str) -> bool:
        return key in self.doc

    def raw(self, key: str, default: Any = None) -> Any:
        return self.doc.get(key, default)

    def int(self, key: str, default: int | None = None) -> int:
        if key not in self.doc:
            if default is None:
                raise self.error(key, "required field missing")
            return default
        v = self.doc[key]
        if isinstance(v, bool):
            raise self.error(key, f"expected an integer, got {v!r}")
        if isinstance(v, int):
            return v
        if isinstance(v, str):
            try:
                return int(v.replace("_", ""), 0)
            except ValueError:
                pass
        raise self.error(key, f"expected an integer, got {v!r}")

    def str(self, key: str, default: str | None = None) -> str:
        if key not in self.doc:
            if default is None:
                raise self.error(key, "required field missing")
            return default
        v = self.doc[key]
        if not isinstance(v, (str, int)) or isinstance(v, bool):
            raise self.error(key, f"expected a string, got {v!r}")
        return str(v)

    def bool(self, key: str, default: bool) -> bool:
        v = self.doc.get(key, default)
        if not isinstance(v, bool):
            raise self.error(key, f"expected true or false, got {v!r}")
        return v

    def sub(self, key: str) -> "Fields":
        v = self.doc.get(key)
        if v is None:
            v = _LineDict()
        if not isinstance(v, dict):
            raise self.error(key, "expected a mapping")
        return Fields(v, self.source, self._path(key))

    def list(self, key: str) -> list:
        v = self.doc.get(key, [])
        if not isinstance(v, list):
            raise self.error(key, "expected a list")
        return v


def _decode_bytes(spec: str, base_dir: Path | None, f: Fields, key: str) -> bytes:
    if spec.startswith("hex:"):
        try:
            data = bytes.fromhex(spec[4:].replace(" ", "").replace("_", ""))
        except ValueError:
            raise f.error(key, "invalid hex content") from None
    elif spec.startswith("file:"):
        path = Path(spec[5:])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise f.error(key, f"cannot read {path}: {exc.strerror}") from None
    else:
        raise f.error(key, f"unknown content {spec!r}")
    if len(data) > PAGE_SIZE:
        raise f.error(key, f"content is {len(data)} bytes, a page holds {PAGE_SIZE}")
    return data


def parse_manifest(doc: Any, *, source: str | None = None, base_dir: Path | None = None) -> EnclaveImage:
    f = Fields(doc, source)
    name = f.str("name", "enclave")
    base = f.int("base_gva", DEFAULT_BASE)
    size = f.int("size", DEFAULT_SIZE)
    ssa_frame_size = f.int("ssa_frame_size", 1)
    attributes = f.int("attributes", 0)
    pb = f.sub("param_buffer")
    param_gva = pb.int("gva", DEFAULT_PARAM_GVA)
    param_pages = pb.int("pages", 1)
    program_text = f.str("program", "")
    entry_raw = f.raw("entry_point", 0)

    if param_gva % PAGE_SIZE:
        raise pb.error("gva", "parameter buffer must be page aligned")
    if size < PAGE_SIZE or size & (size - 1):
        raise f.error("size", f"enclave size {size:#x} must be a power of two")
    if base % size:
        raise f.error("base_gva", "base must be aligned to the enclave size")

    if not f.has("pages"):
        if not program_text:
            raise f.error("program", "a manifest without pages needs a program")
        lay = f.sub("layout")
        try:
            return standard_image(program_text, name=name, base_gva=base, size=size, param_gva=param_gva,
                                  param_pages=param_pages, nssa=lay.int("nssa", 1),
                                  ssa_frame_size=ssa_frame_size, data_pages=lay.int("data_pages", 1),
                                  threads=lay.int("threads", 1), attributes=attributes, entry=entry_raw)
        except ParseError as exc:
            raise ParseError(exc.message, source=source, field="program",
                             line=(f.line("program") or 0) + (exc.line or 0) or None) from None
        except ValueError as exc:
            raise f.error("layout", str(exc)) from None

    page_docs = [Fields(p, source, f"pages[{i}]") for i, p in enumerate(f.list("pages"))]
    if not page_docs:
        raise f.error("pages", "at least one page is required")
    program_pages = [p for p in page_docs if p.str("content", "zero") == "program"]
    code_base = program_pages[0].int("gva") if program_pages else base
    code = b""
    labels_entry = 0
    if program_text:
        try:
            prog = assemble(program_text, code_base, entry_raw, {"PARAM": param_gva, "BASE": base})
        except ParseError as exc:
            raise ParseError(exc.message, source=source, field="program",
                             line=(f.line("program") or 0) + (exc.line or 0) or None) from None
        code = prog.encode()
        labels_entry = prog.entry
        if len(code) > len(program_pages) * PAGE_SIZE:
            raise f.error("pages", f"program needs {-(-len(code) // PAGE_SIZE)} program page(s),"
                                   f" manifest provides {len(program_pages)}")
    elif program_pages:
        raise f.error("program", "pages reference the program but none is given")

    pages: list[ImagePage] = []
    seen: set[int] = set()
    chunk = 0
    for p in page_docs:
        gva = p.int("gva")
        if gva % PAGE_SIZE or not base <= gva < base + size:
            raise p.error("gva", f"{gva:#x} is not a page inside the enclave")
        if gva in seen:
            raise p.error("gva", f"page {gva:#x} listed twice")
        seen.add(gva)
        ptype_name = p.str("type", "REG").upper()
        if ptype_name not in ("TCS", "REG"):
            raise p.error("type", f"page type must be TCS or REG, got {ptype_name!r}")
        measure = p.bool("measure", True)
        if ptype_name == "TCS":
            t = p.sub("tcs")
            oentry = t.int("oentry", code_base - base + 16 * labels_entry)
            content = build_tcs_page(oentry, t.int("ossa"), t.int("nssa", 1))
            pages.append(ImagePage(gva, PAGE_TCS, VmplPerms(), content, measure))
            continue
        try:
            perms = VmplPerms.parse(p.str("perms", "rw"))
        except ValueError as exc:
            raise p.error("perms", str(exc)) from None
        spec = p.str("content", "zero")
        if spec == "zero":
            content = bytes(PAGE_SIZE)
        elif spec == "program":
            content = code[chunk * PAGE_SIZE:(chunk + 1) * PAGE_SIZE]
            chunk += 1
        else:
            content = _decode_bytes(spec, base_dir, p, "content")
        pages.append(ImagePage(gva, PAGE_REG, perms, content, measure))
    if not any(pg.page_type == PAGE_TCS for pg in pages):
        raise f.error("pages", "an enclave needs at least one TCS page")
    return EnclaveImage(name, base, size, ssa_frame_size, attributes, tuple(pages), param_gva, param_pages)


def load_manifest(path: str | Path) -> EnclaveImage:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read manifest: {exc.strerror}", source=str(path)) from None
    return parse_manifest(load_yaml(text, str(path)), source=str(path), base_dir=path.parent)
