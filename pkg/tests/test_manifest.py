from __future__ import annotations

import textwrap

import pytest

from nestedsgx import image_for, load_manifest, offline_mrenclave
from nestedsgx.errors import ParseError
from nestedsgx.manifest import load_yaml, parse_manifest
from nestedsgx.samples import SAMPLES_DIR
from oracles import GOLDEN_ADDER, GOLDEN_CUSTOM_SAMPLE, reference_for_image

EXPLICIT = """\
name: t
base_gva: 0x400000
size: 0x10000
program: |
  loadi r1, 1
  syscall EEXIT
pages:
  - {gva: 0x400000, type: TCS, tcs: {ossa: 0x1000, nssa: 1}}
  - {gva: 0x401000, type: REG, perms: rw, content: zero}
  - {gva: 0x402000, type: REG, perms: rx, content: program}
  - {gva: 0x403000, type: REG, perms: r, content: "hex:00ff"}
"""


def _parse(text: str, tmp_path=None):
    return parse_manifest(load_yaml(text, "m.yaml"), source="m.yaml", base_dir=tmp_path)


def _error(text: str) -> ParseError:
    with pytest.raises(ParseError) as info:
        _parse(text)
    return info.value


def test_samples_match_their_goldens():
    assert offline_mrenclave(load_manifest(SAMPLES_DIR / "adder.manifest.yaml")).hex() == GOLDEN_ADDER
    assert offline_mrenclave(load_manifest(SAMPLES_DIR / "offset-adder.manifest.yaml")).hex() \
        == GOLDEN_CUSTOM_SAMPLE


def test_short_form_equals_builtin():
    assert load_manifest(SAMPLES_DIR / "adder.manifest.yaml") == image_for("adder")


def test_explicit_form(tmp_path):
    image = _parse(EXPLICIT)
    assert [p.gva for p in image.pages] == [0x400000 + k * 0x1000 for k in range(4)]
    assert image.pages[3].content[:2] == b"\x00\xff"
    assert offline_mrenclave(image) == reference_for_image(image)


def test_file_content_is_relative_to_the_manifest(tmp_path):
    (tmp_path / "blob.bin").write_bytes(b"\x42" * 10)
    path = tmp_path / "e.yaml"
    path.write_text(EXPLICIT.replace('"hex:00ff"', "file:blob.bin"))
    assert load_manifest(path).pages[3].content.startswith(b"\x42" * 10)


def test_page_order_changes_the_digest():
    lines = EXPLICIT.splitlines(keepends=True)
    swapped = "".join(lines[:9] + [lines[10], lines[9]] + lines[11:])
    assert _parse(swapped) != _parse(EXPLICIT)
    assert offline_mrenclave(_parse(swapped)) != offline_mrenclave(_parse(EXPLICIT))


def test_unmeasured_page_content_does_not_matter():
    a = _parse(EXPLICIT.replace('"hex:00ff"}', '"hex:00ff", measure: false}'))
    b = _parse(EXPLICIT.replace('"hex:00ff"}', '"hex:ffff", measure: false}'))
    assert offline_mrenclave(a) == offline_mrenclave(b)


@pytest.mark.parametrize("old,new,field,line", [
    ("size: 0x10000", "size: 0x3000", "size", 3),
    ("base_gva: 0x400000", "base_gva: 0x401000", "base_gva", 2),
    ("base_gva: 0x400000", "base_gva: nope", "base_gva", 2),
    ("0x403000, type: REG", "0x402000, type: REG", "pages[3].gva", 11),
    ("0x403000, type: REG", "0x503000, type: REG", "pages[3].gva", 11),
    ("perms: rw,", "perms: rz,", "pages[1].perms", 9),
    ("type: TCS", "type: VA", "pages[0].type", 8),
    ('"hex:00ff"', '"hex:0g"', "pages[3].content", 11),
    ('"hex:00ff"', '"elf:x"', "pages[3].content", 11),
    ('"hex:00ff"', "file:missing.bin", "pages[3].content", 11),
])
def test_errors_name_line_and_field(old, new, field, line):
    err = _error(EXPLICIT.replace(old, new))
    assert err.field == field and err.line == line and err.source == "m.yaml"
    assert f"line {line}" in str(err)


def test_program_errors_point_into_the_block():
    err = _error(EXPLICIT.replace("syscall EEXIT", "frobnicate r1"))
    assert err.field == "program" and err.line == 6


def test_structural_errors():
    assert _error("- 1\n- 2\n").message == "expected a mapping"
    assert _error("name: ok\nlist: [unclosed\n").line in (2, 3)
    assert _error("name: x\n").field == "program"
    assert _error(EXPLICIT.replace("type: TCS, tcs: {ossa: 0x1000, nssa: 1}", "type: REG")).field == "pages"
    too_big = EXPLICIT.replace('"hex:00ff"', '"hex:' + "00" * 4097 + '"')
    assert "a page holds" in _error(too_big).message


def test_program_too_big_for_its_pages():
    big = "\n".join(["  loadi r1, 1"] * 300)
    err = _error(EXPLICIT.replace("  loadi r1, 1", big))
    assert err.field == "pages" and "program page" in err.message


def test_short_form_layout_options():
    text = textwrap.dedent("""\
        name: two
        program: |
          syscall EEXIT
        layout: {nssa: 2, data_pages: 0, threads: 2}
    """)
    image = _parse(text)
    assert sum(p.page_type == 1 for p in image.pages) == 2


def test_missing_file():
    with pytest.raises(ParseError) as info:
        load_manifest("/nonexistent/m.yaml")
    assert "cannot read manifest" in str(info.value)
