from __future__ import annotations

import json
import textwrap

import pytest

from nestedsgx import load_scenario, run_scenario
from nestedsgx.errors import ParseError
from nestedsgx.manifest import load_yaml
from nestedsgx.samples import SAMPLES_DIR
from nestedsgx.scenario import parse_bytes, parse_scenario
from nestedsgx.manifest import Fields


def _sc(text: str, base_dir=None):
    text = textwrap.dedent(text)
    return parse_scenario(load_yaml(text, "s.yaml"), source="s.yaml", base_dir=base_dir)


def _err(text: str) -> ParseError:
    with pytest.raises(ParseError) as info:
        _sc(text)
    return info.value


def test_parse_bytes_forms():
    f = Fields({}, None)
    assert parse_bytes("hex:0aff", f, "x") == b"\x0a\xff"
    assert parse_bytes("text:hi", f, "x") == b"hi"
    assert parse_bytes({"u64": [1, -1]}, f, "x") == (1).to_bytes(8, "little") + b"\xff" * 8
    assert parse_bytes(None, f, "x") == b""
    for bad in ("plain", {"u64": ["a"]}, {"u64": [True]}, "hex:zz", 5):
        with pytest.raises(ParseError):
            parse_bytes(bad, f, "x")


def test_honest_sample_passes(tmp_path):
    out = run_scenario(load_scenario(SAMPLES_DIR / "honest.yaml"), tmp_path)
    rep = out.report
    assert out.ok and rep["status"] == "pass"
    assert all(a["ok"] for a in rep["assertions"])
    spin = next(s for s in rep["steps"] if s.get("enclave") == "spin")
    assert spin["aex"] > 0 and spin["switches"] == 2 + 2 * spin["aex"]
    assert json.loads((tmp_path / "report.json").read_text()) == rep
    assert {p.name for p in tmp_path.iterdir()} == {
        "report.json", "ledger.json", "bundle-main.json", "bundle-main.anchors.json", "guest-report.json"}


def test_attack_sample_is_contained(tmp_path):
    out = run_scenario(load_scenario(SAMPLES_DIR / "attacks.yaml"), tmp_path)
    assert out.ok
    assert len(out.report["attacks"]) >= 7
    assert not any(a["verdict"].startswith("Succeeded") for a in out.report["attacks"])


def test_wrong_mrenclave_fails(tmp_path):
    out = run_scenario(load_scenario(SAMPLES_DIR / "wrong-mrenclave.yaml"), tmp_path)
    assert not out.ok
    failed = [a for a in out.report["assertions"] if not a["ok"]]
    assert [a["check"] for a in failed] == ["mrenclave adder"]


def test_inline_enclave_and_run_step(tmp_path):
    sc = _sc("""
        seed: 3
        enclaves:
          - name: tiny
            inline:
              program: |
                loadi r2, 99
                store [PARAM+24], r2
                loadi r2, 8
                store [PARAM+16], r2
                loadi r2, 0
                store [PARAM], r2
                syscall EEXIT
        steps:
          - ecall: {enclave: tiny, expect_output: {u64: [99]}, expect_switches: 2}
          - run: {program: "load r1, [0x1000]", expect_fault: PageFault}
          - run: {program: "halt", expect_fault: none}
          - remove: {enclave: tiny}
    """)
    out = run_scenario(sc, tmp_path)
    assert out.ok, out.report["assertions"]
    assert [s["step"] for s in out.report["steps"]] == ["ecall", "run", "run", "remove"]


def test_failures_are_reported_not_raised(tmp_path):
    sc = _sc("""
        seed: 3
        enclaves: [{name: a, builtin: adder}]
        steps:
          - ecall: {enclave: a, input: {u64: [1, 1]}, expect_output: {u64: [3]}}
          - remove: {enclave: a}
          - ecall: {enclave: a}
    """)
    out = run_scenario(sc, tmp_path)
    assert not out.ok
    # the param buffer went away with the enclave, so the App's own write faults first
    assert out.report["abort"]["error"] == "MemTrap"
    assert out.report["assertions"][0]["detail"] == "got " + (2).to_bytes(8, "little").hex()
    assert (tmp_path / "ledger.json").exists()


def test_refusing_host_aborts_cleanly(tmp_path):
    sc = _sc("""
        seed: 3
        hypervisor: refuse
        enclaves: [{name: a, builtin: adder}]
    """)
    out = run_scenario(sc, tmp_path)
    # boot never reached VMPL1, so the first switch request is out of protocol
    assert out.report["abort"]["error"] == "ProtocolError"
    assert out.report["invariant_violations"] == []


def test_driver_policies(tmp_path):
    sc = _sc("""
        seed: 4
        driver: tamper:perms
        enclaves: [{name: a, builtin: adder}]
    """)
    assert sc.driver == "tamper:perms"
    out = run_scenario(sc, tmp_path)
    assert out.ok  # tamper applies after loading, so the enclave measured normally


def test_manifest_enclaves_resolve_relative_paths(tmp_path):
    (tmp_path / "e.yaml").write_text((SAMPLES_DIR / "adder.manifest.yaml").read_text())
    sc = _sc("enclaves: [{name: a, manifest: e.yaml}]\n", base_dir=tmp_path)
    assert sc.enclaves[0][1].name == "adder"


@pytest.mark.parametrize("text,field", [
    ("seed: [1]\n", "seed"),
    ("hypervisor: evil\n", "hypervisor"),
    ("driver: lazy\n", "driver"),
    ("driver: tamper:everything\n", "driver"),
    ("machine: {total_pages: 10}\n", "machine"),
    ("machine: {step_budget: 0}\n", "machine.step_budget"),
    ("enclaves: [{name: a, builtin: nope}]\n", "enclaves[0].builtin"),
    ("enclaves: [{name: a}]\n", "enclaves[0]"),
    ("enclaves: [{name: a, builtin: adder}, {name: a, builtin: spin}]\n", "enclaves[1].name"),
    ("steps: [{ecall: {enclave: ghost}}]\n", "steps[0].ecall.enclave"),
    ("steps: [{dance: {}}]\n", "steps[0]"),
    ("steps: [{ecall: {}, run: {}}]\n", "steps[0]"),
    ("steps: [{run: {program: 'bogus r1'}}]\n", "steps[0].run.program"),
    ("enclaves: [{name: a, builtin: report}]\nsteps: [{attest: {enclave: a, report_data: 'hex:" + "00" * 65
     + "'}}]\n", "steps[0].attest.report_data"),
    ("attacks: [{kind: Rowhammer}]\n", "attacks[0].kind"),
    ("attacks: [{kind: ReadVmpl0, variant: perms}]\n", "attacks[0].variant"),
    ("expect: {verdicts: {Spectre: Blocked}}\n", "expect.verdicts.Spectre"),
    ("expect: {mrenclave: {ghost: '00'}}\n", "expect.mrenclave.ghost"),
    ("enclaves: [{name: a, builtin: adder}]\nexpect: {mrenclave: {a: 'abcd'}}\n", "expect.mrenclave.a"),
])
def test_parse_errors_name_the_field(text, field):
    err = _err(text)
    assert err.field == field, str(err)
    assert err.source == "s.yaml"


def test_error_lines():
    err = _err("""\
        seed: 1
        steps:
          - ecall: {enclave: ghost}
    """)
    assert err.line == 3


def test_missing_scenario_file(tmp_path):
    with pytest.raises(ParseError):
        load_scenario(tmp_path / "missing.yaml")
