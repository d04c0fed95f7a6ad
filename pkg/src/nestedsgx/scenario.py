"""Scenario files: a seeded machine, enclaves, App steps, attacks, and expectations.

Schema (YAML)::

    name: honest-ecall
    seed: 7
    machine: {total_pages: 2048, vmpl0_pages: 1088, monitor_pages: 64, step_budget: 10000}
    hypervisor: honest            # honest | refuse | wrong:<vmpl>
    driver: honest                # honest | skip-aep | tamper:<perms|offset|leaf>
    enclaves:
      - {name: adder, builtin: adder}
      - {name: custom, manifest: custom.yaml}
      - {name: inline, inline: {program: "..."}}
    steps:
      - ecall: {enclave: adder, input: {u64: [5, 7]}, expect_output: {u64: [12]}, expect_switches: 2}
      - attest: {enclave: report, report_data: "text:hello", bundle: main}
      - run: {program: "load r1, [0x1000]", expect_fault: PageFault}
      - remove: {enclave: adder}
    attacks:
      - {kind: ReadVmpl0}
      - {kind: TamperLeafParams, variant: perms}
    expect:
      mrenclave: {adder: <hex>}
      verdicts: {ReadVmpl0: Blocked}
      bundles: {main: Accept}

Byte strings are ``hex:...``, ``text:...`` or ``{u64: [...]}``.  Every
output file is a pure function of the scenario and the seed.
"""
from __future__ import annotations

import json
import struct
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .attacks import TAMPER_VARIANTS
from .attest import TrustAnchors, verify_bundle
from .errors import ParseError, SimError
from .evm import assemble
from .guest import AttackKind, AttackScript, App, LoadedEnclave
from .image import EnclaveImage
from .machine import Machine, MachineConfig
from .manifest import Fields, load_manifest, load_yaml, parse_manifest
from .programs import PROGRAMS, image_for
from .vcpu import HypervisorPolicy

DRIVER_POLICIES = ("honest", "skip-aep", "tamper")


@dataclass
class Step:
    kind: str
    args: dict[str, Any]
    line: int | None = None


@dataclass
class Scenario:
    name: str
    config: MachineConfig
    driver: str = "honest"
    enclaves: list[tuple[str, EnclaveImage]] = field(default_factory=list)
    steps: list[Step] = field(default_factory=list)
    attacks: list[AttackScript] = field(default_factory=list)
    expect_mrenclave: dict[str, bytes] = field(default_factory=dict)
    expect_verdicts: dict[str, str] = field(default_factory=dict)
    expect_bundles: dict[str, str] = field(default_factory=dict)


def parse_bytes(value: Any, f: Fields, key: str) -> bytes:
    if value is None:
        return b""
    if isinstance(value, dict) and set(value) == {"u64"}:
        words = value["u64"]
        if not isinstance(words, list) or not all(isinstance(w, int) and not isinstance(w, bool) for w in words):
            raise f.error(key, "u64 takes a list of integers")
        return b"".join((w & 0xFFFF_FFFF_FFFF_FFFF).to_bytes(8, "little") for w in words)
    if isinstance(value, str):
        if value.startswith("hex:"):
            try:
                return bytes.fromhex(value[4:])
            except ValueError:
                raise f.error(key, "invalid hex") from None
        if value.startswith("text:"):
            return value[5:].encode()
    raise f.error(key, f"expected hex:..., text:... or {{u64: [...]}}, got {value!r}")


def _parse_hex_digest(text: Any, f: Fields, key: str, size: int) -> bytes:
    try:
        out = bytes.fromhex(str(text))
    except ValueError:
        raise f.error(key, "expected lowercase hex") from None
    if len(out) != size:
        raise f.error(key, f"expected {size} bytes, got {len(out)}")
    return out


def parse_scenario(doc: Any, *, source: str | None = None, base_dir: Path | None = None) -> Scenario:
    f = Fields(doc, source)
    mc = f.sub("machine")
    seed_raw = f.raw("seed", None)
    if seed_raw is not None and (isinstance(seed_raw, bool) or not isinstance(seed_raw, (int, str))):
        raise f.error("seed", "seed must be an integer or string")
    hv = f.str("hypervisor", "honest")
    try:
        HypervisorPolicy.parse(hv)
    except ValueError:
        raise f.error("hypervisor", f"unknown hypervisor policy {hv!r}") from None
    config = MachineConfig(
        total_pages=mc.int("total_pages", 2048),
        vmpl0_pages=mc.int("vmpl0_pages", 1088),
        monitor_pages=mc.int("monitor_pages", 64),
        step_budget=mc.int("step_budget", 10_000),
        seed=seed_raw,
        hypervisor=hv,
    )
    try:
        config.layout()
    except SimError as exc:
        raise f.error("machine", str(exc)) from None
    if config.step_budget < 1:
        raise mc.error("step_budget", "step budget must be at least 1")
    driver = f.str("driver", "honest")
    policy, _, arg = driver.partition(":")
    if policy not in DRIVER_POLICIES or (policy == "tamper" and arg and arg not in TAMPER_VARIANTS):
        raise f.error("driver", f"unknown driver policy {driver!r}")
    sc = Scenario(f.str("name", Path(source).stem if source else "scenario"), config, driver)

    names: set[str] = set()
    for i, raw in enumerate(f.list("enclaves")):
        e = Fields(raw, source, f"enclaves[{i}]")
        name = e.str("name")
        if name in names:
            raise e.error("name", f"duplicate enclave name {name!r}")
        names.add(name)
        if e.has("builtin"):
            prog = e.str("builtin")
            if prog not in PROGRAMS:
                raise e.error("builtin", f"unknown builtin {prog!r}; choose from {sorted(PROGRAMS)}")
            image = image_for(prog, param_gva=e.int("param_gva", 0x7000_0000 + 0x10_0000 * i))
        elif e.has("manifest"):
            path = Path(e.str("manifest"))
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            image = load_manifest(path)
        elif e.has("inline"):
            image = parse_manifest(e.raw("inline"), source=source, base_dir=base_dir)
        else:
            raise e.error(None, "enclave needs one of builtin, manifest or inline")
        sc.enclaves.append((name, image))

    for i, raw in enumerate(f.list("steps")):
        if not isinstance(raw, dict) or len(raw) != 1:
            raise ParseError("each step is a single-key mapping", source=source, field=f"steps[{i}]",
                             line=getattr(raw, "line", None))
        (kind, args), = raw.items()
        s = Fields(args if args is not None else {}, source, f"steps[{i}].{kind}")
        if kind in ("ecall", "attest", "remove"):
            if s.str("enclave") not in names:
                raise s.error("enclave", f"unknown enclave {s.str('enclave')!r}")
        if kind == "ecall":
            step_args = {
                "enclave": s.str("enclave"),
                "index": s.int("index", 0),
                "input": parse_bytes(s.raw("input"), s, "input"),
                "ocall_reply": parse_bytes(s.raw("ocall_reply"), s, "ocall_reply"),
                "expect_output": parse_bytes(s.raw("expect_output"), s, "expect_output")
                if s.has("expect_output") else None,
                "expect_switches": s.int("expect_switches", 0) if s.has("expect_switches") else None,
                "budget": s.int("budget", 0) or None,
            }
        elif kind == "attest":
            data = parse_bytes(s.raw("report_data"), s, "report_data")
            if len(data) > 64:
                raise s.error("report_data", "report data is at most 64 bytes")
            step_args = {"enclave": s.str("enclave"), "report_data": data.ljust(64, b"\0"),
                         "bundle": s.str("bundle", s.str("enclave"))}
        elif kind == "run":
            try:
                program = assemble(s.str("program"))
            except ParseError as exc:
                raise ParseError(exc.message, source=source, field=f"steps[{i}].run.program",
                                 line=(s.line("program") or 0) + (exc.line or 0) or None) from None
            step_args = {"program": program, "expect_fault": s.str("expect_fault", "") or None}
        elif kind == "remove":
            step_args = {"enclave": s.str("enclave")}
        else:
            raise ParseError(f"unknown step {kind!r}", source=source, field=f"steps[{i}]",
                             line=getattr(raw, "line", None))
        sc.steps.append(Step(kind, step_args, getattr(raw, "line", None)))

    for i, raw in enumerate(f.list("attacks")):
        a = Fields(raw, source, f"attacks[{i}]")
        try:
            kind = AttackKind.parse(a.str("kind"))
        except ValueError as exc:
            raise a.error("kind", str(exc)) from None
        variant = a.str("variant", "") or None
        if variant is not None:
            if kind is not AttackKind.TAMPER_LEAF_PARAMS or variant not in TAMPER_VARIANTS:
                raise a.error("variant", f"no variant {variant!r} for {kind.value}")
        target = a.int("target", -1)
        sc.attacks.append(AttackScript(kind, None if target < 0 else target, variant))

    ex = f.sub("expect")
    mr = ex.sub("mrenclave")
    for name in mr.doc:
        if name not in names:
            raise mr.error(name, f"unknown enclave {name!r}")
        sc.expect_mrenclave[name] = _parse_hex_digest(mr.doc[name], mr, name, 32)
    verdicts = ex.sub("verdicts")
    for key, value in verdicts.doc.items():
        try:
            sc.expect_verdicts[AttackKind.parse(str(key)).value] = str(value)
        except ValueError as exc:
            raise verdicts.error(str(key), str(exc)) from None
    for key, value in ex.sub("bundles").doc.items():
        sc.expect_bundles[str(key)] = str(value)
    return sc


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read scenario: {exc.strerror}", source=str(path)) from None
    return parse_scenario(load_yaml(text, str(path)), source=str(path), base_dir=path.parent)


# -- execution ---------------------------------------------------------------

@dataclass
class RunOutcome:
    report: dict
    ok: bool
    files: dict[str, Path]


class _Runner:
    def __init__(self, sc: Scenario) -> None:
        self.sc = sc
        self.m = Machine(sc.config)
        self.apps: dict[str, App] = {}
        self.loaded: dict[str, LoadedEnclave] = {}
        self.assertions: list[dict] = []
        self.bundles: dict[str, tuple[str, str, str]] = {}  # name -> (bundle json, anchors json, verdict)

    def check(self, what: str, ok: bool, detail: str = "") -> None:
        self.assertions.append({"check": what, "ok": bool(ok), **({"detail": detail} if detail else {})})

    def apply_driver_policy(self) -> None:
        policy, _, arg = self.sc.driver.partition(":")
        drv = self.m.guest.driver
        drv.skip_aep = policy == "skip-aep"
        if policy == "tamper":
            drv.tamper = TAMPER_VARIANTS[arg or "perms"]

    def load(self) -> dict:
        out = {}
        for name, image in self.sc.enclaves:
            app = self.m.guest.spawn()
            enc = app.load_enclave(image)
            self.apps[name], self.loaded[name] = app, enc
            out[name] = {"eid": enc.eid, "mrenclave": enc.mrenclave.hex()}
            if name in self.sc.expect_mrenclave:
                self.check(f"mrenclave {name}", enc.mrenclave == self.sc.expect_mrenclave[name],
                           f"got {enc.mrenclave.hex()}")
        return out

    def step(self, st: Step) -> dict:
        a = st.args
        rec: dict[str, Any] = {"step": st.kind}
        if st.kind == "ecall":
            name = a["enclave"]
            mon = self.m.monitor
            saved = mon.step_budget
            if a["budget"]:
                mon.step_budget = a["budget"]
            reply = a["ocall_reply"]
            try:
                res = self.apps[name].ecall(self.loaded[name], a["index"], a["input"],
                                            ocall_handler=lambda idx, data: reply)
            finally:
                mon.step_budget = saved
            rec.update(enclave=name, completed=res.completed, output=res.output.hex(), switches=res.switches,
                       ocalls=res.ocalls, aex=res.aex, aex_kinds=[k.label for k in res.aex_kinds])
            if a["expect_output"] is not None:
                self.check(f"ecall {name} output", res.output == a["expect_output"], f"got {res.output.hex()}")
            if a["expect_switches"] is not None:
                self.check(f"ecall {name} switches", res.switches == a["expect_switches"], f"got {res.switches}")
            expected_switches = 2 + 2 * res.ocalls + 2 * res.aex
            if res.completed:
                self.check(f"ecall {name} switch accounting", res.switches == expected_switches,
                           f"{res.switches} switches for {res.ocalls} OCALL(s) and {res.aex} AEX(s)")
        elif st.kind == "attest":
            name = a["enclave"]
            res = self.apps[name].ecall(self.loaded[name], 0, a["report_data"])
            bundle = self.m.guest.bundle_from_report(res.output)
            anchors = TrustAnchors(self.m.vcek_public, self.m.launch_digest, self.loaded[name].mrenclave)
            verdict = verify_bundle(bundle, anchors)
            self.bundles[a["bundle"]] = (bundle.to_json(), anchors.to_json(), str(verdict))
            rec.update(enclave=name, bundle=a["bundle"], verdict=str(verdict))
            want = self.sc.expect_bundles.get(a["bundle"])
            if want is not None:
                self.check(f"bundle {a['bundle']}", str(verdict) == want, f"got {verdict}")
        elif st.kind == "run":
            app = self.m.guest.spawn()
            run = app.run_program(a["program"])
            fault = run.exception.label if run.exception else None
            rec.update(status=run.status.value, fault=fault, steps=run.steps)
            if a["expect_fault"] is not None:
                want = None if a["expect_fault"].lower() == "none" else a["expect_fault"]
                self.check("run fault", fault == want, f"got {fault}")
        elif st.kind == "remove":
            name = a["enclave"]
            self.apps[name].remove_enclave(self.loaded[name])
            rec.update(enclave=name)
        return rec

    def attacks(self) -> list[dict]:
        out = []
        for script in self.sc.attacks:
            verdict = self.m.guest.run_attack(script)
            entry = {"attack": script.kind.value, "verdict": str(verdict)}
            if script.variant:
                entry["variant"] = script.variant
            out.append(entry)
            label = script.kind.value + (f"[{script.variant}]" if script.variant else "")
            self.check(f"attack {label} contained", verdict.safe, str(verdict))
            want = self.sc.expect_verdicts.get(script.kind.value)
            if want is not None:
                self.check(f"attack {label} verdict", str(verdict).startswith(want), str(verdict))
        return out


def run_scenario(sc: Scenario, out_dir: Path, *, ledger_out: Path | None = None,
                 bundle_out: Path | None = None) -> RunOutcome:
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = _Runner(sc)
    report: dict[str, Any] = {
        "scenario": sc.name,
        "seed": sc.config.seed,
        "launch_digest": runner.m.launch_digest.hex(),
        "vcek_public": runner.m.vcek_public.hex(),
    }
    abort = None
    steps: list[dict] = []
    attacks: list[dict] = []
    try:
        report["enclaves"] = runner.load()
        runner.apply_driver_policy()
        for st in sc.steps:
            steps.append(runner.step(st))
        attacks = runner.attacks()
    except SimError as exc:
        abort = {
            "error": type(exc).__name__,
            "message": str(exc),
            "trace": traceback.format_exception_only(type(exc), exc)[-1].strip(),
            "ledger_tail": [ev.key for ev in runner.m.ledger.trace[-8:]],
        }
    report["steps"] = steps
    report["attacks"] = attacks
    report["assertions"] = runner.assertions
    if abort:
        report["abort"] = abort
    report["ledger_counts"] = dict(sorted(runner.m.ledger.counts.items()))
    report["invariant_violations"] = runner.m.check_invariants()
    ok = abort is None and all(a["ok"] for a in runner.assertions) and not report["invariant_violations"]
    report["status"] = "pass" if ok else "fail"

    files: dict[str, Path] = {}
    ledger_path = ledger_out or out_dir / "ledger.json"
    ledger_path.write_text(runner.m.ledger.to_json())
    files["ledger"] = ledger_path
    for i, (bname, (bjson, ajson, _)) in enumerate(sorted(runner.bundles.items())):
        path = bundle_out if (bundle_out is not None and i == 0) else out_dir / f"bundle-{bname}.json"
        path.write_text(bjson)
        anchors = path.with_name(path.stem + ".anchors.json")
        anchors.write_text(ajson)
        files[f"bundle:{bname}"] = path
        files[f"anchors:{bname}"] = anchors
    try:
        gr = runner.m.guest_report(struct.pack("<32s32s", b"guest-report", bytes(32)))
        (out_dir / "guest-report.json").write_text(gr.to_json())
        files["guest-report"] = out_dir / "guest-report.json"
    except SimError:
        pass
    report["files"] = {k: p.name for k, p in sorted(files.items())}
    (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=False) + "\n")
    files["report"] = out_dir / "report.json"
    return RunOutcome(report, ok, files)
