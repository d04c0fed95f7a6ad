from __future__ import annotations

import struct

import pytest

from nestedsgx import Machine, MachineConfig


def u64s(*words: int) -> bytes:
    return b"".join(struct.pack("<Q", w & 0xFFFF_FFFF_FFFF_FFFF) for w in words)


@pytest.fixture
def machine() -> Machine:
    return Machine(MachineConfig(seed=1))


@pytest.fixture
def app(machine):
    return machine.guest.spawn()


@pytest.fixture
def small_config() -> MachineConfig:
    return MachineConfig(total_pages=256, vmpl0_pages=128, monitor_pages=16, seed=5)


# (number, title, passed, seconds, detail) for each acceptance criterion that ran
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, float, str]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, seconds, detail in sorted(ACCEPTANCE_RESULTS):
        line = f"[{number}] {'PASS' if passed else 'FAIL'} {title} ({seconds:.2f} s)"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
