"""Compare the compiled and pure-Python interpreter loops.

    python3 benchmarks/bench_evm.py [--steps N] [--repeat R]

Runs three workloads through every available backend and prints retired
instructions per second plus the speedup over the Python loop.  Memory
accesses go through a plain dict so the loop itself dominates.  Loop
counters start at zero and count down, so no loop ends within the budget.
"""
from __future__ import annotations

import argparse
import time
from array import array

from nestedsgx import evm
from nestedsgx.evm import assemble

WORKLOADS = {
    "alu": """
        loadi r1, 0x9E3779B97F4A7C15
        loadi r2, 0
        loadi r3, -1
        loadi r4, 0
    top: add r4, r1
        xor r1, r4
        add r2, r3
        jnz r2, top
        halt
    """,
    "memory": """
        loadi r2, 0
        loadi r3, -1
    top: load r4, [0x1000]
        add r4, r2
        store [0x1000], r4
        store [0x1008], r4
        add r2, r3
        jnz r2, top
        halt
    """,
    "branchy": """
        loadi r3, -1
        loadi r2, 0
    a:  jmp b
    c:  add r2, r3
        jnz r2, a
        halt
    b:  xor r5, r2
        jmp c
    """,
}


def bench(backend: str, source: str, steps: int, repeat: int) -> float:
    program = assemble(source)
    best = float("inf")
    for _ in range(repeat):
        regs = array("Q", bytes(128))
        mem: dict[int, int] = {}
        load = lambda gva: mem.get(gva, 0)  # noqa: E731
        store = mem.__setitem__
        start = time.perf_counter()
        done, rip = 0, program.entry
        while done < steps:
            res = evm.run(program, regs, rip, steps - done, load, store, backend)
            done += res.steps
            rip = res.rip
            if res.status is not evm.Status.BUDGET_EXHAUSTED:
                rip = program.entry
        best = min(best, time.perf_counter() - start)
    return steps / best


def main(argv: list[str] | None = None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=1_000_000)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    backends = sorted(evm.BACKENDS)
    print(f"backends: {', '.join(backends)} (default {evm.BACKEND})")
    print(f"{'workload':10} " + " ".join(f"{b + ' ips':>16}" for b in backends) + "   speedup")
    for name, source in WORKLOADS.items():
        rates = {b: bench(b, source, args.steps, args.repeat) for b in backends}
        speedup = rates.get("compiled", rates["python"]) / rates["python"]
        print(f"{name:10} " + " ".join(f"{rates[b]:16,.0f}" for b in backends) + f"   {speedup:6.1f}x")


if __name__ == "__main__":
    main()
