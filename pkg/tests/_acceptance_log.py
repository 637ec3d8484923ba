"""Per-criterion pass/fail lines for the acceptance suite."""

from __future__ import annotations

N_CRITERIA = 11
RESULTS: dict[int, tuple[bool, str]] = {}


def report(n: int, ok: bool, detail: str) -> bool:
    RESULTS[n] = (bool(ok), detail)
    print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    return bool(ok)


def summary_lines() -> list[str]:
    lines = []
    for n in range(1, N_CRITERIA + 1):
        if n in RESULTS:
            ok, detail = RESULTS[n]
            lines.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            lines.append(f"criterion {n:2d}: NOT RUN")
    return lines
