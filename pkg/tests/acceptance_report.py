"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

LINES: list[str] = []


def report(n: int, title: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title} | {detail}"
    print(line)
    LINES.append(line)
    return ok
