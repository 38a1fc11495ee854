"""Shared record of acceptance outcomes, printed by the terminal summary hook."""

RESULTS: dict[int, tuple[bool, str, str]] = {}


def record(key: int, name: str, ok: bool, detail: str) -> None:
    RESULTS[key] = (bool(ok), name, detail)
    print(f"criterion {key} [{'PASS' if ok else 'FAIL'}] {name}: {detail}", flush=True)
