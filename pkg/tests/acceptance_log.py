"""Shared record of acceptance outcomes, printed by the terminal summary hook."""

RESULTS = {}  # criterion number -> list of (ok, detail)


def record(criterion: int, ok: bool, detail: str) -> bool:
    RESULTS.setdefault(criterion, []).append((bool(ok), detail))
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def summary_lines() -> list:
    out = []
    for n in sorted(RESULTS):
        rows = RESULTS[n]
        ok = all(r[0] for r in rows)
        detail = "; ".join(d for _, d in rows)
        out.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    return out
