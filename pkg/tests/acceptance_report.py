"""Collects one verdict line per acceptance criterion for the end-of-run summary."""

LINES = []


def record(number, name, passed, detail=""):
    line = f"[criterion {str(number):>3}] {'PASS' if passed else 'FAIL'}  {name}"
    if detail:
        line += f"  ({detail})"
    LINES.append(line)
    print(line)
    return passed
