"""Small helpers shared across modules."""
from typing import Any, Iterable


def split_list(value: Any) -> Any:
    """Split a comma separated config value into a list."""
    if isinstance(value, str):
        value = value.strip()
        if value in ("", "[]"):
            return []
        return [v.strip() for v in value.strip("[]").split(",") if v.strip()]
    if isinstance(value, (int, float)):
        return [value]
    return value


def pooled_fraction(counts: Iterable[tuple[int, int]]) -> float:
    """Fraction of pooled (part, total) counts."""
    part = 0
    total = 0
    for p, t in counts:
        part += p
        total += t
    if total == 0:
        return 0.0
    return part / total
