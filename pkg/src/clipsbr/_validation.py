"""Input validation helpers shared across the package."""

from __future__ import annotations

from typing import Iterable


class UsageError(ValueError):
    """Bad user input (CLI exits with code 2 on these)."""


def check_positive(name: str, value: float) -> None:
    if not value > 0:
        raise UsageError(f"{name} must be > 0, got {value!r}")


def check_at_least(name: str, value: int, minimum: int) -> None:
    if value < minimum:
        raise UsageError(f"{name} must be >= {minimum}, got {value!r}")


def check_fraction(name: str, value: float, allow_zero: bool = False) -> None:
    low_ok = value >= 0.0 if allow_zero else value > 0.0
    if not (low_ok and value < 1.0):
        bracket = "[0, 1)" if allow_zero else "(0, 1)"
        raise UsageError(f"{name} must lie in {bracket}, got {value!r}")


def check_choice(name: str, value: str, choices: Iterable[str]) -> None:
    allowed = tuple(choices)
    if value not in allowed:
        raise UsageError(f"{name} must be one of {allowed}, got {value!r}")
