"""Deterministic work accounting.

One charge unit is one amplified-hash evaluation or one candidate distance
evaluation. Runtime thresholds are expressed in these units instead of wall
clock time.
"""

from __future__ import annotations

from dataclasses import dataclass


class BudgetExhausted(Exception):
    pass


class _Timeout:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "TIMEOUT"

    def __reduce__(self):
        return (_Timeout, ())


TIMEOUT = _Timeout()


@dataclass
class WorkBudget:
    limit: int | None = None
    spent: int = 0

    def __post_init__(self):
        if self.limit is not None and self.limit < 1:
            raise ValueError(f"budget limit must be positive, got {self.limit}")

    @property
    def remaining(self) -> float:
        return float("inf") if self.limit is None else self.limit - self.spent

    def charge(self, units: int = 1) -> None:
        """Spend ``units``; on overflow pin ``spent`` at ``limit`` and raise."""
        units = int(units)
        if self.limit is not None and self.spent + units > self.limit:
            self.spent = self.limit
            raise BudgetExhausted(self.limit)
        self.spent += units
