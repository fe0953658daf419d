from __future__ import annotations

from dataclasses import dataclass, field, fields

CSV_COLUMNS = (
    "framework",
    "seed",
    "axis_value",
    "round",
    "sim_time_s",
    "train_loss",
    "test_acc",
    "bits_tx",
    "energy_j",
    "max_staleness",
)


@dataclass
class MetricsRow:
    framework: str
    seed: int
    round: int
    sim_time_s: float
    train_loss: float
    test_acc: float
    bits_tx: int
    energy_j: float
    max_staleness: int
    axis_value: str = ""


@dataclass
class MetricsTable:
    rows: list[MetricsRow] = field(default_factory=list)
    # Run-level extras that do not fit the CSV schema (per-cluster traces, counters).
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @property
    def final(self) -> MetricsRow:
        return self.rows[-1]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def extend(self, other: "MetricsTable") -> None:
        self.rows.extend(other.rows)


ROW_FIELDS = tuple(f.name for f in fields(MetricsRow))
