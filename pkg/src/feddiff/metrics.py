"""Run metrics: one CSV of per-round, per-client rows plus a JSON summary.

CSV columns: round, client_id, phase (beforeFT | afterFT), accuracy, loss.
Floats are rendered with %.10g so reruns with identical values produce
byte-identical files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

CSV_HEADER = ("round", "client_id", "phase", "accuracy", "loss")
PHASES = ("beforeFT", "afterFT")


@dataclass(frozen=True)
class MetricRow:
    round: int
    client_id: int
    phase: str
    accuracy: float
    loss: float


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


@dataclass
class MetricsReport:
    rows: list[MetricRow] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, round_idx: int, client_id: int, phase: str,
            accuracy: float, loss: float) -> None:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        self.rows.append(MetricRow(round_idx, client_id, phase,
                                   float(accuracy), float(loss)))

    def phase_accuracies(self, round_idx: int, phase: str) -> dict[int, float]:
        return {r.client_id: r.accuracy for r in self.rows
                if r.round == round_idx and r.phase == phase}

    def average_accuracy(self, round_idx: int, phase: str) -> float:
        accs = list(self.phase_accuracies(round_idx, phase).values())
        if not accs:
            raise ValueError(f"no {phase} rows for round {round_idx}")
        return sum(accs) / len(accs)

    def accuracy_trace(self, phase: str) -> dict[int, float]:
        """round -> average accuracy for the given phase."""
        by_round: dict[int, list[float]] = {}
        for r in self.rows:
            if r.phase == phase:
                by_round.setdefault(r.round, []).append(r.accuracy)
        return {k: sum(v) / len(v) for k, v in sorted(by_round.items())}

    def to_csv(self) -> str:
        lines = [",".join(CSV_HEADER)]
        for r in self.rows:
            lines.append(f"{r.round},{r.client_id},{r.phase},"
                         f"{_fmt(r.accuracy)},{_fmt(r.loss)}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_csv())

    def write_summary(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.summary, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        report = cls()
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            for row in reader:
                report.add(int(row["round"]), int(row["client_id"]),
                           row["phase"], float(row["accuracy"]),
                           float(row["loss"]))
        return report
