"""Run logging: versioned CSV rows and the JSON run summary.

The CSV schema is fixed: after the warm-up phase every round emits one row
per active client (incentive quantities) plus one server row (client_id
-1, global loss and test accuracy); before warm-up only server rows
appear. Floats are written with 10 significant digits, UTF-8, LF line
endings, so identical runs produce byte-identical logs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

CSV_VERSION = "opusvfl-runlog v1"
CSV_HEADER = (
    "round", "client_id", "importance", "contribution_term", "privacy_term",
    "reward", "tokens", "cost", "utility", "epsilon", "epsilon_gradient",
    "active", "loss_all", "test_accuracy",
)

SERVER_ROW_ID = -1


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


class RunLogWriter:
    """Single-writer CSV log; the orchestrator serializes writes per round."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._fh = self.path.open("w", newline="", encoding="utf-8")
        self._fh.write(f"# {CSV_VERSION}\n")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(CSV_HEADER)

    def client_row(
        self,
        round_index: int,
        client_id: int,
        importance: float,
        contribution_term: float,
        privacy_term: float,
        reward: float,
        tokens: float,
        cost: float,
        utility: float,
        epsilon: float,
        epsilon_gradient: float,
        active: bool,
    ) -> None:
        self._writer.writerow(
            [
                round_index, client_id, _fmt(importance), _fmt(contribution_term),
                _fmt(privacy_term), _fmt(reward), _fmt(tokens), _fmt(cost),
                _fmt(utility), _fmt(epsilon), _fmt(epsilon_gradient),
                _fmt(active), "", "",
            ]
        )

    def server_row(self, round_index: int, loss_all: float, test_accuracy: float) -> None:
        self._writer.writerow(
            [round_index, SERVER_ROW_ID, "", "", "", "", "", "", "", "", "", "",
             _fmt(loss_all), _fmt(test_accuracy)]
        )

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "RunLogWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_log(path: str | Path) -> list[dict[str, str]]:
    """Read a run log back as a list of dict rows (strings as written)."""
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    return list(reader)


@dataclass
class AttackReport:
    """Outcome of one robustness evaluation."""

    mode: str
    poison_fraction: float
    attack_success_rate: float
    clean_accuracy: float
    label_inference_accuracy: float | None = None
    feature_inference_mse: float | None = None
    notes: str = "label/feature inference numbers come from simplified proxies"


@dataclass
class RunSummary:
    """End-of-run rollup; per-client totals match the CSV column sums."""

    config: dict
    status: str
    rounds_completed: int
    rounds_per_epoch: int
    final_train_accuracy: float
    final_test_accuracy: float
    per_client: dict[int, dict[str, float]]
    dropout_events: list[tuple[int, int]] = field(default_factory=list)
    attack: AttackReport | None = None
    mean_round_seconds: float = 0.0
    log_path: str | None = None

    def to_json(self) -> str:
        payload = dataclasses.asdict(self)
        payload["per_client"] = {str(k): v for k, v in self.per_client.items()}
        return json.dumps(payload, indent=2, sort_keys=True)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")
