"""Per-epoch training records and the communication round ledger.

The ledger counts the four training messages each passive party exchanges per
batch (embedding up, global embedding down, prediction up, loss+grad down).
Key setup and per-epoch evaluation traffic are tracked separately so the
4-per-batch accounting stays exact.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field


@dataclass
class EpochRecord:
    party: int
    epoch: int
    train_loss: float
    test_acc: float
    msgs_up: int
    msgs_down: int
    bytes: int


CSV_HEADER = ["party", "epoch", "train_loss", "test_acc", "msgs_up", "msgs_down", "bytes"]


def write_records_csv(records: list[EpochRecord], path: str):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow(
                [r.party, r.epoch, repr(float(r.train_loss)), repr(float(r.test_acc)),
                 r.msgs_up, r.msgs_down, r.bytes]
            )


def read_records_csv(path: str) -> list[EpochRecord]:
    records = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        for row in reader:
            records.append(
                EpochRecord(
                    party=int(row[0]),
                    epoch=int(row[1]),
                    train_loss=float(row[2]),
                    test_acc=float(row[3]),
                    msgs_up=int(row[4]),
                    msgs_down=int(row[5]),
                    bytes=int(row[6]),
                )
            )
    return records


# ---------------------------------------------------------------------------
# Round ledger
# ---------------------------------------------------------------------------


@dataclass
class _Traffic:
    msgs_up: int = 0
    msgs_down: int = 0
    bytes_up: int = 0
    bytes_down: int = 0


@dataclass
class RoundLedger:
    """Message and byte counts observed by the active party."""

    n_passive: int
    epochs: dict[int, dict[int, _Traffic]] = field(default_factory=dict)
    bytes_by_type: dict[str, int] = field(default_factory=dict)
    setup_msgs: int = 0
    setup_bytes: int = 0
    eval_msgs: int = 0
    eval_bytes: int = 0
    _current_epoch: int = 0

    def start_epoch(self, epoch: int):
        self._current_epoch = epoch
        self.epochs.setdefault(epoch, {k: _Traffic() for k in range(1, self.n_passive + 1)})

    def record_setup(self, nbytes: int):
        self.setup_msgs += 1
        self.setup_bytes += nbytes

    def record(self, party: int, nbytes: int, type_name: str, up: bool, eval_round: bool):
        self.bytes_by_type[type_name] = self.bytes_by_type.get(type_name, 0) + nbytes
        if eval_round:
            self.eval_msgs += 1
            self.eval_bytes += nbytes
            return
        traffic = self.epochs.setdefault(
            self._current_epoch, {k: _Traffic() for k in range(1, self.n_passive + 1)}
        )[party]
        if up:
            traffic.msgs_up += 1
            traffic.bytes_up += nbytes
        else:
            traffic.msgs_down += 1
            traffic.bytes_down += nbytes

    def epoch_traffic(self, epoch: int) -> dict[int, tuple[int, int, int]]:
        out = {}
        for party, t in self.epochs.get(epoch, {}).items():
            out[party] = (t.msgs_up, t.msgs_down, t.bytes_up + t.bytes_down)
        return out

    def total_train_msgs(self, party: int) -> int:
        return sum(
            t.msgs_up + t.msgs_down for ep in self.epochs.values() for p, t in ep.items() if p == party
        )

    def total_train_bytes(self) -> int:
        return sum(
            t.bytes_up + t.bytes_down for ep in self.epochs.values() for t in ep.values()
        )

    def summary(self) -> dict:
        return {
            "per_party_train_msgs": {
                str(k): self.total_train_msgs(k) for k in range(1, self.n_passive + 1)
            },
            "train_bytes": self.total_train_bytes(),
            "bytes_by_type": dict(sorted(self.bytes_by_type.items())),
            "setup_msgs": self.setup_msgs,
            "setup_bytes": self.setup_bytes,
            "eval_msgs": self.eval_msgs,
            "eval_bytes": self.eval_bytes,
        }


def expected_train_msgs(n_samples: int, batch_size: int, epochs: int) -> int:
    """Closed form: four messages per batch per passive party."""
    return 4 * math.ceil(n_samples / batch_size) * epochs


def round_unit_totals(epochs: int, num_models: int) -> dict:
    """Round-unit comparison: one four-message session trains every model at
    once, whereas training the models one at a time costs two messages per
    epoch per model."""
    return {
        "vfedmh": 1 * 4 * epochs,
        "existing": num_models * 2 * epochs,
    }


def ledger_check(ledger: RoundLedger, n_samples: int, batch_size: int, epochs: int, num_models: int) -> dict:
    """Compare observed per-party counts against the closed form and echo the
    round-unit totals for the multi-model scenario."""
    expected = expected_train_msgs(n_samples, batch_size, epochs)
    observed = {k: ledger.total_train_msgs(k) for k in range(1, ledger.n_passive + 1)}
    mismatches = {k: v for k, v in observed.items() if v != expected}
    return {
        "expected_per_party": expected,
        "observed_per_party": {str(k): v for k, v in observed.items()},
        "mismatch": {str(k): v for k, v in mismatches.items()},
        "ok": not mismatches,
        "round_units": round_unit_totals(epochs, num_models),
    }


# ---------------------------------------------------------------------------
# Summary JSON
# ---------------------------------------------------------------------------


def write_summary_json(path: str, summary: dict):
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
