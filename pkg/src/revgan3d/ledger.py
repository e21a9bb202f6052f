"""Stored-activation accounting of the generator across core depths."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, RevGANModel
from .tensor import Tape, Tensor, backward

MIB = float(1 << 20)
CSV_COLUMNS = ("depth", "param_bytes", "stored_bytes_reversible", "stored_bytes_naive")


@dataclass
class LedgerRow:
    depth: int
    param_bytes: int
    stored_bytes_reversible: int
    stored_bytes_naive: int
    peak_bytes_reversible: int
    peak_bytes_naive: int


def measure(model: RevGANModel, x: Tensor):
    """Run ``G(x)`` with a mean loss and backward; returns ``(stored_bytes, peak_bytes)``.

    Stored bytes are read once the forward pass is complete, when every
    activation kept for backward is live.
    """
    with Tape() as tape:
        loss = model.translate_xy(x).mean()
    stored = tape.ledger.stored_bytes
    backward(loss)
    return stored, tape.ledger.peak_bytes


def ledger_report(depths=(0, 1, 2, 4, 8), patch=64, channels=64, task="domain-adaptation",
                  base_channels=32, dtype="float32", seed=0) -> list:
    """One :class:`LedgerRow` per depth at a fixed input shape.

    `patch` is the input extent in domain X (a cube), `channels` the core
    width.  Both memory modes use identical weights for a given depth.
    """
    rows = []
    for depth in depths:
        cfg = ModelConfig(task=task, depth=int(depth), base_channels=base_channels,
                          core_channels=channels, dtype=dtype)
        x = Tensor(np.random.default_rng(seed).uniform(-1, 1, (1, 1) + (patch,) * 3)
                   .astype(cfg.np_dtype))
        result = {}
        for memory in ("reversible", "naive"):
            model = RevGANModel(cfg, rng=np.random.default_rng(seed), memory=memory)
            result[memory] = measure(model, x)
        rows.append(LedgerRow(int(depth), model.param_bytes(), result["reversible"][0],
                              result["naive"][0], result["reversible"][1], result["naive"][1]))
    return rows


def format_table(rows) -> str:
    head = (f"{'depth':>5}  {'params MiB':>10}  {'reversible MiB':>14}  {'naive MiB':>10}  "
            f"{'rev peak MiB':>12}  {'naive peak MiB':>14}")
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.depth:>5}  {r.param_bytes / MIB:>10.3f}  "
                     f"{r.stored_bytes_reversible / MIB:>14.3f}  "
                     f"{r.stored_bytes_naive / MIB:>10.3f}  {r.peak_bytes_reversible / MIB:>12.3f}  "
                     f"{r.peak_bytes_naive / MIB:>14.3f}")
    return "\n".join(lines)


def write_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([getattr(r, c) for c in CSV_COLUMNS])
    return path
