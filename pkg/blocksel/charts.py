from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _read_rows(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def _floats(rows: list[dict[str, str]], column: str) -> list[float]:
    return [float(r[column]) if r.get(column) not in (None, "") else float("nan") for r in rows]


def _save(fig: plt.Figure, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    fig.tight_layout()
    fig.savefig(out_path, dpi=120, metadata={"Software": None})
    plt.close(fig)

    return out_path


def plot_block_importance(csv_path: str | Path, out_path: str | Path) -> Path:
    """
    BI bars per block, with block accuracy lines when the CSV has them.
    """

    rows = _read_rows(csv_path)
    blocks = [int(r["block"]) for r in rows]

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(blocks, _floats(rows, "BI"), color="tab:blue", alpha=0.7, label="BI")
    ax.axhline(1.0, color="grey", linewidth=0.8, linestyle=":")
    ax.set_xlabel("block")
    ax.set_ylabel("block importance")
    ax.set_xticks(blocks)

    if rows and "test_BA" in rows[0]:
        acc = ax.twinx()
        acc.plot(blocks, _floats(rows, "train_BA"), marker="o", color="tab:orange", label="train BA")
        acc.plot(blocks, _floats(rows, "test_BA"), marker="s", color="tab:green", label="test BA")
        acc.set_ylabel("block accuracy")
        acc.set_ylim(0.0, 1.05)
        acc.legend(loc="upper right")

    ax.legend(loc="upper left")

    return _save(fig, out_path)


def plot_ga_history(csv_path: str | Path, out_path: str | Path) -> Path:
    rows = _read_rows(csv_path)
    generations = [int(r["generation"]) for r in rows]

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(generations, _floats(rows, "best_fitness"), label="best")
    ax.plot(generations, _floats(rows, "mean_fitness"), label="mean", linestyle="--")
    ax.set_xlabel("generation")
    ax.set_ylabel("fitness")
    ax.set_ylim(0.0, 1.05)
    ax.legend()

    return _save(fig, out_path)


def plot_training_curves(csv_path: str | Path, out_path: str | Path) -> Path:
    rows = _read_rows(csv_path)
    epochs = [int(r["epoch"]) for r in rows]

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, _floats(rows, "train_acc"), label="train")
    ax.plot(epochs, _floats(rows, "val_acc"), label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend()

    return _save(fig, out_path)
