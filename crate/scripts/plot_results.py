#!/usr/bin/env python3
"""Render the tidy CSVs emitted by `fsed report` as PNGs.

Convenience tooling only: the toolkit itself never draws; it emits data.

    fsed report --input runs/ --out plots/
    python scripts/plot_results.py plots/

Writes negatives_sweep.png and/or species_scores.png next to the inputs,
skipping whichever CSV is absent.
"""

import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_sweep(path: Path) -> None:
    # columns: n_neg, n_sets, trial, f1
    by_config = defaultdict(list)
    with path.open() as fh:
        for row in csv.DictReader(fh):
            by_config[(int(row["n_neg"]), int(row["n_sets"]))].append(float(row["f1"]))

    fig, ax = plt.subplots(figsize=(6, 4))
    sets = sorted({s for (_, s) in by_config})
    for n_sets in sets:
        xs = sorted(n for (n, s) in by_config if s == n_sets)
        means = [sum(by_config[(x, n_sets)]) / len(by_config[(x, n_sets)]) for x in xs]
        ax.plot(xs, means, marker="o", label=f"{n_sets} negative set(s)")
    ax.set_xlabel("negative segments per set")
    ax.set_ylabel("event-based F1 (%)")
    ax.legend()
    fig.tight_layout()
    out = path.with_suffix(".png")
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


def plot_species(path: Path) -> None:
    # columns: species, precision, recall, f1; a directory with several
    # reports yields several rows per species, so average them
    by_species = defaultdict(lambda: defaultdict(list))
    with path.open() as fh:
        for row in csv.DictReader(fh):
            for metric in ("precision", "recall", "f1"):
                by_species[row["species"]][metric].append(float(row[metric]))

    species = sorted(by_species)
    fig, ax = plt.subplots(figsize=(max(6, len(species)), 4))
    width = 0.27
    for i, metric in enumerate(("precision", "recall", "f1")):
        xs = [j + (i - 1) * width for j in range(len(species))]
        ys = [sum(by_species[s][metric]) / len(by_species[s][metric]) for s in species]
        ax.bar(xs, ys, width=width, label=metric)
    ax.set_xticks(range(len(species)))
    ax.set_xticklabels(species, rotation=30, ha="right")
    ax.set_ylabel("score (%)")
    ax.legend()
    fig.tight_layout()
    out = path.with_suffix(".png")
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


def main() -> int:
    root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(".")
    did = False
    sweep = root / "negatives_sweep.csv"
    if sweep.exists():
        plot_sweep(sweep)
        did = True
    species = root / "species_scores.csv"
    if species.exists():
        plot_species(species)
        did = True
    if not did:
        print(f"no negatives_sweep.csv or species_scores.csv under {root}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
