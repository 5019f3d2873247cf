"""Plot median reward curves with IQR bands from aggregate.csv files.

    python scripts/plot_curves.py runs/gcdt_n4/aggregate.csv runs/dt_n4/aggregate.csv --out curves.png

Needs the optional ``plot`` extra (matplotlib).
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from gcdt.aggregate import read_rows  # noqa: E402


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("curves", nargs="+", type=Path, help="aggregate.csv files")
    parser.add_argument("--out", type=Path, default=Path("curves.png"))
    args = parser.parse_args(argv)

    fig, ax = plt.subplots(figsize=(7, 4))
    for path in args.curves:
        rows = read_rows(path)
        x = np.array([float(r["env_steps"]) for r in rows])
        med = np.array([float(r["median_return"]) for r in rows])
        lo = np.array([float(r["q25_return"]) for r in rows])
        hi = np.array([float(r["q75_return"]) for r in rows])
        label = path.parent.name  # e.g. gcdt_n4
        ax.plot(x, med, label=label)
        ax.fill_between(x, lo, hi, alpha=0.25)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("episode return (median, IQR)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
