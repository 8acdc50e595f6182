#!/usr/bin/env python3
"""Plot the artifacts of one or more runs.

For each run directory (as written by ``pathineq run --out`` or
``pathineq suite --out``) this draws

  * the tilt battery: debiased W2 against relative entropy, with the
    certified right-hand side C * H^theta overlaid, and
  * any exported concentration tails: log survival probability against
    x^2, where Gaussian concentration shows up as a straight line.

Usage:
    python scripts/plot_tails.py runs/wiener-t2 runs/snell-t2 -o tails.png
"""

import argparse
import csv
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_run(run_dir: Path):
    report = json.loads((run_dir / "report.json").read_text())
    rows = []
    with (run_dir / "tails.csv").open() as fh:
        header = fh.readline()
        assert header.startswith("#TAILS1"), f"not a tails file: {run_dir}"
        for row in csv.DictReader(fh):
            rows.append(row)
    return report, rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("runs", nargs="+", type=Path,
                    help="run directories containing report.json + tails.csv")
    ap.add_argument("-o", "--out", type=Path, default=Path("tails.png"))
    args = ap.parse_args(argv)

    fig, (ax_t, ax_c) = plt.subplots(1, 2, figsize=(11, 4.5))
    drew_tails = False
    for run_dir in args.runs:
        report, rows = read_run(run_dir)
        name = report["name"]
        ver = report["verifier"]
        C, theta = ver["C"], ver["theta"]

        transport = [r for r in rows if r["source"] == "transport"]
        H = np.array([float(r["x"]) for r in transport])
        w2 = np.array([float(r["y"]) for r in transport])
        pts = ax_t.scatter(H, w2, label=name, zorder=3)
        hs = np.linspace(0.0, max(H.max(), 1e-12) * 1.1, 200)
        ax_t.plot(hs, C ** theta * hs ** theta if theta != 0.5
                  else np.sqrt(C * hs),
                  color=pts.get_facecolor()[0], lw=1, alpha=0.6)

        for src in sorted({r["source"] for r in rows} - {"transport"}):
            tail = [r for r in rows if r["source"] == src]
            x = np.array([float(r["x"]) for r in tail])
            y = np.array([float(r["y"]) for r in tail])
            keep = y > 0
            ax_c.semilogy(x[keep] ** 2, y[keep], ".-", ms=3, lw=0.8,
                          label=f"{name}:{src}")
            drew_tails = True

    ax_t.set_xlabel("relative entropy H")
    ax_t.set_ylabel("debiased W2")
    ax_t.set_title("tilt battery vs certified bound")
    ax_t.legend(fontsize=8)
    ax_c.set_xlabel("x^2")
    ax_c.set_ylabel("P(distance > x)")
    ax_c.set_title("concentration tails")
    if drew_tails:
        ax_c.legend(fontsize=8)
    else:
        ax_c.text(0.5, 0.5, "no tail checks in these runs",
                  ha="center", va="center", transform=ax_c.transAxes)
    fig.tight_layout()
    fig.savefig(args.out, dpi=130)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
