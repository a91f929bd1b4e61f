"""Plot per-step satisfaction and mean input from a `stochmpc run` output directory.

    python scripts/plot_fig1.py results/ --level 0.8061 -o fig1.png

Needs matplotlib, which the package itself does not depend on.
"""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {k: [float(r[k]) for r in rows] for k in rows[0]}


def runs(out_dir: Path):
    if (out_dir / "per_step.csv").exists():
        yield out_dir.name, out_dir
    for sub in sorted(p for p in out_dir.iterdir() if (p / "per_step.csv").exists()):
        yield sub.name, sub


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--level", type=float, help="chance constraint level to draw")
    ap.add_argument("-o", "--output", type=Path, default=Path("fig1.png"))
    args = ap.parse_args()

    fig, (ax_u, ax_p) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for name, d in runs(args.out_dir):
        ps = read_csv(d / "per_step.csv")
        (line,) = ax_u.plot(ps["k"], ps["mean_u"], label=name)
        ax_p.plot(ps["k"], ps["p_hat"], color=line.get_color(), label=name)
        if (d / "rollouts.csv").exists():
            rs = read_csv(d / "rollouts.csv")
            for i in sorted(set(rs["rollout"])):
                idx = [j for j, r in enumerate(rs["rollout"]) if r == i]
                ax_u.plot([rs["k"][j] for j in idx], [rs["u"][j] for j in idx], color=line.get_color(),
                          lw=0.5, ls="--", alpha=0.4)
    if args.level is not None:
        ax_p.axhline(args.level, color="k", lw=0.8, ls=":")
    ax_u.set_ylabel("u")
    ax_p.set_ylabel("P((x,u) in Z)")
    ax_p.set_xlabel("k")
    ax_p.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.output, dpi=150)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
