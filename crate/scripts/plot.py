#!/usr/bin/env python3
"""Plot the CSV artifacts of a chaoslab run directory.

Usage: scripts/plot.py OUT_DIR [--save DIR]

Walks OUT_DIR (including chaos-report subdirectories) and draws one figure
per recognized CSV. Without --save the figures are shown interactively.
"""

import argparse
from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd


def free_energy(df, ax):
    if "free_energy" in df:
        ax.plot(df["t"], df["free_energy"])
        ax.set_ylabel("free energy")
    else:
        ax.plot(df["t"], df["e_n"], label="modulated free energy")
        ax.plot(df["t"], df["e_script"], "--", label="with additive error")
        ax.legend()
    ax.set_xlabel("t")


def dissipation(df, ax):
    ax.plot(df["t"], df["de_dt"], label="dE/dt")
    ax.plot(df["t"], df["bound"], "--", label="bound")
    ax.set_xlabel("t")
    ax.legend()


def lsi(df, ax):
    ax.semilogy(df["t"], df["fisher"], label="Fisher information")
    ax.semilogy(df["t"], df["rhs"].clip(lower=1e-300), "--", label="LSI lower bound")
    ax.set_xlabel("t")
    ax.legend()


def gronwall(df, ax):
    ax.semilogy(df["t"], df["e_script"], label="modulated free energy")
    ax.semilogy(df["t"], df["rhs"], "--", label="Grönwall bound")
    ax.set_xlabel("t")
    ax.legend()


def chaos(df, ax):
    ax.semilogy(df["t"], df["h_rel"], label="H(f | μ⊗μ)")
    ax.set_xlabel("t")
    ax.legend()


def marginals(df, ax):
    ax.errorbar(df["t"], df["w2"], yerr=df["w2_se"].fillna(0.0), marker="o", label="W2")
    ax.plot(df["t"], df["tv"], marker="s", label="TV")
    ax.set_xlabel("t")
    ax.legend()


def perturbations(df, ax):
    ax.bar(df["index"], df["delta"])
    ax.set_xlabel("perturbation")
    ax.set_ylabel("F(μ_ε) − F(μ_β)")


PLOTS = {
    "records.csv": free_energy,
    "dissipation.csv": dissipation,
    "lsi.csv": lsi,
    "gronwall.csv": gronwall,
    "chaos.csv": chaos,
    "marginals.csv": marginals,
    "perturbations.csv": perturbations,
}


def densities(index, ax):
    table = pd.read_csv(index)
    for _, row in table.iterrows():
        mu = pd.read_csv(index.parent / row["file"])
        ax.plot(mu.iloc[:, 0], mu.iloc[:, 1], label=f"t = {row['t']:g}")
    ax.set_xlabel("x")
    ax.set_ylabel("μ")
    if len(table) <= 12:
        ax.legend(fontsize="small")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--save", type=Path, help="write PNGs here instead of showing")
    args = parser.parse_args()

    figures = []
    for path in sorted(args.out_dir.rglob("*.csv")):
        draw = PLOTS.get(path.name)
        if path.name == "index.csv" and path.parent.name == "densities":
            draw = None
            fig, ax = plt.subplots()
            densities(path, ax)
        elif draw is None:
            continue
        else:
            df = pd.read_csv(path)
            if df.empty:
                continue
            fig, ax = plt.subplots()
            draw(df, ax)
        name = path.relative_to(args.out_dir)
        ax.set_title(str(name))
        figures.append((name, fig))

    if not figures:
        raise SystemExit(f"no recognized CSVs under {args.out_dir}")
    if args.save:
        args.save.mkdir(parents=True, exist_ok=True)
        for name, fig in figures:
            target = args.save / (str(name).replace("/", "_").removesuffix(".csv") + ".png")
            fig.savefig(target, dpi=120, bbox_inches="tight")
            print(target)
    else:
        plt.show()


if __name__ == "__main__":
    main()
