"""Plot a sweep CSV written by `probit sweep`: final test accuracy per value.

usage: python docs/plot_sweep.py results/sweep_epsilon.csv [more.csv ...]
"""
import sys

import matplotlib.pyplot as plt
import pandas as pd

fig, ax = plt.subplots(figsize=(5, 3.5))
for path in sys.argv[1:]:
    df = pd.read_csv(path)
    axis = df["axis"].iloc[0]
    label = f"{df['scheme'].iloc[0]} ({path})"
    ax.plot(df["value"], 100 * df["final_test_acc"], marker="o", label=label)
    ax.set_xlabel(axis)
ax.set_ylabel("final test accuracy (%)")
ax.legend(fontsize=7)
fig.tight_layout()
out = "sweep.png"
fig.savefig(out, dpi=150)
print(f"wrote {out}")
