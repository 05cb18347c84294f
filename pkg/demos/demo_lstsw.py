"""Why the long/short window score favours objects over seabed.

A pixel that sees an object for five frames and a pixel that sees the same
variance for the whole sequence have the same short-window mean at the
centre. The long window tells them apart: the persistent pixel pays
``exp(-c)`` while the transient one pays only ``exp(-5c/101)``.
"""

import math
from pathlib import Path

import numpy as np

from flsmosaic.stats import StatConfig, VarianceFrame, lstsw_scores

cfg = StatConfig()  # L_s = 5, L_l = 101
n = 201
t = np.arange(1, n + 1)

for c in (0.01, 0.05, 0.1, 0.25):
    transient = np.zeros(n)
    transient[98:103] = c
    persistent = np.full(n, c)
    s_t = lstsw_scores([VarianceFrame(np.array([[v]]), i) for i, v in zip(t, transient)], cfg)[100].values[0, 0]
    s_p = lstsw_scores([VarianceFrame(np.array([[v]]), i) for i, v in zip(t, persistent)], cfg)[100].values[0, 0]
    print(f"c={c:<5} transient {s_t:.5f} (c*exp(-5c/101) = {c * math.exp(-5 * c / 101):.5f})   "
          f"persistent {s_p:.5f} (c*exp(-c) = {c * math.exp(-c):.5f})")

# A noisy seabed pixel with an object passing through
rng = np.random.default_rng(0)
v = 0.02 + 0.01 * rng.random(n)
v[95:105] += 0.1
scores = np.array([s.values[0, 0] for s in lstsw_scores([VarianceFrame(np.array([[x]]), i) for i, x in zip(t, v)], cfg)])
print(f"mean score off the object {scores[:80].mean():.4f}, on it {scores[96:104].mean():.4f}")

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None

if plt is not None:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(t, v, label="local variance")
    ax.plot(t, scores, label="score")
    ax.set_xlabel("frame")
    ax.legend()
    fig.tight_layout()
    out = Path(__file__).with_name("demo_lstsw.png")
    fig.savefig(out, dpi=110)
    print(f"figure: {out}")
