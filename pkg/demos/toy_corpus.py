"""A tour of the toy-face corpus and its two degradation presets.

Renders four identities under varying nuisance (pose, rotation, lighting,
expression, background), then shows what the moderate and severe presets do to
one photo. Writes ``toy_corpus.png`` next to this script.

    python demos/toy_corpus.py
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from refface.degrade import degrade
from refface.toyfaces import build_identities, render_face, sample_nuisance

identities = build_identities(4, seed=0)
photos = 5

fig, axes = plt.subplots(len(identities) + 1, photos, figsize=(photos * 1.4, (len(identities) + 1) * 1.4))
for row, ident in enumerate(identities):
    for k in range(photos):
        # Same geometry and palette per row, fresh nuisance per column.
        axes[row, k].imshow(render_face(ident, sample_nuisance(100 * row + k)))

# Last row: one HQ photo, then its moderate and severe degradations at two seeds each.
hq = render_face(identities[0], sample_nuisance(0))
panels = [("HQ", hq)] + [(f"{p} #{s}", degrade(hq, p, s)) for p in ("moderate", "severe") for s in (0, 1)]
for ax, (title, img) in zip(axes[-1], panels):
    ax.imshow(img.clip(0, 1))
    ax.set_title(title, fontsize=7)
for ax in axes.flat:
    ax.axis("off")

out = Path(__file__).with_name("toy_corpus.png")
fig.tight_layout()
fig.savefig(out, dpi=120)
print(f"wrote {out}")
