# %% [markdown]
# # Where the prompts sit matters
#
# Prompts carry information about their own neighbourhood of the line.
# Clustering them at one end leaves the far end poorly served, and a
# cluster in the middle gives its best results around the middle.
#
# Run `03_train_and_compare.py` first (with `QUICK = False` for clear
# curves), or pass any checkpoint directory written by `contextseis train`
# followed by the dataset directory it was trained on.

# %%
import sys

import numpy as np

from contextseis.evaluation import PromptLayout, prompt_spacing_study
from contextseis.model import load_checkpoint
from contextseis.synthgen import SeismicDataset

CHECKPOINT = sys.argv[1] if len(sys.argv) > 1 else "runs/notebook/checkpoint"
model = load_checkpoint(CHECKPOINT)
data = SeismicDataset(sys.argv[2] if len(sys.argv) > 2 else "runs/notebook/data")

# %%
layouts = [PromptLayout(p) for p in ((0, 1, 2), (0, 5, 10), (0, 10, 20), (8, 10, 12))]
for report in prompt_spacing_study(model, data, layouts):
    curve = report.psnr_mean
    print(f"{report.layout.descriptor:8s} mean {curve.mean():6.2f} dB  best position {int(np.argmax(curve)):2d}  "
          f"first five {curve[:5].mean():6.2f}  last five {curve[-5:].mean():6.2f}")
