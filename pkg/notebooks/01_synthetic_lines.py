# %% [markdown]
# # Synthetic seismic lines
#
# A line is a run of neighbouring CDP gathers that have already been NMO
# corrected. Primaries come out flat; multiples travel slower than the
# correction velocity and keep a downward curvature. The label of every
# gather is the same gather with the multiples left out.

# %%
import numpy as np

from contextseis.synthgen import GeneratorConfig, event_panel, generate_line

cfg = GeneratorConfig.desk(seed=3)
line = generate_line(cfg, line_id=0)
print("gathers", line.gathers.shape, "labels", line.labels.shape)
print("primaries:", sum(e.kind == "primary" for e in line.events),
      "multiples:", sum(e.kind == "multiple" for e in line.events))

# %% [markdown]
# Gathers are built by adding two panels, so subtracting the label
# recovers the multiples to the last bit.

# %%
print("exact additivity:", np.array_equal(line.gathers - line.labels, line.multiples))

# %% [markdown]
# How curved is each event after NMO? Track the largest amplitude on every
# trace and compare the farthest traces that still carry the event with the
# nearest one. Far traces of shallow events are muted where NMO would
# stretch them too much, and slow multiples can run off the end of the record.

# %%
def moveout(panel, n_far=4):
    peak = np.abs(panel).max()
    live = [k for k in range(panel.shape[1]) if np.abs(panel[:, k]).max() > 1e-2 * peak]
    picks = {k: int(np.argmax(np.abs(panel[:, k]))) for k in live}
    picks = {k: p for k, p in picks.items() if p < panel.shape[0] - 5}
    if len(picks) < 2:
        return None, 0
    ks = sorted(picks)
    far = ks[-n_far:]
    return float(np.mean([abs(picks[k] - picks[ks[0]]) for k in far])), far[-1]


for ev in line.events:
    r, last = moveout(event_panel(ev, 10, cfg))
    t0 = ev.t0_profile[10]
    shown = "n/a" if r is None else f"{r:.1f} samples out to trace {last}"
    print(f"{ev.kind:9s} t0={t0:.3f}s  residual moveout: {shown}")

# %% [markdown]
# Event times, amplitudes and velocities drift smoothly from CDP to CDP,
# which is what lets neighbouring gathers serve as prompts for each other.

# %%
for ev in line.events[:3]:
    print(ev.kind, "largest t0 step between neighbours:", float(np.max(np.abs(np.diff(ev.t0_profile)))), "s")

# %%
# A picture helps. Rendered only when matplotlib is around.
try:
    import matplotlib.pyplot as plt
except ImportError:
    plt = None
if plt is not None:
    fig, ax = plt.subplots(1, 3, figsize=(9, 4), sharey=True)
    for a, img, title in zip(ax, (line.gathers[10], line.labels[10], line.multiples[10]), ("gather", "label", "multiples")):
        v = np.abs(line.gathers[10]).max()
        a.imshow(img, aspect="auto", cmap="gray", vmin=-v, vmax=v)
        a.set_title(title)
    fig.savefig("synthetic_line.png", dpi=80)
    print("wrote synthetic_line.png")
