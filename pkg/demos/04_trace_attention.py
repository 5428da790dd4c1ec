"""
Tracing the attention weights
=============================

Happiness bursts are planted in depressed sequences and the per-frame
recalibration weights are compared inside and outside the bursts. The
graph adjacency of the cross-stream graph is printed for one sample.
"""
import numpy as np

from recalib.config import ExperimentConfig
from recalib.experiments import trace_afr, train_pipeline, window_contrast
from recalib.model import forward

cfg = ExperimentConfig()
t = train_pipeline(cfg)
test = t.data[2]

ids = [i for i, s in enumerate(test) if s.label == 1][:5]
rows = trace_afr(t, ids)
w = np.array([r["w_t"] for r in rows if r["sample"] == ids[0]])
burst = np.array([r["burst"] for r in rows if r["sample"] == ids[0]], dtype=bool)
print("weights sum to", round(w.sum(), 12), "over", len(w), "frames")
print("uniform weight", round(1 / len(w), 4), " max", round(w.max(), 4), " min", round(w.min(), 4))
print("mean weight inside bursts", w[burst].mean().round(4), "outside", w[~burst].mean().round(4))
print(f"contrast over {len(ids)} depressed samples: {window_contrast(rows):+.5f}")

out = forward(t.model, test[ids[0]].frames[None], cfg.stages, cfg.dcr, cfg.ad.beta)
np.set_printoptions(precision=3, suppress=True)
print("cross-stream adjacency (rows sum to 1):")
print(out["A_cross"].value[0])
