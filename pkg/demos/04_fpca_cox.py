"""FPCA-Cox baseline: principal components of averaged images feed a linear Cox model."""
import numpy as np

from surlonformer import SimConfig, generate_cohort
from surlonformer.fpca import FpcaCox
from surlonformer.cox import landmark_cohort
from surlonformer.metrics import time_dependent_auc

ds = generate_cohort(SimConfig(cohort=200, seed=2))
train_ds, test_ds = ds.subset(range(150)), ds.subset(range(150, 200))
t_star, dt = 12 / 120, 12 / 120

model = FpcaCox(pve_target=0.95).fit(train_ds.sequences, train_ds.records, t_star)
print("components kept:", model.fpca.n_components, "PVE %.3f" % model.fpca.pve)
print("Newton iterations:", model.fit_result.iterations,
      "flagged:", model.fit_result.flagged)

seqs, recs, counts = landmark_cohort(test_ds.sequences, test_ds.records, t_star)
risks = model.predict(seqs, counts)
print("held-out AUC (t*=12, dt=12 months): %.3f" % time_dependent_auc(risks, recs, t_star, dt))
