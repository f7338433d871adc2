"""Landmark evaluation metrics (AUC, C-index, Brier) on a hand-sized example."""
import numpy as np

from surlonformer import SurvivalRecord
from surlonformer.metrics import (brier_score, km_censoring_survivor, time_dependent_auc,
                                  time_dependent_cindex)

records = [SurvivalRecord("a", 0.15, 1), SurvivalRecord("b", 0.18, 0),
           SurvivalRecord("c", 0.25, 1), SurvivalRecord("d", 0.40, 1),
           SurvivalRecord("e", 0.70, 0)]
risks = np.array([2.0, 0.5, 1.0, -0.5, -1.0])
t_star, dt = 0.1, 0.2

G = km_censoring_survivor(records)
print("censoring survivor steps:", [(float(t), round(float(g), 3)) for t, g in zip(G.times, G.values)])
print("AUC     %.3f" % time_dependent_auc(risks, records, t_star, dt))
print("C-index %.3f" % time_dependent_cindex(risks, records, t_star, dt))
surv = np.exp(-np.exp(risks) * dt)  # any conditional survival predictions
print("Brier   %.3f" % brier_score(surv, records, t_star, dt))
