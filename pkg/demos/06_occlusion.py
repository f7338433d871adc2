"""Occlusion sensitivity maps for one patient, written as SVG heatmaps.

Trains a tiny model briefly, then occludes every 8x8 region of every visit.
"""
import tempfile
from pathlib import Path

from surlonformer import ModelConfig, SimConfig, TrainConfig, generate_cohort, train
from surlonformer.interpret import occlusion_sensitivity, render_heatmaps

ds = generate_cohort(SimConfig(cohort=40, seed=3))
t_star = 12 / 120
mc = ModelConfig(d=8, heads=2, n_vision=1, n_seq=1, d_ff=8, d_s=4, seed=3)
result = train(ds.sequences, ds.records, mc, TrainConfig(epochs=10, landmark=t_star, seed=3))

seq = next(s for s, r in zip(ds.sequences, ds.records) if r.time >= t_star)
n = seq.visits_until(t_star)
maps, passes = occlusion_sensitivity(result.params, seq, n, region_side=8)
print(f"{n} visits, {passes} forward passes")
for m in maps:
    print(f"visit {m.visit}: max sensitivity {m.values.max():.3g}")

out = Path(tempfile.mkdtemp())
for m, svg in zip(maps, render_heatmaps(maps, seq.images)):
    (out / f"visit_{m.visit:02d}.svg").write_text(svg)
print("heatmaps written to", out)
