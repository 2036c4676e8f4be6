"""Width transfer of forward multipliers, the rescaling symmetry, and the stagewise tuner on a bowl."""
import math

from hybridssm.mup import MuPMultiplierSet, scale_multipliers, tune, tuning_schedule
from hybridssm.verify import BOWL_COORDS, bowl_oracle, check_mup_symmetry, coordinate_rms

base = MuPMultiplierSet.table13()
for d in (640, 1280, 2560):
    f = scale_multipliers(base, d_ref=1280, d=d).forward
    print(f"d={d:5d}  m_unemb {f['m_unemb']:.4g}  m_key {f['m_key']:.4g}  m_x {f['m_x']:.4g}  m_emb {f['m_emb']:.4g}")

# block outputs at init should not care about width
for d, rms in coordinate_rms((64, 128, 256)).items():
    print("width", d, "block rms", [round(v, 3) for v in rms])

# (m/p, pW, p eta, lam/p) leaves an eps=0 AdamW run unchanged
print(check_mup_symmetry().line())

centers = {"m_x": 2.3, "m_z": -1.6, "m_B": 0.7}
oracle = bowl_oracle(centers, {"m_x": 1.0, "m_z": 3.0, "m_B": 0.5})
m, history = tune(MuPMultiplierSet.ones(), oracle, tuning_schedule(6, 3), BOWL_COORDS)
for i, stage in enumerate(history):
    moves = ", ".join(f"{r.multiplier}{'+' if r.step > 0 else '-'}" for r in stage if r.step) or "none"
    print(f"stage {i} p={stage[0].p:.3f}: moves {moves}")
print("found", {k: round(math.log2(m.forward[k]), 2) for k in centers}, "target", centers)
