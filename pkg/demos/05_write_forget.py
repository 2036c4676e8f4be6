"""The write / forget tug of war on a single head, and how scaling dt down calms it."""
from dataclasses import replace

import numpy as np

from hybridssm import stability as st

obj = st.WriteForgetObjective(span=8, a_target=1.5)
u0, A0 = obj.stationary()
print(f"stationary point: dt_raw {u0:.3f}, A_log {A0:.3f}")
print("curvature there:\n", np.round(obj.hessian(), 4))

etas = np.linspace(1e-3, 2.0, 4000)
eta_star = st.critical_eta(obj.hessian(), etas)
a_c = st.critical_alpha(obj, eta_star)
print(f"lagged feedback loses stability at eta* = {eta_star:.4f}; below alpha = {a_c:.3f} it is stable again")

for alpha in (1.0, 0.9 * a_c, 0.5):
    tr = st.simulate_write_forget(replace(obj, alpha=alpha), 4000, eta_star)
    L = st.attenuation_lipschitz(alpha, A0)
    print(f"alpha {alpha:.3f}: tail/head amplitude {tr.amplitude_ratio:.3g}, Lipschitz factor {L:.3f}")

print(f"memory kept after an extra 0.02 of dt at A_log = 0: {st.memory_decay_factor(0.0, 0.02):.5f}")
