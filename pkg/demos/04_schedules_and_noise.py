"""Effective learning rate / weight decay, power schedules, and the noisy quadratic."""
import numpy as np

from hybridssm.dynamics import ScheduleSpec, ToyModelSpec, elr_ewd, schedule_at, toy_simulate, toy_stationary_moments

print("eta=256e-6, lam=0.1 -> (eta_eff, lam_eff) = (%.4e, %.4f)" % elr_ewd(256e-6, 0.1))

ps = ScheduleSpec(eta0=1e-3, lam0=0.1, power_mode="PS", t0=1e6)
eps = ScheduleSpec(eta0=1e-3, lam0=0.1, power_mode="EPS", t0=1e6)
print(f"{'tokens':>10} {'PS lam_eff':>12} {'EPS lam_eff':>12}")
for t in np.geomspace(1e6, 1e9, 4):
    print(f"{t:10.0e} {elr_ewd(*schedule_at(t, ps)[:2])[1]:12.4f} {elr_ewd(*schedule_at(t, eps)[:2])[1]:12.4f}")

# x_{t+1} = x_t - eta (h (x_t - x*) + noise) - eta lam x_t settles where signal and noise balance
spec = ToyModelSpec(h=0.05, x_star=2.0, sigma=1.0, eta=1e-2, lam=0.1, T=200_000)
exact = toy_stationary_moments(spec)
sims = [toy_simulate(ToyModelSpec(**{**spec.__dict__, "seed": s})) for s in range(5)]
print(f"stationary mean {exact.x_inf:.4f} vs simulated {np.mean([s.mean for s in sims]):.4f}")
print(f"second moment   {exact.x2_inf:.4f} vs simulated {np.mean([s.second_moment for s in sims]):.4f}")

# with no signal the norm follows sqrt(eta / lam)
for eta, lam in [(1e-3, 0.1), (4e-3, 0.1), (4e-3, 0.4)]:
    spec = ToyModelSpec(h=1e-3, x_star=0.0, sigma=1.0, eta=eta, lam=lam, T=2_000_000)
    s = toy_simulate(spec)
    print(f"eta/lam = {eta / lam:.3f}: rms x = {np.sqrt(s.second_moment):.4f}, "
          f"exact {np.sqrt(toy_stationary_moments(spec).x2_inf):.4f}, sqrt(eta/(2 lam)) = {np.sqrt(eta / lam / 2):.4f}")
