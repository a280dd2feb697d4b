# %% [markdown]
# # Global sensitivity to the discount factor
#
# When the discount factor is only known to lie in an interval, we want to
# know whether a target moves monotonically with beta and what range it spans
# there. The last section finds where a conclusion stops holding.

# %%
import numpy as np

from ddcsense import analysis, globalsens
from ddcsense.zurcher import ZurcherConfig, simulate_panel

config = ZurcherConfig()
data = simulate_panel(config, num_units=100, num_periods=200, seed=0)
q0, q1 = config.model().transitions

# %% [markdown]
# ## Monotonicity certificate
#
# Replacement resets mileage, so the derivative of the identified utility in
# beta has a closed form. Its sign only depends on how the first-stage
# replacement probability compares across states.

# %%
p = analysis.first_stage_ccp(config, data)
verdict = globalsens.renewal_monotonicity_check(p[:, 1], q1)
print("certificate:", verdict.certificate, "verdict:", verdict.overall)
scan = globalsens.sign_scan_verdict(p[:, 1], [q0], q1)
print("grid sign scan agrees:", scan.overall)

# %% [markdown]
# The two-step estimates follow the predicted direction: MC falls and RC rises
# as beta increases.

# %%
betas = [0.1, 0.3, 0.5, 0.7, 0.9, 0.95]
for b, (mc, rc) in zip(betas, analysis.two_step_path(config, p, betas)):
    print(f"beta {b:.2f}: MC {mc:.5f}  RC {rc:.4f}")

# %% [markdown]
# ## Bounds over an interval
#
# A bounded scalar search over beta, with each evaluation a full NFXP fit.

# %%
profile = analysis.BetaProfile(config, data)
for name in ("RC", "cf_ccp_max_state"):
    res = globalsens.bounds_estimate(profile.target(name), (0.7, 0.8), name=name)
    print(f"{name}: [{res.lower:.5f}, {res.upper:.5f}] at beta {res.argmin:.4f} / {res.argmax:.4f}, "
          f"{len(res.evaluations)} fits, {res.wall_time:.1f} s")

# %% [markdown]
# ## Breakdown frontier
#
# The smallest beta at which the estimated replacement cost exceeds 6.7.

# %%
bd = globalsens.breakdown_frontier(profile.target("RC"), 6.7, (0.7, 0.8), monotone=True)
print(bd.verdict, bd.frontier, bd.robust_region)
