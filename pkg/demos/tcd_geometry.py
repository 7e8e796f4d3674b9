"""The task-conditioned distance between clean and adversarial descriptor sets.

Shows three views of the same number: the square-root-free trace form used
in training, an eigendecomposition evaluation of the whitened covariance
gap, and the plain Gaussian 2-Wasserstein approximation after whitening the
descriptors with the support covariance.
"""

import numpy as np

from mdat import distloss
from mdat.selfcheck import random_psd, random_spd

rng = np.random.default_rng(0)
d = 6

# covariance term on its own: fast trace form vs eigendecomposition
s1, s2, s = random_psd(rng, d), random_psd(rng, d), random_spd(rng, d)
fast = distloss.whitened_trace_form(s1, s2, np.linalg.inv(s)).item()
slow = distloss.trace_identity_oracle(s1, s2, s)
print(f"trace form {fast:.12f}   eigendecomposition {slow:.12f}")

# full distance on descriptor sets
support = rng.standard_normal((200, d)) @ rng.standard_normal((d, d))
clean = rng.standard_normal((16, d))
adv = clean + 0.05 * rng.standard_normal((16, d))
stats = distloss.build_stats(clean[None], adv[None], support, ridge=1e-3)
tcd = distloss.tcd_distance(stats).item()

vals, vecs = np.linalg.eigh(np.linalg.inv(stats.support_cov_inv))
whiten = (vecs / np.sqrt(vals)) @ vecs.T
mu_c, cov_c = distloss.descriptor_stats(clean @ whiten)
mu_a, cov_a = distloss.descriptor_stats(adv @ whiten)
w2 = distloss.wasserstein2_approx(mu_c, cov_c, mu_a, cov_a).item()
print(f"task-conditioned distance {tcd:.10f}   W2 after whitening {w2:.10f}")

# without whitening the same perturbation looks different along each support direction
raw = distloss.wasserstein2_approx(*distloss.descriptor_stats(clean), *distloss.descriptor_stats(adv)).item()
print(f"unwhitened W2 {raw:.10f}")
