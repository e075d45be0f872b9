"""Interactive beam alignment lab.

Noisy sectored-beam measurements, a discretized Bayesian posterior over the
angle of arrival, a scan network trained end-to-end through the posterior
recursion, and Monte Carlo evaluation against bisection and hierarchical
posterior-matching baselines.
"""

__version__ = "0.1.0"
