"""Off-policy evaluation for partially observable, aggregated-reward settings.

The package provides:

* a deterministic synthetic sepsis POMDP simulator with oracle policy
  values (:mod:`hope_ope.env_sepsis`),
* trajectory/dataset data model and serialization (:mod:`hope_ope.trajectory`),
* per-step reward reconstruction from aggregated rewards
  (:mod:`hope_ope.reward_reconstruction`),
* KL-based trajectory neighbors and reward calibration
  (:mod:`hope_ope.neighbors`),
* critical-observation detection from fitted Q-values
  (:mod:`hope_ope.critical_obs`),
* the HOPE estimator, its ablations and classical OPE baselines
  (:mod:`hope_ope.estimators`),
* validation metrics and bootstrap significance machinery
  (:mod:`hope_ope.metrics`),
* an end-to-end benchmark CLI (:mod:`hope_ope.cli`).
"""

from .trajectory import Dataset, Trajectory, Transition

__all__ = ["Dataset", "Trajectory", "Transition"]

__version__ = "0.1.0"
