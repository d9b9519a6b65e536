"""Differentially private conditional average treatment effect estimation.

Two-stage orthogonal meta-learners (R and DR) with privatized nuisances, a
finite-query output-perturbation release and a Gaussian-process function release.
"""

from .data import Dataset, Sample, SyntheticConfig, generate_synthetic, load_csv, split_disjoint
from .privacy import BudgetPlan, PrivacyBudget, dp_composition_budget
from .pseudo import LearnerKind, build_targets, pseudo_outcome, rho_weight
from .secondstage import KernelSpec, fit_krr, fit_linear_basis, predict
from .finite_mech import calibration_c, gross_error_sensitivity, release_finite
from .functional_mech import calibration_r, release_function_batch, rkhs_sensitivity_bound
from .evaluation import pehe, run_sweep

__version__ = "0.1.0"
