"""Probabilistic partial least squares (PPLS).

Maximum-likelihood estimation of the PPLS model by EM, standard errors for
the loadings, a classical PLS baseline and a simulation harness.
"""

from .em import FitConfig, FitResult, EStepMoments, e_step, fit_ppls, initialize_theta, m_step
from .errors import *  # noqa: F401,F403
from .inference import LoadingSE, asymptotic_se, asymptotic_se_c, asymptotic_se_w, bootstrap_se
from .model import (
    DataPair,
    Theta,
    assemble_sigma,
    canonicalize_theta,
    log_likelihood,
    overlap_fraction,
    rv_coefficient,
    validate_theta,
    variance_explained,
)
from .pls import PlsFit, fit_pls
from .simulation import ScenarioConfig, align_estimates, generate_data, make_true_model, run_scenario

__version__ = "0.1.0"
