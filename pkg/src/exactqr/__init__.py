"""Exact estimators for just-identified quantile moment models, with higher-order bias corrections."""

from .corrections import bias_correct, newton_step, run_pipeline, symmetric_step, theta_one
from .dgp import DgpId, DgpSpec, analytic_components, sample
from .exact_solver import enumerate_corners, solve_exact, solve_table
from .model import Dataset, DatasetError, load_dataset, save_dataset, validate
from .moments import MomentContext, Norm, Variant, g_hat, g_star_hat
from .nuisance import plug_in

__version__ = "0.1.0"
