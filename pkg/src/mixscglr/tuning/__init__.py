"""Cross-validation, accuracy metrics and simulation designs."""

from .cv import CvPlan, CvResult, GridResult, cv_error, grid_search, make_folds, run_parallel
from .metrics import latent_metrics, mrse, murse, relative_squared_error
from .simulate import SimDesign, simulate
