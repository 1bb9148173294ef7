"""Supervised-component regularisation of multivariate GLMMs."""

from .core import (
    FittedModel,
    Hyperparams,
    ModelData,
    extract_components,
    extract_path,
    fit_fixed_scglr,
    fit_glmm,
    fit_unregularised,
    make_model_data,
    predict,
    predict_eta,
    refit,
)
from .exceptions import (
    CollinearityError,
    CriterionError,
    DataError,
    DegenerateFitError,
    HendersonError,
    NumericalError,
    ScglrError,
    VarianceCollapseError,
)
from .families import ResponseFamily
from .linmix import GroupDesign

__version__ = "0.1.0"
