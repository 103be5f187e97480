"""Small area estimation of area means with area- and unit-level linear mixed models.

Survey-weight calibration links the two levels: the calibrated direct
estimator follows an area-level model whose error variances share a single
unknown scale, so they can be estimated consistently along with the other
parameters.
"""

from .calibration import calibrate_linear, calibrate_sample, greg_total
from .data import AreaDataset, AreaUnits, UnitSample, aggregate, load_area_csv, load_unit_csv
from .direct import direct_estimates, direct_mean, direct_variance
from .errors import (
    CalibrationError, ConfigError, ConvergenceError, DataError, IdentificationError, SAEError,
    SingularDesignError,
)
from .mse import MseReport, bootstrap_mse_area, bootstrap_mse_unit, mse_prasad_rao
from .predictors import (
    EstimateSet, area_predictor, benchmark_residual, consistency_diagnostic, gamma_shrinkage,
    structured_psi, unit_predictor,
)
from .varcomp import (
    VarComponentFit, fit_reml_bhf, fit_reml_fh, fit_reml_structured_area, pseudo_beta_unit,
    structure_constants, wls_beta_area,
)

__version__ = "0.1.0"
