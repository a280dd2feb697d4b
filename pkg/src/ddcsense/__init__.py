"""Estimation and discount-factor sensitivity analysis for dynamic discrete choice models."""

from .dp import DdcModel, PanelDataset, solve_value_function, ccp_from_values, ccp_to_utilities
from .errors import (ContractError, ConvergenceError, DomainError, IllPosedError,
                     InconsistencyError, PremiseError, RankError, SeparationError)
from .estimate import EstimationSolution, LinearUtilitySpec, nfxp_estimate, min_distance_estimate
from .local import DerivativeBundle, SensitivityReport, solve_sensitivity_system
from .globalsens import BoundsResult, MonotonicityVerdict, bounds_estimate, breakdown_frontier
from .zurcher import CounterfactualSpec, ZurcherConfig, simulate_panel

__version__ = "0.1.0"
