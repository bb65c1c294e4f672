"""Length-optimised conformal calibration under covariate-shift coverage constraints."""

from .baselines import (QuantileRule, group_split_conformal, marginal_rule, split_conformal,
                        weighted_rule, weighted_split_conformal)
from .data import (CalibrationRecord, Dataset, ShiftBasis, ShiftCoefficients, SolverConfig, basis_values,
                   validate_dataset)
from .evaluation import EvalReport, compare_reports, evaluate_rule
from .hypothesis import Constant, Linear, MLP1, constant, h_eval, h_grad_params, linear, mlp1
from .scores import (CQR, AbsResidual, Classification, dataset_scores, exact_length, score, smoothed_length,
                     smoothed_length_dh)
from .smoothing import SmoothingKernel, smoothed_indicator, smoothed_indicator_dh
from .solver import (CPLDivergenceError, PredictionRule, SolverDiagnostics, SolverState, coverage_gap,
                     grad_beta, grad_h_params, make_state, run_cpl, smoothed_objective, split_conformal_level)
from .synthetic import (GroupSynthSpec, ToySpec, brute_force_discrete_oracle, gen_discrete_instance,
                        gen_group_synth, gen_toy, level_set_oracle, toy_oracle)

__version__ = "0.1.0"

__all__ = [
    "AbsResidual", "CPLDivergenceError", "CQR", "CalibrationRecord", "Classification", "Constant", "Dataset",
    "EvalReport", "GroupSynthSpec", "Linear", "MLP1", "PredictionRule", "QuantileRule", "ShiftBasis", "ShiftCoefficients",
    "SmoothingKernel", "SolverConfig", "SolverDiagnostics", "SolverState", "ToySpec", "basis_values",
    "brute_force_discrete_oracle", "compare_reports", "dataset_scores", "gen_discrete_instance", "gen_group_synth",
    "gen_toy", "level_set_oracle",
    "constant", "coverage_gap", "evaluate_rule", "exact_length", "grad_beta", "grad_h_params",
    "group_split_conformal", "h_eval", "h_grad_params", "linear", "make_state", "marginal_rule", "mlp1",
    "run_cpl", "score", "smoothed_indicator", "smoothed_indicator_dh", "smoothed_length", "smoothed_length_dh",
    "smoothed_objective", "split_conformal", "split_conformal_level", "toy_oracle", "validate_dataset", "weighted_rule", "weighted_split_conformal",
]
