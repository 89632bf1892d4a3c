"""Unbiased parameter estimation for partially observed diffusions.

The pipeline: dyadic Euler lattices (lattice), state-space models (models),
the path-space score (score), conditional particle sweeps with maximal
ancestor coupling (smc), stochastic approximation on top of them (sa), and
the doubly randomized debiasing estimator (unbiased). oracle holds an exact
linear-Gaussian reference used for validation, experiment/cli drive runs.
"""

from .errors import DegenerateWeightsError, NumericOverflowError, ObservationAlignmentError
from .lattice import (
    CoupledPathPair,
    LatticePath,
    euler_step,
    initial_path,
    initial_path_coupled,
    propagate_block,
    propagate_block_coupled,
    propagate_unit,
    propagate_unit_coupled,
    step_size,
    unit_steps,
)
from .models import (
    KangarooModel,
    ObservationRecord,
    OrnsteinUhlenbeckModel,
    ParameterVector,
    SdeModel,
    align_observation_times,
    kangaroo_model,
    ou_model,
)
from .oracle import (
    LinearGaussianSpec,
    kalman_loglik_grad,
    kalman_mle,
    kalman_smoother_moments,
)
from .sa import SaRun, StepSchedule, msa_run, msa_run_coupled, msa_run_reprojected, sa_update
from .score import score_h_l
from .smc import ccpf_step, cpf_step, maximal_coupling_sample, normalized_weights
from .streams import CountingStream
from .unbiased import (
    EstimatorRecord,
    RandomizationLaw,
    UmsaResult,
    umsa_estimate,
    umsa_single,
    write_records_csv,
)

__version__ = "0.1.0"

__all__ = [
    "CoupledPathPair",
    "CountingStream",
    "DegenerateWeightsError",
    "EstimatorRecord",
    "KangarooModel",
    "LatticePath",
    "LinearGaussianSpec",
    "NumericOverflowError",
    "ObservationAlignmentError",
    "ObservationRecord",
    "OrnsteinUhlenbeckModel",
    "ParameterVector",
    "RandomizationLaw",
    "SaRun",
    "SdeModel",
    "StepSchedule",
    "UmsaResult",
    "align_observation_times",
    "ccpf_step",
    "cpf_step",
    "euler_step",
    "initial_path",
    "initial_path_coupled",
    "kalman_loglik_grad",
    "kalman_mle",
    "kalman_smoother_moments",
    "kangaroo_model",
    "maximal_coupling_sample",
    "msa_run",
    "msa_run_coupled",
    "msa_run_reprojected",
    "normalized_weights",
    "ou_model",
    "propagate_block",
    "propagate_block_coupled",
    "propagate_unit",
    "propagate_unit_coupled",
    "sa_update",
    "score_h_l",
    "step_size",
    "umsa_estimate",
    "umsa_single",
    "unit_steps",
    "write_records_csv",
]
