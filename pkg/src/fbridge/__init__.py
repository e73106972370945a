"""Guided bridge proposals and block sampling for partially observed
multivariate diffusions.

The pieces, bottom up: models and observation schemes (:mod:`.models`),
conditioning kernels built from a linear auxiliary process
(:mod:`.kernels`), guided forward simulation with innovation maps and
path weights (:mod:`.bridges`), the block sampler (:mod:`.mcmc`), and
independent reference computations (:mod:`.oracles`).
"""
from .bridges import (AcceptanceFactors, InnovationSegment, WeightedPath,
                      acceptance_factors, forward_guided, fresh_innovations,
                      inverse_innovation, log_psi, pcn_refresh, weigh_path)
from .errors import (ConfigError, FbridgeError, KernelBuildError, NumericError,
                     ProposalFailure)
from .kernels import (GuidedKernel, SegmentSpec, boundary_kernel_end,
                      build_kernel, flow_quantities, fundamental_matrix,
                      gain_and_covariance, guiding_H, guiding_r, limit_r_at_S,
                      precision_U, start_posterior)
from .mcmc import (ChainConfig, ChainState, NoiseParamSpec, Sampler, Trace,
                   blocks_for_parity, init_chain, run_chain,
                   update_even_blocks, update_noise_param, update_odd_blocks,
                   update_theta)
from .models import (DiffusionModel, LinearAuxiliary, Observation,
                     ObservationScheme, PathSegment, StartPrior,
                     auto_auxiliary, join_grids, make_grid, make_model,
                     model_linear_auxiliary, register_linearizer,
                     register_model, sample_observations, simulate_euler)
from .oracles import (LinearStateSpace, conditioned_mid_moments,
                      dense_obs_loglik, finite_diff_grad, finite_diff_hess,
                      kalman_loglik, linear_smoother, linear_ssm,
                      linear_transition_moments, rejection_bridge_sampler)

__version__ = "0.1.0"
