"""Risk-averse dynamic programming over the accumulated-cost augmented state."""

from .errors import (ConfigError, DomainError, DynamicsError, InputError, InstanceTooLargeError,
                     NumericError, RiskDPError, UnsupportedFamilyError)
from .horizon import (InfiniteMdp, TruncationPlan, ValueSurface, bellman_residual_eval,
                      bellman_residual_opt, cvar_operator_residual, horizon_for, residual_bound,
                      truncate, truncate_at, truncate_soc, truncation_bound)
from .mdp import (AugPolicy, FiniteHorizonMdp, ValueTable, XGrid, augmented_cost, dp_evaluate,
                  dp_optimize, eval_modulus, opt_modulus, optimal_risk, policy_risk)
from .oracle import (cvar_closed_form, enumerate_policies, exact_total_cost_distribution,
                     oracle_optimal_risk, primal_phi_risk)
from .risk import (DiscreteDist, PhiSpec, RiskFamily, ThetaGrid, conjugate_truncated, eval_f,
                   risk_of_distribution)
from .sampling import (GenerativeModel, build_empirical_mdp, build_empirical_soc,
                       sample_size_eval, sample_size_infinite, sample_size_opt, sample_size_soc,
                       sweep_eval, sweep_opt)
from .soc import (CostSpec, LinearDynamics, SocGrid, SocProblem, TableDynamics, embed_mdp,
                  soc_dp_evaluate, soc_dp_optimize, soc_moduli, soc_optimal_risk, to_mdp)

__version__ = "0.1.0"
