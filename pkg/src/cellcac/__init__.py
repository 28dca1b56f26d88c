"""Call admission control for multi-class cellular networks as an MDP."""
from .errors import (CacError, ConfigError, ConvergenceError, DegenerateModelError,
                     InfeasibleActionError, InvariantViolation, RecurrenceError)
from .model import (AdmissionModel, CallEvent, CellState, PricingScheme, QosClassSpec,
                    TrafficModel, enumerate_states, mobility_rho, proportional_classes)
from .solver import (Policy, SolverConfig, binary_search_single_class, fixed_point_policy,
                     stationary_distribution, value_iteration, verify_threshold)

__version__ = "0.1.0"
