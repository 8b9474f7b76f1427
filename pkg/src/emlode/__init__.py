"""Grammar search over gate expressions, relaxation response models and gate cascades."""

from .cascade import (
    CascadeSpec, Readout, cascade_simulate, fit_readout, gate_schedule, linear_response,
    reservoir_grid_search, steady_state, transfer_function,
)
from .expr_core import (
    EML, HILL, R, Block, DomainError, GrammarConfig, Sum, Terminal, canonicalize,
    enumerate_expressions, eval_expr, gate_eval, hill_eval, measure, parse, serialize,
)
from .fitting import FitResult, Split, Trace, fit_model, floor_sems, split_train_hold, wmse
from .response_models import (
    DOSE_ODE, RELAX, STATIC, ExpressionModel, LinkerFamily, LinkerModel, convolution_solve,
    linker_ode, linker_phi, m1_optimum, recruitment_input, relax_solve, static_response,
)
from .selection import ScoreConfig, aic_bic, count_params, rank_models, validation_score
from .toybench import NetworkParams, add_noise, benchmark_trace, simulate_network

__version__ = "0.1.0"
